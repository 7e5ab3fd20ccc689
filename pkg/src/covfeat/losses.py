"""Covariance losses on the regressed translations.

Every function takes batches of 2-vectors (shape ``(..., 2)``) and returns
the per-sample loss together with its analytic gradients, so the trainer
can feed the gradients straight into ``Network.backward``.

Patch order inside a tuple is ``(x, x1, x2, x3, xA)`` everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("trip-aff", "trip", "cov-aff", "covdet", "ddet")
COMPONENTS = ("cov_tran", "cov_aff", "identity", "pairwise_cov")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "trip-aff"
    alpha: float = 2.0
    beta: float = 1.0
    identity_weight: float = 1.0
    affine_enabled_epoch: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant in ("trip", "trip-aff") and self.alpha == self.beta:
            raise ValueError("triplet losses need alpha != beta")

    @property
    def uses_affine(self) -> bool:
        return self.variant in ("trip-aff", "cov-aff")

    def affine_active(self, epoch: int) -> bool:
        return self.uses_affine and epoch >= self.affine_enabled_epoch


@dataclass
class LossOutput:
    """Batch-mean loss, its components and d(total)/d(outputs) of shape (N, 5, 2)."""

    total: float
    components: dict = field(default_factory=dict)
    grad: np.ndarray | None = None
    per_sample: np.ndarray | None = None


def t_ij(ti, tj, alpha=2.0, beta=1.0):
    return alpha * np.asarray(ti, dtype=np.float64) - beta * np.asarray(tj, dtype=np.float64)


def _sq(r):
    return np.sum(r * r, axis=-1)


def loss_cov_tran(phi_x, phi_x1, phi_x2, phi_x3, t1, t2, t3, alpha=2.0, beta=1.0):
    """Triplet translation covariance over the cyclic pairs (1,2), (2,3), (3,1).

    Returns ``(loss, (g_x, g_x1, g_x2, g_x3))``.
    """
    phi_x, phi_x1, phi_x2, phi_x3 = (np.asarray(p, dtype=np.float64)
                                     for p in (phi_x, phi_x1, phi_x2, phi_x3))
    shared = (alpha - beta) * phi_x
    r12 = alpha * phi_x1 - beta * phi_x2 - shared - t_ij(t1, t2, alpha, beta)
    r23 = alpha * phi_x2 - beta * phi_x3 - shared - t_ij(t2, t3, alpha, beta)
    r31 = alpha * phi_x3 - beta * phi_x1 - shared - t_ij(t3, t1, alpha, beta)
    loss = _sq(r12) + _sq(r23) + _sq(r31)
    g_x = -2.0 * (alpha - beta) * (r12 + r23 + r31)
    g_x1 = 2.0 * (alpha * r12 - beta * r31)
    g_x2 = 2.0 * (alpha * r23 - beta * r12)
    g_x3 = 2.0 * (alpha * r31 - beta * r23)
    return loss, (g_x, g_x1, g_x2, g_x3)


def loss_cov_aff(phi_x, phi_xA, A):
    """``|phi(xA) - A phi(x)|^2`` with ``A`` the 2x2 linear part (or ``(N, 2, 2)``)."""
    phi_x = np.asarray(phi_x, dtype=np.float64)
    phi_xA = np.asarray(phi_xA, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    r = phi_xA - np.einsum("...ij,...j->...i", A, phi_x)
    g_x = -2.0 * np.einsum("...ji,...j->...i", A, r)
    return _sq(r), (g_x, 2.0 * r)


def loss_ddet_baseline(phi_x, phi_gx, g_translation):
    """Pairwise translation covariance ``|phi(g*x) - (phi(x) + t)|^2``."""
    phi_x = np.asarray(phi_x, dtype=np.float64)
    r = np.asarray(phi_gx, dtype=np.float64) - phi_x - np.asarray(g_translation, dtype=np.float64)
    return _sq(r), (-2.0 * r, 2.0 * r)


def loss_covdet_baseline(phi_x, phi_gx, g_translation, identity_weight=1.0):
    """Pairwise covariance plus ``identity_weight * |phi(x)|^2``.

    Returns ``(covariant, identity, (g_x, g_gx))``; the gradients are of the sum.
    """
    cov, (g_x, g_gx) = loss_ddet_baseline(phi_x, phi_gx, g_translation)
    phi_x = np.asarray(phi_x, dtype=np.float64)
    ident = identity_weight * _sq(phi_x)
    return cov, ident, (g_x + 2.0 * identity_weight * phi_x, g_gx)


def loss_total(outputs, translations, affine, config: LossConfig, epoch: int) -> LossOutput:
    """Batch loss for the selected variant.

    outputs:      ``(N, 5, 2)`` predictions for ``(x, x1, x2, x3, xA)``
    translations: ``(N, 3, 2)`` generating translations ``t1, t2, t3``
    affine:       ``(N, 2, 2)`` linear part of the generating affinity
    The batch reduction is the mean over tuples.  The affine term is
    zeroed while ``epoch < config.affine_enabled_epoch``.
    """
    out = np.asarray(outputs, dtype=np.float64)
    if out.ndim == 2:
        out = out[None]
    n = out.shape[0]
    if out.shape[1:] != (5, 2):
        raise ValueError(f"expected outputs of shape (N, 5, 2), got {out.shape}")
    t = np.asarray(translations, dtype=np.float64).reshape(n, 3, 2)
    A = np.asarray(affine, dtype=np.float64).reshape(n, 2, 2)
    grad = np.zeros_like(out)
    per = {c: np.zeros(n) for c in COMPONENTS}
    v = config.variant
    phi = out[:, 0]

    if v in ("trip", "trip-aff"):
        loss, gs = loss_cov_tran(phi, out[:, 1], out[:, 2], out[:, 3], t[:, 0], t[:, 1], t[:, 2],
                                 config.alpha, config.beta)
        per["cov_tran"] = loss
        for i, g in enumerate(gs):
            grad[:, i] += g
    elif v in ("cov-aff", "ddet"):
        loss, (g_x, g_gx) = loss_ddet_baseline(phi, out[:, 1], t[:, 0])
        per["pairwise_cov"] = loss
        grad[:, 0] += g_x
        grad[:, 1] += g_gx
    elif v == "covdet":
        cov, ident, (g_x, g_gx) = loss_covdet_baseline(phi, out[:, 1], t[:, 0],
                                                       config.identity_weight)
        per["pairwise_cov"] = cov
        per["identity"] = ident
        grad[:, 0] += g_x
        grad[:, 1] += g_gx

    if config.affine_active(epoch):
        loss, (g_x, g_a) = loss_cov_aff(phi, out[:, 4], A)
        per["cov_aff"] = loss
        grad[:, 0] += g_x
        grad[:, 4] += g_a

    per_sample = sum(per[c] for c in COMPONENTS)
    return LossOutput(
        total=float(per_sample.mean()),
        components={c: float(per[c].mean()) for c in COMPONENTS},
        grad=grad / n,
        per_sample=per_sample,
    )
