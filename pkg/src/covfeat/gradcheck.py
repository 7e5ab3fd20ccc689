"""Central finite-difference checks of the network and loss gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import VARIANTS, LossConfig, loss_total
from .nn import Network

EPS = 1e-6
TOLERANCE = 1e-4
# gradients below this magnitude are compared in absolute terms
FLOOR = 1e-5


@dataclass
class GradReport:
    name: str
    checked: int
    max_rel_error: float
    worst: str = ""
    nonfinite: str = ""

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" non-finite at {self.nonfinite}" if self.nonfinite else ""
        return (f"{status} {self.name:<22} coords={self.checked:<5} "
                f"max_rel_err={self.max_rel_error:.3e} worst={self.worst}{extra}")


def rel_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def _report(name, coords, analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    bad = ~(np.isfinite(analytic) & np.isfinite(numeric))
    if bad.any():
        i = int(np.argmax(bad))
        return GradReport(name, len(coords), float("inf"), "", str(coords[i]))
    err = rel_error(analytic, numeric)
    i = int(np.argmax(err)) if len(err) else 0
    return GradReport(name, len(coords), float(err.max()) if len(err) else 0.0,
                      str(coords[i]) if len(coords) else "")


def check_network(seed: int = 0, layers=None, weights_per_layer: int = 200,
                  biases_per_layer: int = 32, batch: int = 2, eps: float = EPS,
                  net: Network | None = None) -> list[GradReport]:
    """Compare backprop against central differences for sampled parameters.

    The scalar checked is ``sum(w * net(x))`` for random ``x`` and ``w``.
    ``layers`` holds 1-based layer numbers (default: all).
    """
    rng = np.random.default_rng(seed)
    net = (net or Network.create(seed)).astype(np.float64)
    x = rng.standard_normal((batch, 1, 32, 32))
    out = net.forward(x, train=True)
    w = rng.standard_normal(out.shape)
    net.backward(w)

    def value():
        return float(np.sum(w * net.forward(x)))

    reports = []
    chosen = range(1, len(net.layers) + 1) if layers is None else layers
    for number in chosen:
        layer = net.layers[number - 1]
        analytic, numeric, coords = [], [], []
        for pname, param, count in (("weight", layer.weight, weights_per_layer),
                                    ("bias", layer.bias, biases_per_layer)):
            flat = param.data.reshape(-1)
            grad = param.grad.reshape(-1)
            idx = rng.choice(flat.size, size=min(count, flat.size), replace=False)
            for i in np.sort(idx):
                old = flat[i]
                flat[i] = old + eps
                up = value()
                flat[i] = old - eps
                down = value()
                flat[i] = old
                analytic.append(grad[i])
                numeric.append((up - down) / (2 * eps))
                coords.append(f"layer{number}.{pname}{tuple(int(j) for j in np.unravel_index(i, param.shape))}")
        reports.append(_report(f"layer {number}", coords, analytic, numeric))
    return reports


def _loss_inputs(rng, n):
    out = rng.standard_normal((n, 5, 2))
    t = rng.uniform(-6, 6, size=(n, 3, 2)) / 16
    a = rng.standard_normal((n, 2, 2)) * 0.3 + np.eye(2)
    return out, t, a


def check_loss(variant: str, seed: int = 0, n: int = 4, eps: float = EPS,
               epoch: int = 5) -> GradReport:
    """Finite-difference check of ``loss_total`` w.r.t. all five outputs."""
    rng = np.random.default_rng([seed, VARIANTS.index(variant)])
    cfg = LossConfig(variant=variant)
    out, t, a = _loss_inputs(rng, n)
    res = loss_total(out, t, a, cfg, epoch)
    analytic, numeric, coords = [], [], []
    for idx in np.ndindex(out.shape):
        old = out[idx]
        out[idx] = old + eps
        up = loss_total(out, t, a, cfg, epoch).total
        out[idx] = old - eps
        down = loss_total(out, t, a, cfg, epoch).total
        out[idx] = old
        analytic.append(res.grad[idx])
        numeric.append((up - down) / (2 * eps))
        coords.append(f"outputs{idx}")
    return _report(f"loss {variant}", coords, analytic, numeric)


def check_end_to_end(seed: int = 0, variant: str = "trip-aff", coords: int = 100,
                     eps: float = EPS) -> GradReport:
    """Network + total loss on one random tuple, sampled over all layers."""
    rng = np.random.default_rng([seed, 99])
    net = Network.create(seed).astype(np.float64)
    cfg = LossConfig(variant=variant)
    x = rng.standard_normal((2 * 5, 1, 32, 32))
    _, t, a = _loss_inputs(rng, 2)

    def loss(train=False):
        out = net.forward(x, train=train)[:, :, 0, 0].reshape(2, 5, 2)
        return loss_total(out, t, a, cfg, epoch=5)

    res = loss(train=True)
    net.backward(res.grad.reshape(10, 2))
    params = net.params()
    analytic, numeric, names = [], [], []
    for _ in range(coords):
        p = int(rng.integers(len(params)))
        flat = params[p].data.reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + eps
        up = loss().total
        flat[i] = old - eps
        down = loss().total
        flat[i] = old
        analytic.append(params[p].grad.reshape(-1)[i])
        numeric.append((up - down) / (2 * eps))
        names.append(f"param{p}[{i}]")
    return _report(f"network+loss {variant}", names, analytic, numeric)


def run_all(seed: int = 0, layers=None, variants=VARIANTS) -> list[GradReport]:
    reports = check_network(seed, layers)
    if layers is None:
        reports += [check_loss(v, seed) for v in variants]
        reports.append(check_end_to_end(seed))
    return reports
