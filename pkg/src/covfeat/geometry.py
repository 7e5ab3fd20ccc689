"""Affine and homography algebra plus bilinear patch sampling.

Conventions used throughout the package:

* points are ``(x, y)`` with x to the right and y downward;
* pixel ``(row r, col c)`` has its center at the integer point ``(c, r)``;
* a 32x32 patch is indexed by offsets ``-16..15`` from its center, so the
  patch pixel at index ``(r, c)`` sits at offset ``(c - 16, r - 16)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATCH_SIZE = 32
PATCH_HALF = PATCH_SIZE // 2


@dataclass(frozen=True)
class AffineTransform:
    """``p -> linear @ p + translation``."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=np.float64).reshape(2, 2))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(2))

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(2), t)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:2, :2], m[:2, 2])

    @property
    def matrix(self) -> np.ndarray:
        """2x3 ``[linear | translation]``."""
        return np.hstack([self.linear, self.translation[:, None]])

    def homogeneous(self) -> np.ndarray:
        m = np.eye(3)
        m[:2] = self.matrix
        return m

    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def inverse(self) -> "AffineTransform":
        if abs(self.det()) < 1e-12:
            raise np.linalg.LinAlgError("affine transform is singular")
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation)

    def __call__(self, p):
        return apply_point(self, p)

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return compose(self, other)


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """``compose(a, b)(p) == a(b(p))``."""
    return AffineTransform(a.linear @ b.linear, a.linear @ b.translation + a.translation)


def apply_point(t: AffineTransform, p) -> np.ndarray:
    """Apply ``t`` to a point ``(2,)`` or to an array of points ``(N, 2)``."""
    p = np.asarray(p, dtype=np.float64)
    return p @ t.linear.T + t.translation


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_linear(rng, scale_range=(0.85, 1.15), shear_range=(-0.15, 0.15),
                  rotation_range=(0.0, 360.0)) -> np.ndarray:
    """Sample ``R(theta) @ Shear(sx, sy) @ Scale(kx, ky)``; angles in degrees."""
    theta = np.deg2rad(rng.uniform(*rotation_range))
    sx, sy = rng.uniform(*shear_range, size=2)
    kx, ky = rng.uniform(*scale_range, size=2)
    shear = np.array([[1.0, sx], [sy, 1.0]])
    return rotation(theta) @ shear @ np.diag([kx, ky])


# -- sampling ------------------------------------------------------------


def bilinear_sample(image: np.ndarray, xs, ys, clamp: bool = True) -> np.ndarray:
    """Sample ``image`` at continuous ``(xs, ys)`` with bilinear weights.

    With ``clamp`` the coordinates are clamped to the image (edge
    replication); without it, any sample outside ``[0, W-1] x [0, H-1]``
    raises ``ValueError``.
    """
    img = np.asarray(image)
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if clamp:
        xs = np.clip(xs, 0, w - 1)
        ys = np.clip(ys, 0, h - 1)
    elif (xs.min() < 0 or ys.min() < 0 or xs.max() > w - 1 or ys.max() > h - 1):
        raise ValueError("sample footprint leaves the image")
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def patch_offsets(size: int = PATCH_SIZE) -> np.ndarray:
    """``(size, size, 2)`` array of (x, y) offsets of each patch pixel from the center."""
    o = np.arange(size, dtype=np.float64) - size // 2
    ox, oy = np.meshgrid(o, o)
    return np.stack([ox, oy], axis=-1)


def patch_footprint(center, t: AffineTransform, size: int = PATCH_SIZE) -> np.ndarray:
    """Source-image coordinates sampled by ``warp_patch`` (``(size, size, 2)``)."""
    return apply_point(t.inverse(), patch_offsets(size)) + np.asarray(center, dtype=np.float64)


def warp_patch(image: np.ndarray, center, t: AffineTransform, size: int = PATCH_SIZE,
               clamp: bool = True) -> np.ndarray:
    """Extract ``t * image`` around ``center``.

    The output pixel at offset ``o`` from the patch center is the source
    sampled at ``center + t^-1(o)``, so content at offset ``p`` in the
    unwarped crop lands at ``t(p)``.
    """
    src = patch_footprint(center, t, size)
    return bilinear_sample(image, src[..., 0], src[..., 1], clamp=clamp)


# -- homographies ----------------------------------------------------------


def normalize_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if h[2, 2] != 0:
        h = h / h[2, 2]
    return h


def apply_homography(h, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    one = pts.ndim == 1
    pts = np.atleast_2d(pts)
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ np.asarray(h).T
    out = ph[:, :2] / ph[:, 2:3]
    return out[0] if one else out


def homography_jacobian(h, p) -> np.ndarray:
    """Analytic 2x2 Jacobian of the homography at point ``p``."""
    h = np.asarray(h, dtype=np.float64)
    x, y = p
    u = h[0, 0] * x + h[0, 1] * y + h[0, 2]
    v = h[1, 0] * x + h[1, 1] * y + h[1, 2]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    return np.array([
        [(h[0, 0] * w - u * h[2, 0]) / w**2, (h[0, 1] * w - u * h[2, 1]) / w**2],
        [(h[1, 0] * w - v * h[2, 0]) / w**2, (h[1, 1] * w - v * h[2, 1]) / w**2],
    ])


@dataclass(frozen=True)
class Ellipse:
    """Region ``{q : (q - center)^T inv(shape) (q - center) <= 1}``.

    ``shape`` is the 2x2 matrix ``J J^T r^2`` for a circle of radius r mapped by J.
    """

    center: np.ndarray
    shape: np.ndarray
    valid: bool = True

    @property
    def area(self) -> float:
        return float(np.pi * np.sqrt(max(np.linalg.det(self.shape), 0.0)))

    def boundary(self, n: int = 128) -> np.ndarray:
        """Polygon approximating the boundary, ``(n, 2)``."""
        vals, vecs = np.linalg.eigh(self.shape)
        ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
        unit = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return self.center + (unit * np.sqrt(np.maximum(vals, 0))) @ vecs.T


def project_region(h, center, radius: float) -> Ellipse:
    """Map a circle through the local affine approximation of ``h`` at ``center``."""
    c = np.asarray(center, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pc = apply_homography(h, c)
        if not np.all(np.isfinite(pc)):
            return Ellipse(np.array([np.nan, np.nan]), np.zeros((2, 2)), valid=False)
        j = homography_jacobian(h, c)
        det = np.linalg.det(j)
    valid = bool(np.isfinite(det) and abs(det) > 1e-12)
    return Ellipse(pc, j @ j.T * radius**2, valid=valid)
