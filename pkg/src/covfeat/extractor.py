"""Dense regression on the stride-4 grid, vote-map splatting and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import maximum_filter, uniform_filter

from .dataset import VARIANCE_FLOOR, standardize_image, to_gray
from .geometry import PATCH_HALF, PATCH_SIZE
from .nn import PIXELS_PER_UNIT, STRIDE, Network

NMS_RADIUS = 5
SUPPORT_RADIUS = 16.0


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    radius: float = SUPPORT_RADIUS

    @property
    def pt(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class VoteMap:
    values: np.ndarray
    in_bounds: int = 0
    dropped: int = 0

    @property
    def mass(self) -> float:
        return float(self.values.sum())


@dataclass
class DenseRegression:
    """Per-cell predictions and the absolute positions they vote for."""

    offsets: np.ndarray     # (Gh, Gw, 2) predicted (dx, dy)
    centers: np.ndarray     # (Gh, Gw, 2) cell centers in image pixels

    @property
    def positions(self) -> np.ndarray:
        return self.centers + self.offsets


def grid_centers(gh: int, gw: int) -> np.ndarray:
    """Image position of each cell's patch center: ``(4j + 16, 4i + 16)``."""
    ys, xs = np.mgrid[0:gh, 0:gw]
    return np.stack([STRIDE * xs + PATCH_HALF, STRIDE * ys + PATCH_HALF], axis=-1).astype(np.float64)


def _window_offsets(img, net: Network, chunk: int = 512) -> np.ndarray:
    """Each stride-4 window standardized on its own, as the training patches are."""
    win = sliding_window_view(img, (PATCH_SIZE, PATCH_SIZE))[::STRIDE, ::STRIDE]
    gh, gw = win.shape[:2]
    flat = win.reshape(gh * gw, PATCH_SIZE * PATCH_SIZE)
    mean = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    out = np.empty((gh * gw, 2))
    for s in range(0, gh * gw, chunk):
        v, m = var[s:s + chunk], mean[s:s + chunk]
        x = np.where(v > VARIANCE_FLOOR, (flat[s:s + chunk] - m) / np.sqrt(np.maximum(v, 1e-300)), 0)
        out[s:s + chunk] = net.predict(x.reshape(-1, PATCH_SIZE, PATCH_SIZE))
    return out.reshape(gh, gw, 2)


def dense_regress(image, net: Network, normalize="global") -> DenseRegression:
    """Regress an offset for every grid cell whose 32x32 field is inside the image.

    ``normalize``: ``"global"`` (or True) standardizes the whole image and
    runs one fully convolutional pass; ``"window"`` standardizes every
    receptive field separately, matching training exactly at a few times
    the cost; False uses the image as is.
    """
    img = to_gray(image)
    h, w = img.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValueError(f"image {w}x{h} smaller than the {PATCH_SIZE}x{PATCH_SIZE} receptive field")
    if normalize == "window":
        offsets = _window_offsets(img, net)
    else:
        if normalize is True or normalize == "global":
            img = standardize_image(img)
        elif normalize is not False:
            raise ValueError(f"unknown normalization {normalize!r}")
        out = net.forward(img[None, None].astype(net.dtype))[0]
        offsets = np.moveaxis(out, 0, -1).astype(np.float64) * PIXELS_PER_UNIT
    gh, gw = offsets.shape[:2]
    return DenseRegression(offsets, grid_centers(gh, gw))


def splat_votes(positions, shape) -> VoteMap:
    """Bilinear splat of (x, y) positions onto an ``(H, W)`` pixel grid."""
    h, w = shape
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    ok = (np.isfinite(p).all(axis=1) & (p[:, 0] >= 0) & (p[:, 0] <= w - 1)
          & (p[:, 1] >= 0) & (p[:, 1] <= h - 1))
    q = p[ok]
    x0 = np.floor(q[:, 0]).astype(np.intp)
    y0 = np.floor(q[:, 1]).astype(np.intp)
    fx = q[:, 0] - x0
    fy = q[:, 1] - y0
    # one spare row/column takes the zero-weight neighbors of points on the last pixel
    acc = np.zeros((h + 1, w + 1))
    np.add.at(acc, (y0, x0), (1 - fx) * (1 - fy))
    np.add.at(acc, (y0, x0 + 1), fx * (1 - fy))
    np.add.at(acc, (y0 + 1, x0), (1 - fx) * fy)
    np.add.at(acc, (y0 + 1, x0 + 1), fx * fy)
    return VoteMap(acc[:h, :w].copy(), int(ok.sum()), int((~ok).sum()))


def _refine(v, y, x):
    """Sub-pixel offset from a separable 3-point parabola fit, clipped to half a pixel."""
    h, w = v.shape
    dx = dy = 0.0
    if 0 < x < w - 1:
        den = v[y, x - 1] - 2 * v[y, x] + v[y, x + 1]
        if den < 0:
            dx = float(np.clip(0.5 * (v[y, x - 1] - v[y, x + 1]) / den, -0.5, 0.5))
    if 0 < y < h - 1:
        den = v[y - 1, x] - 2 * v[y, x] + v[y + 1, x]
        if den < 0:
            dy = float(np.clip(0.5 * (v[y - 1, x] - v[y + 1, x]) / den, -0.5, 0.5))
    return dx, dy


def local_maxima(values: np.ndarray, radius: int = NMS_RADIUS) -> np.ndarray:
    """``(M, 2)`` (row, col) of positive pixels that win their (2r+1)^2 window.

    A pixel wins if no other pixel in the window is larger and no equal
    pixel precedes it in row-major scan order.
    """
    v = np.asarray(values, dtype=np.float64)
    size = 2 * radius + 1
    peak = (v == maximum_filter(v, size=size, mode="constant", cval=-np.inf)) & (v > 0)
    cand = np.argwhere(peak)
    h, w = v.shape
    keep = []
    for y, x in cand:
        y0, y1 = max(0, y - radius), min(h, y + radius + 1)
        x0, x1 = max(0, x - radius), min(w, x + radius + 1)
        win = v[y0:y1, x0:x1] == v[y, x]
        # equal pixels earlier in scan order: rows above, or same row to the left
        earlier = win[:y - y0].any() or win[y - y0, :x - x0].any()
        if not earlier:
            keep.append((y, x))
    return np.array(keep, dtype=np.intp).reshape(-1, 2)


def nms_select(votemap, k: int, radius: int = NMS_RADIUS, refine: bool = True,
               support_radius: float = SUPPORT_RADIUS) -> list[Keypoint]:
    if k < 1:
        raise ValueError("k must be >= 1")
    v = votemap.values if isinstance(votemap, VoteMap) else np.asarray(votemap, dtype=np.float64)
    peaks = local_maxima(v, radius)
    if len(peaks) == 0:
        return []
    scores = v[peaks[:, 0], peaks[:, 1]]
    # score descending, then (y, x) ascending
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -scores))[:k]
    out = []
    for i in order:
        y, x = peaks[i]
        dx, dy = _refine(v, y, x) if refine else (0.0, 0.0)
        out.append(Keypoint(float(x + dx), float(y + dy), float(scores[i]), support_radius))
    return out


def extract_with_votemap(image, net: Network, k: int = 1000, nms_radius: int = NMS_RADIUS,
                         blur: bool = False, support_radius: float = SUPPORT_RADIUS,
                         normalize="global"):
    img = to_gray(image)
    reg = dense_regress(img, net, normalize)
    vm = splat_votes(reg.positions, img.shape)
    if blur:
        vm = VoteMap(uniform_filter(vm.values, size=3, mode="constant"), vm.in_bounds, vm.dropped)
    return nms_select(vm, k, nms_radius, support_radius=support_radius), vm


def extract(image, net: Network, k: int = 1000, nms_radius: int = NMS_RADIUS,
            blur: bool = False, normalize="global") -> list[Keypoint]:
    return extract_with_votemap(image, net, k, nms_radius, blur, normalize=normalize)[0]


def random_keypoints(shape, k: int, rng, support_radius: float = SUPPORT_RADIUS
                     ) -> list[Keypoint]:
    """Uniform random detections inside the valid grid area (the chance baseline)."""
    h, w = shape
    xs = rng.uniform(PATCH_HALF, w - PATCH_HALF, size=k)
    ys = rng.uniform(PATCH_HALF, h - PATCH_HALF, size=k)
    return [Keypoint(float(x), float(y), 1.0, support_radius) for x, y in zip(xs, ys)]


# -- keypoint files -----------------------------------------------------------


def write_keypoints(path, keypoints, image_id: str = "", checkpoint_hash: str = "",
                    k: int | None = None, nms_radius: int = NMS_RADIUS, **extra) -> None:
    with open(path, "w") as f:
        f.write(f"# image {image_id}\n# checkpoint {checkpoint_hash}\n")
        f.write(f"# k {k if k is not None else len(keypoints)}\n# nms_radius {nms_radius}\n")
        for key, value in extra.items():
            f.write(f"# {key} {value}\n")
        for kp in keypoints:
            f.write(f"{kp.x!r} {kp.y!r} {kp.score!r} {kp.radius!r}\n")


def read_keypoints(path):
    """Returns ``(keypoints, header dict)``."""
    header, kps = {}, []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split(None, 1)
            if parts:
                header[parts[0]] = parts[1] if len(parts) > 1 else ""
            continue
        x, y, s, r = (float(v) for v in line.split())
        kps.append(Keypoint(x, y, s, r))
    return kps, header
