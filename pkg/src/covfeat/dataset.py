"""Training tuples, the tuple archive, synthetic images and evaluation sequences."""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .geometry import (PATCH_HALF, PATCH_SIZE, AffineTransform, apply_point, bilinear_sample, compose,
                       normalize_homography, patch_footprint, random_linear, warp_patch)

LUMA = np.array([0.299, 0.587, 0.114])
VARIANCE_FLOOR = 1e-8

ARCHIVE_MAGIC = b"COVTUPL\x00"
ARCHIVE_VERSION = 1
RECORD_DTYPE = np.dtype([
    ("patches", "<f4", (5, PATCH_SIZE, PATCH_SIZE)),
    ("translations", "<f4", (3, 2)),
    ("affine", "<f4", (2, 3)),
])

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class GenerationError(ValueError):
    pass


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    scale_range: tuple = (0.85, 1.15)
    shear_range: tuple = (-0.15, 0.15)
    rotation_range: tuple = (0.0, 360.0)
    jitter_range: tuple = (-5.0, 5.0)
    translation_range: tuple = (-6.0, 6.0)
    tuple_count: int = 256_000
    seed: int = 0

    @classmethod
    def degenerate(cls, **kw):
        """All perturbations disabled: every patch of a tuple equals the reference."""
        return cls(scale_range=(1.0, 1.0), shear_range=(0.0, 0.0), rotation_range=(0.0, 0.0),
                   jitter_range=(0.0, 0.0), translation_range=(0.0, 0.0), **kw)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class PatchTuple:
    """Reference patch ``x``, its translated copies ``x1..x3`` and affine warp ``xA``."""

    patches: np.ndarray          # (5, 32, 32) in order x, x1, x2, x3, xA
    translations: np.ndarray     # (3, 2)
    affine: AffineTransform      # A, linear about the patch center
    image_index: int = 0
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    reference: AffineTransform = field(default_factory=AffineTransform.identity)

    @property
    def x(self):
        return self.patches[0]

    @property
    def xA(self):
        return self.patches[4]

    def transforms(self) -> list[AffineTransform]:
        """Source-to-patch transforms of the five patches."""
        ref = self.reference
        out = [ref]
        out += [compose(AffineTransform.from_translation(t), ref) for t in self.translations]
        out.append(compose(self.affine, ref))
        return out


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ LUMA
    return img


def normalize_patch(raw) -> np.ndarray:
    """Grayscale, then standardize to zero mean and unit variance.

    Flat inputs (variance at or below the floor) map to all zeros.
    """
    g = to_gray(raw)
    var = g.var()
    if var <= VARIANCE_FLOOR:
        return np.zeros_like(g)
    return (g - g.mean()) / np.sqrt(var)


def standardize_image(image) -> np.ndarray:
    return normalize_patch(image)


def _shear_inverse_norm(s):
    return (1.0 + s) / (1.0 - s * s)


def required_margin(config: AugmentationConfig) -> int:
    """Distance from the border a tuple center needs so no footprint leaves the image."""
    kmin = min(abs(config.scale_range[0]), abs(config.scale_range[1]))
    smax = max(abs(config.shear_range[0]), abs(config.shear_range[1]))
    if kmin <= 0 or smax >= 1:
        raise GenerationError("scale must stay positive and shear below 1")
    linv = _shear_inverse_norm(smax) / kmin
    corner = np.hypot(PATCH_HALF, PATCH_HALF)
    jit = np.sqrt(2) * max(abs(v) for v in config.jitter_range)
    trn = np.sqrt(2) * max(abs(v) for v in config.translation_range)
    reach = max(linv * (corner + trn + jit), linv * (linv * corner + jit))
    return int(np.ceil(reach)) + 1


def minimum_image_size(config: AugmentationConfig) -> int:
    return 2 * required_margin(config) + 1


def sample_transforms(config: AugmentationConfig, rng):
    """Draw reference transform, the three translations and the affinity A."""
    lin = random_linear(rng, config.scale_range, config.shear_range, config.rotation_range)
    jitter = rng.uniform(*config.jitter_range, size=2)
    reference = AffineTransform(lin, jitter)
    translations = rng.uniform(*config.translation_range, size=(3, 2))
    A = AffineTransform(
        random_linear(rng, config.scale_range, config.shear_range, config.rotation_range),
        np.zeros(2))
    return reference, translations, A


def sample_tuple(image, config: AugmentationConfig, rng, image_index: int = 0) -> PatchTuple:
    img = to_gray(image)
    h, w = img.shape
    m = required_margin(config)
    if h < 2 * m + 1 or w < 2 * m + 1:
        raise GenerationError(
            f"source image {w}x{h} is too small: needs at least {2 * m + 1}x{2 * m + 1} pixels")
    center = np.array([rng.uniform(m, w - 1 - m), rng.uniform(m, h - 1 - m)])
    reference, translations, A = sample_transforms(config, rng)
    tup = PatchTuple(np.empty((5, PATCH_SIZE, PATCH_SIZE)), translations, A, image_index,
                     center, reference)
    for i, t in enumerate(tup.transforms()):
        # clamp=False: a footprint outside the image is a bug in the margin
        tup.patches[i] = normalize_patch(warp_patch(img, center, t, clamp=False))
    return tup


def tuple_rng(seed: int, index: int):
    return np.random.default_rng([seed, index])


def generate_tuple(images, config: AugmentationConfig, index: int) -> PatchTuple:
    """Tuple ``index`` of the stream; independent of every other tuple."""
    rng = tuple_rng(config.seed, index)
    k = int(rng.integers(len(images)))
    return sample_tuple(images[k], config, rng, image_index=k)


def iter_tuples(images, config: AugmentationConfig, start: int = 0, stop: int | None = None):
    if not images:
        raise GenerationError("at least one source image is required")
    stop = config.tuple_count if stop is None else stop
    for i in range(start, stop):
        yield generate_tuple(images, config, i)


def tuple_record(tup: PatchTuple) -> np.ndarray:
    rec = np.zeros((), dtype=RECORD_DTYPE)
    rec["patches"] = tup.patches
    rec["translations"] = tup.translations
    rec["affine"] = tup.affine.matrix
    return rec


def build_training_set(images, config: AugmentationConfig, path, meta: dict | None = None) -> Path:
    """Write ``config.tuple_count`` tuples to a versioned archive at ``path``.

    Layout: magic ``COVTUPL\\0``, u32 version, u32 header length, JSON header,
    then ``tuple_count`` fixed-size little-endian float32 records of five
    32x32 patches, three translations and the 2x3 affine matrix.
    """
    images = [to_gray(im) for im in images]
    path = Path(path)
    header = json.dumps({
        "count": config.tuple_count,
        "patch_size": PATCH_SIZE,
        "augmentation": config.to_dict(),
        "record": "patches<f4[5,32,32] translations<f4[3,2] affine<f4[2,3]",
        **(meta or {}),
    }, sort_keys=True).encode()
    try:
        with open(path, "wb") as f:
            f.write(ARCHIVE_MAGIC)
            f.write(struct.pack("<II", ARCHIVE_VERSION, len(header)))
            f.write(header)
            for tup in iter_tuples(images, config):
                f.write(tuple_record(tup).tobytes())
    except OSError as e:
        raise OSError(f"writing tuple archive {path}: {e}") from e
    return path


class TupleArchive:
    """Memory-mapped read access to a tuple archive."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            with open(self.path, "rb") as f:
                head = f.read(16)
                if head[:8] != ARCHIVE_MAGIC:
                    raise ValueError(f"{self.path}: not a tuple archive")
                version, hlen = struct.unpack("<II", head[8:16])
                if version != ARCHIVE_VERSION:
                    raise ValueError(f"{self.path}: archive version {version} unsupported")
                self.header = json.loads(f.read(hlen))
        except OSError as e:
            raise OSError(f"reading tuple archive {self.path}: {e}") from e
        offset = 16 + hlen
        count = self.header["count"]
        expected = offset + count * RECORD_DTYPE.itemsize
        if os.path.getsize(self.path) != expected:
            raise ValueError(f"{self.path}: size mismatch, archive truncated?")
        self.records = np.memmap(self.path, dtype=RECORD_DTYPE, mode="r", offset=offset,
                                 shape=(count,))

    def __len__(self):
        return len(self.records)

    def batch(self, indices):
        r = self.records[np.asarray(indices)]
        affine = np.asarray(r["affine"], dtype=np.float64)[:, :, :2]
        return (np.asarray(r["patches"]), np.asarray(r["translations"], dtype=np.float64),
                affine)


class InMemoryTuples:
    """Same ``batch`` interface as ``TupleArchive`` over a list of ``PatchTuple``."""

    def __init__(self, tuples):
        self.patches = np.stack([t.patches for t in tuples]).astype(np.float32)
        self.translations = np.stack([t.translations for t in tuples])
        self.affine = np.stack([t.affine.linear for t in tuples])
        self.header = {"count": len(tuples)}

    def __len__(self):
        return len(self.patches)

    def batch(self, indices):
        i = np.asarray(indices)
        return self.patches[i], self.translations[i], self.affine[i]


# -- synthetic corner-rich images -------------------------------------------


def _polygon_mask(h, w, verts):
    """Even-odd rasterization of a polygon given as (K, 2) (x, y) vertices."""
    x0 = max(int(np.floor(verts[:, 0].min())), 0)
    x1 = min(int(np.ceil(verts[:, 0].max())) + 1, w)
    y0 = max(int(np.floor(verts[:, 1].min())), 0)
    y1 = min(int(np.ceil(verts[:, 1].max())) + 1, h)
    mask = np.zeros((h, w), dtype=bool)
    if x0 >= x1 or y0 >= y1:
        return mask
    px, py = np.meshgrid(np.arange(x0, x1) + 0.0, np.arange(y0, y1) + 0.0)
    inside = np.zeros(px.shape, dtype=bool)
    xj, yj = verts[-1]
    for xi, yi in verts:
        cross = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= cross & (px < xint)
        xj, yj = xi, yi
    mask[y0:y1, x0:x1] = inside
    return mask


def synthetic_image(size, rng, density: float = 1 / 900, blur: float = 0.8,
                    noise: float = 0.01) -> np.ndarray:
    """Procedural image of overlapping random polygons, values in [0, 1].

    ``size`` is an int or ``(height, width)``; ``density`` is shapes per pixel.
    """
    h, w = (size, size) if np.isscalar(size) else size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy = rng.uniform(-0.2, 0.2, size=2)
    img = rng.uniform(0.3, 0.7) + gx * xx + gy * yy
    n = max(1, int(round(density * h * w)))
    for _ in range(n):
        cx, cy = rng.uniform(-10, w + 10), rng.uniform(-10, h + 10)
        radius = rng.uniform(5, 28)
        k = int(rng.integers(3, 6))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        rad = radius * rng.uniform(0.5, 1.0, size=k)
        verts = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
        img[_polygon_mask(h, w, verts)] = rng.uniform(0, 1)
    img = gaussian_filter(img, blur)
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0, 1)


def synthetic_images(count: int, size, seed: int) -> list[np.ndarray]:
    return [synthetic_image(size, np.random.default_rng([seed, i])) for i in range(count)]


def synthetic_pair(seed: int, size: int = 256, config: AugmentationConfig | None = None,
                   **image_kw):
    """Two views of one synthetic scene related by a random affinity.

    Returns ``(image_a, image_b, H)`` where ``H`` maps points of ``image_a``
    to ``image_b``.  Both views are cut from a larger canvas, so neither has
    invented border content.
    """
    config = config or AugmentationConfig()
    rng = np.random.default_rng([seed, 0xA11E])
    canvas_size = 2 * size + 32
    canvas = synthetic_image(canvas_size, rng, **image_kw)
    lin = random_linear(rng, config.scale_range, config.shear_range, config.rotation_range)
    cc = np.array([canvas_size / 2, canvas_size / 2])
    half = np.array([size / 2, size / 2])
    # image_a(p) = canvas(p - half + cc); image_b(q) = canvas(cc + lin^-1 (q - half))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xs, ys], axis=-1)
    a_src = pts - half + cc
    image_a = bilinear_sample(canvas, a_src[..., 0], a_src[..., 1])
    b_src = apply_point(AffineTransform(np.linalg.inv(lin), np.zeros(2)), pts - half) + cc
    image_b = bilinear_sample(canvas, b_src[..., 0], b_src[..., 1])
    H = np.eye(3)
    H[:2, :2] = lin
    H[:2, 2] = half - lin @ half
    return image_a, image_b, H


# -- image and sequence I/O -----------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read a raster as float64 grayscale in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "I;16", "I", "F") else im
            arr = np.asarray(im, dtype=np.float64)
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    if arr.ndim == 3:
        return to_gray(arr) / 255.0
    scale = 65535.0 if arr.max() > 255 else 255.0
    return arr / scale


def write_image(path, image) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


_NUMBER = re.compile(rb"\S+")


def parse_homography(text: bytes | str, name: str = "<homography>") -> np.ndarray:
    """Parse nine whitespace-separated reals (row-major 3x3)."""
    if isinstance(text, str):
        text = text.encode()
    values = []
    for m in _NUMBER.finditer(text):
        try:
            values.append(float(m.group()))
        except ValueError:
            raise SequenceError(
                f"{name}: invalid number {m.group().decode(errors='replace')!r} "
                f"at byte offset {m.start()}") from None
        if len(values) > 9:
            raise SequenceError(f"{name}: more than 9 numbers (extra value at byte offset "
                                f"{m.start()})")
    if len(values) != 9:
        raise SequenceError(f"{name}: expected 9 numbers, found {len(values)} "
                            f"(input ends at byte offset {len(text)})")
    return np.array(values).reshape(3, 3)


def write_homography(path, h) -> None:
    h = np.asarray(h, dtype=np.float64)
    with open(path, "w") as f:
        for row in h:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclass
class SequenceDataset:
    name: str
    images: list
    homographies: dict        # index k >= 1 -> H mapping image 0 to image k
    illumination_only: bool = False

    def __len__(self):
        return len(self.images)

    def pairs(self):
        """``(0, k, H)`` for every non-reference image."""
        for k in range(1, len(self.images)):
            yield 0, k, self.homographies[k]


def _image_files(directory: Path):
    found = {}
    for p in directory.iterdir():
        m = re.fullmatch(r"img(\d+)", p.stem)
        if m and p.suffix.lower() in IMAGE_SUFFIXES:
            found[int(m.group(1))] = p
    return [found[k] for k in sorted(found)]


def load_sequence(directory) -> SequenceDataset:
    """Load ``img1..imgN`` plus ``H1to2p..H1toNp`` from a directory.

    A directory with no homography files at all is treated as a fixed
    viewpoint sequence (identity maps).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceError(f"{directory}: not a directory")
    files = _image_files(directory)
    if not files:
        raise SequenceError(f"{directory}: no img<N> images found")
    images = [read_image(p) for p in files]
    hfiles = {k: directory / f"H1to{k + 1}p" for k in range(1, len(files))}
    present = {k: p for k, p in hfiles.items() if p.exists()}
    illum = not present
    homs = {}
    for k, p in hfiles.items():
        if illum:
            homs[k] = np.eye(3)
            continue
        if k not in present:
            raise SequenceError(f"{p}: missing homography file")
        h = normalize_homography(parse_homography(p.read_bytes(), str(p)))
        if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < 1e-12:
            raise SequenceError(f"{p}: homography is singular")
        homs[k] = h
    return SequenceDataset(directory.name, images, homs, illumination_only=illum)


def save_sequence(directory, images, homographies) -> Path:
    """Write a sequence in the ``img<N>.png`` / ``H1to<N>p`` layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        write_image(directory / f"img{i + 1}.png", im)
    for k, h in homographies.items():
        write_homography(directory / f"H1to{k + 1}p", h)
    return directory


def verify_tuple(image, tup: PatchTuple, atol: float = 1e-6) -> float:
    """Rebuild each patch from the source and recorded transforms; max abs diff."""
    img = to_gray(image)
    worst = 0.0
    for i, t in enumerate(tup.transforms()):
        ref = normalize_patch(warp_patch(img, tup.center, t, clamp=False))
        worst = max(worst, float(np.max(np.abs(ref - tup.patches[i]))))
    return worst


def footprints_inside(image_shape, tup: PatchTuple) -> bool:
    h, w = image_shape
    for t in tup.transforms():
        fp = patch_footprint(tup.center, t)
        if fp[..., 0].min() < 0 or fp[..., 1].min() < 0:
            return False
        if fp[..., 0].max() > w - 1 or fp[..., 1].max() > h - 1:
            return False
    return True
