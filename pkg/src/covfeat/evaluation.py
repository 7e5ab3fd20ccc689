"""Repeatability and matching-score benchmarks under a ground-truth homography.

``h`` always maps points of image A to image B.  Regions are the fixed
support circles of the keypoints; region B is projected into A's frame
through the local affine approximation of ``h^-1`` at B's center.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import cKDTree

from .extractor import Keypoint
from .geometry import apply_homography, bilinear_sample, homography_jacobian

OVERLAP_THRESHOLD = 0.4
POLYGON_VERTICES = 128
DESCRIPTOR_BANNER = ("NOTE: matching scores use a 4x4x8 gradient-histogram descriptor, not SIFT; "
                     "compare them across detectors evaluated here only.")


@dataclass
class RepeatabilityResult:
    sequence: str
    pair: tuple
    k: int
    correspondences: int
    n_a: int
    n_b: int
    repeatability: float | None
    pairs: list = field(default_factory=list, repr=False)


@dataclass
class MatchingResult:
    sequence: str
    pair: tuple
    correct: int
    extracted: int
    score: float | None
    matches: list = field(default_factory=list, repr=False)


# -- region overlap ----------------------------------------------------------


def circle_iou(r1: float, r2: float, d) -> np.ndarray:
    """Intersection over union of two discs with center distance ``d``."""
    d = np.asarray(d, dtype=np.float64)
    a1, a2 = np.pi * r1 * r1, np.pi * r2 * r2
    inter = np.zeros_like(d)
    inside = d <= abs(r1 - r2)
    inter[inside] = min(a1, a2)
    part = (~inside) & (d < r1 + r2)
    dp = d[part]
    c1 = np.clip((dp**2 + r1**2 - r2**2) / (2 * dp * r1), -1, 1)
    c2 = np.clip((dp**2 + r2**2 - r1**2) / (2 * dp * r2), -1, 1)
    lens = np.sqrt(np.clip((-dp + r1 + r2) * (dp + r1 - r2) * (dp - r1 + r2) * (dp + r1 + r2), 0, None))
    inter[part] = r1**2 * np.arccos(c1) + r2**2 * np.arccos(c2) - 0.5 * lens
    return inter / (a1 + a2 - inter)


def _unit_polygon(n=POLYGON_VERTICES):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass
class _Projected:
    centers: np.ndarray      # (M, 2) in A's frame
    jac: np.ndarray          # (M, 2, 2) local linear map B -> A
    radii: np.ndarray        # (M,) source radii
    valid: np.ndarray        # (M,) bool
    similarity: np.ndarray   # (M,) bool: projected region is a circle
    scale: np.ndarray        # (M,) similarity scale


def _project_b(kps_b, h) -> _Projected:
    hinv = np.linalg.inv(h)
    pts = np.array([[k.x, k.y] for k in kps_b], dtype=np.float64).reshape(-1, 2)
    radii = np.array([k.radius for k in kps_b], dtype=np.float64)
    # points on the line sent to infinity give inf/nan here and are marked invalid below
    with np.errstate(divide="ignore", invalid="ignore"):
        centers = apply_homography(hinv, pts) if len(pts) else np.zeros((0, 2))
        jac = np.array([homography_jacobian(hinv, p) for p in pts]).reshape(-1, 2, 2)
        det = np.linalg.det(jac) if len(pts) else np.zeros(0)
    valid = np.isfinite(centers).all(axis=1) & np.isfinite(det) & (np.abs(det) > 1e-12)
    jjt = jac @ np.swapaxes(jac, 1, 2)
    s2 = 0.5 * (jjt[:, 0, 0] + jjt[:, 1, 1])
    sim = valid & (np.abs(jjt - s2[:, None, None] * np.eye(2)).max(axis=(1, 2))
                   <= 1e-9 * np.maximum(s2, 1e-300))
    return _Projected(centers, jac, radii, valid, sim, np.sqrt(np.abs(s2)))


def _pair_overlaps(kps_a, kps_b, proj: _Projected, ia, ib) -> np.ndarray:
    ia = np.asarray(ia, dtype=np.intp)
    ib = np.asarray(ib, dtype=np.intp)
    out = np.zeros(len(ia))
    if len(ia) == 0:
        return out
    ca = np.array([[kps_a[i].x, kps_a[i].y] for i in ia])
    ra = np.array([kps_a[i].radius for i in ia])
    cb = proj.centers[ib]
    sim = proj.similarity[ib]
    for j in np.flatnonzero(sim):
        out[j] = circle_iou(ra[j], proj.radii[ib[j]] * proj.scale[ib[j]],
                            np.linalg.norm(ca[j] - cb[j]))
    poly = np.flatnonzero(~sim & proj.valid[ib])
    if len(poly):
        unit = _unit_polygon()
        pa = ca[poly, None, :] + ra[poly, None, None] * unit[None]
        rb = proj.radii[ib[poly]]
        pb = cb[poly, None, :] + np.einsum("mij,nj->mni", proj.jac[ib[poly]],
                                           unit) * rb[:, None, None]
        ga = shapely.polygons(pa)
        gb = shapely.polygons(pb)
        inter = shapely.area(shapely.intersection(ga, gb))
        union = shapely.area(ga) + shapely.area(gb) - inter
        out[poly] = inter / union
    return out


def region_overlap(kp_a: Keypoint, kp_b: Keypoint, h) -> float:
    """IoU of A's region and B's region projected into A's frame.

    Exact for similarity-like local maps; otherwise computed on 128-gon
    approximations.  A degenerate projection gives 0.
    """
    proj = _project_b([kp_b], np.asarray(h, dtype=np.float64))
    if not proj.valid[0]:
        return 0.0
    return float(_pair_overlaps([kp_a], [kp_b], proj, [0], [0])[0])


def overlap_pairs(kps_a, kps_b, h, min_overlap: float = 0.0):
    """All ``(i, j, overlap)`` with overlap > ``min_overlap`` (candidates pruned by distance)."""
    h = np.asarray(h, dtype=np.float64)
    if not kps_a or not kps_b:
        return []
    proj = _project_b(kps_b, h)
    ca = np.array([[k.x, k.y] for k in kps_a])
    ra = max(k.radius for k in kps_a)
    sv = np.linalg.svd(proj.jac, compute_uv=False)[:, 0] if len(kps_b) else np.zeros(0)
    reach = proj.radii * sv
    tree = cKDTree(ca)
    ia, ib = [], []
    for j in np.flatnonzero(proj.valid):
        for i in tree.query_ball_point(proj.centers[j], ra + reach[j]):
            ia.append(i)
            ib.append(j)
    ov = _pair_overlaps(kps_a, kps_b, proj, ia, ib)
    return [(i, j, float(o)) for i, j, o in zip(ia, ib, ov) if o > min_overlap]


# -- repeatability -------------------------------------------------------------


def _in_bounds(pts, shape):
    if shape is None:
        return np.ones(len(pts), dtype=bool)
    hh, ww = shape[:2]
    return (np.isfinite(pts).all(axis=1) & (pts[:, 0] >= 0) & (pts[:, 0] <= ww - 1)
            & (pts[:, 1] >= 0) & (pts[:, 1] <= hh - 1))


def shared_view(kps_a, kps_b, h, shape_a=None, shape_b=None):
    """Boolean masks of keypoints whose projected center lands inside the other image."""
    h = np.asarray(h, dtype=np.float64)
    pa = np.array([[k.x, k.y] for k in kps_a], dtype=np.float64).reshape(-1, 2)
    pb = np.array([[k.x, k.y] for k in kps_b], dtype=np.float64).reshape(-1, 2)
    ma = _in_bounds(apply_homography(h, pa), shape_b) if len(pa) else np.zeros(0, bool)
    mb = (_in_bounds(apply_homography(np.linalg.inv(h), pb), shape_a) if len(pb)
          else np.zeros(0, bool))
    return ma, mb


def greedy_match(pairs):
    """One-to-one matching taking pairs in descending overlap order."""
    used_a, used_b, out = set(), set(), []
    for i, j, o in sorted(pairs, key=lambda p: (-p[2], p[0], p[1])):
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j, o))
    return out


def repeatability(kps_a, kps_b, h, shape_a=None, shape_b=None,
                  threshold: float = OVERLAP_THRESHOLD, sequence: str = "", pair=(0, 1),
                  ) -> RepeatabilityResult:
    """Correspondences (overlap > threshold) over the smaller shared-view count.

    Repeatability is ``None`` when either image has no keypoints in the
    shared view.
    """
    ma, mb = shared_view(kps_a, kps_b, h, shape_a, shape_b)
    ia = np.flatnonzero(ma)
    ib = np.flatnonzero(mb)
    sub_a = [kps_a[i] for i in ia]
    sub_b = [kps_b[j] for j in ib]
    cand = [(int(ia[i]), int(ib[j]), o) for i, j, o in overlap_pairs(sub_a, sub_b, h, threshold)]
    matched = greedy_match(cand)
    denom = min(len(ia), len(ib))
    rep = len(matched) / denom if denom else None
    return RepeatabilityResult(sequence, tuple(pair), max(len(kps_a), len(kps_b)), len(matched),
                               len(ia), len(ib), rep, matched)


# -- descriptor and matching score ---------------------------------------------


def simple_descriptors(image, keypoints, cells: int = 4, bins: int = 8, samples: int = 4):
    """Gradient-orientation histograms over each keypoint's support square.

    ``cells x cells`` spatial cells with ``bins`` orientation bins each (128
    values by default), L2-normalized, clipped at 0.2 and renormalized.
    Returns ``(descriptors, low_texture)``; textureless supports give an
    all-zero descriptor and ``low_texture=True``.
    """
    img = np.asarray(image, dtype=np.float64)
    n = len(keypoints)
    dim = cells * cells * bins
    out = np.zeros((n, dim))
    low = np.zeros(n, dtype=bool)
    side = cells * samples
    u = (np.arange(side) + 0.5) / side * 2 - 1     # in (-1, 1)
    gx_, gy_ = np.meshgrid(u, u)
    cell_idx = (np.arange(side) // samples)
    cy, cx = np.meshgrid(cell_idx, cell_idx, indexing="ij")
    spatial = (cy * cells + cx).ravel()
    weight = np.exp(-(gx_**2 + gy_**2) / (2 * 0.5**2)).ravel()
    for i, kp in enumerate(keypoints):
        xs = kp.x + kp.radius * gx_
        ys = kp.y + kp.radius * gy_
        dx = bilinear_sample(img, xs + 1, ys) - bilinear_sample(img, xs - 1, ys)
        dy = bilinear_sample(img, xs, ys + 1) - bilinear_sample(img, xs, ys - 1)
        mag = np.hypot(dx, dy).ravel() * weight
        ori = np.mod(np.arctan2(dy, dx).ravel(), 2 * np.pi) / (2 * np.pi) * bins
        b0 = np.floor(ori).astype(np.intp) % bins
        frac = ori - np.floor(ori)
        hist = np.zeros((cells * cells, bins))
        np.add.at(hist, (spatial, b0), mag * (1 - frac))
        np.add.at(hist, (spatial, (b0 + 1) % bins), mag * frac)
        v = hist.ravel()
        norm = np.linalg.norm(v)
        if norm < 1e-10:
            low[i] = True
            continue
        v = np.minimum(v / norm, 0.2)
        out[i] = v / np.linalg.norm(v)
    return out, low


def simple_descriptor(image, kp: Keypoint) -> np.ndarray:
    return simple_descriptors(image, [kp])[0][0]


def mutual_nearest_neighbors(da, db, valid_a=None, valid_b=None):
    """Index pairs ``(i, j)`` that are each other's nearest neighbor in L2."""
    da = np.asarray(da, dtype=np.float64)
    db = np.asarray(db, dtype=np.float64)
    va = np.ones(len(da), bool) if valid_a is None else np.asarray(valid_a)
    vb = np.ones(len(db), bool) if valid_b is None else np.asarray(valid_b)
    ia, ib = np.flatnonzero(va), np.flatnonzero(vb)
    if len(ia) == 0 or len(ib) == 0:
        return []
    d2 = ((da[ia, None, :] - db[None, ib, :]) ** 2).sum(-1)
    ab = d2.argmin(axis=1)
    ba = d2.argmin(axis=0)
    return [(int(ia[i]), int(ib[j])) for i, j in enumerate(ab) if ba[j] == i]


def matching_score(image_a, image_b, kps_a, kps_b, h, threshold: float = OVERLAP_THRESHOLD,
                   descriptors=None, sequence: str = "", pair=(0, 1)) -> MatchingResult:
    """Fraction of extracted points whose mutual-NN match is a geometric correspondence.

    ``descriptors`` optionally supplies ``(desc_a, desc_b)`` in place of the
    built-in gradient-histogram descriptor.
    """
    if descriptors is None:
        da, la = simple_descriptors(image_a, kps_a)
        db, lb = simple_descriptors(image_b, kps_b)
    else:
        da, db = descriptors
        la = np.zeros(len(kps_a), bool)
        lb = np.zeros(len(kps_b), bool)
    ma, mb = shared_view(kps_a, kps_b, h, np.shape(image_a), np.shape(image_b))
    matches = mutual_nearest_neighbors(da, db, ~la, ~lb)
    h = np.asarray(h, dtype=np.float64)
    correct = []
    for i, j in matches:
        if not (ma[i] and mb[j]):
            continue
        o = region_overlap(kps_a[i], kps_b[j], h)
        if o > threshold:
            correct.append((i, j, o))
    extracted = min(len(kps_a), len(kps_b))
    score = len(correct) / extracted if extracted else None
    return MatchingResult(sequence, tuple(pair), len(correct), extracted, score, correct)


# -- reporting -----------------------------------------------------------------


def mean_std(values):
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def aggregate_report(rows, value_keys=("repeatability", "matching_score")):
    """Summarize per-pair rows into per-(method, dataset, k) mean +- std over runs.

    Each row is a dict with ``method``, ``dataset``, ``k``, ``run`` and
    value columns.  Pairs are first averaged within a run, then mean and
    population std are taken across runs.
    """
    per_run = defaultdict(list)
    for r in rows:
        for key in value_keys:
            val = r.get(key)
            if val is None:
                continue
            per_run[(r.get("method", ""), r["dataset"], int(r["k"]), key, r.get("run", 0))].append(val)
    runs = defaultdict(list)
    for (method, dataset, k, key, run), vals in sorted(per_run.items(), key=lambda x: str(x[0])):
        runs[(method, dataset, k, key)].append(float(np.mean(vals)))
    summary = []
    for (method, dataset, k, key), vals in sorted(runs.items()):
        m, s = mean_std(vals)
        summary.append({"method": method, "dataset": dataset, "k": k, "metric": key,
                        "runs": len(vals), "mean": m, "std": s})
    return summary


def format_report(summary, ks=(200, 1000)) -> str:
    """Human-readable tables: repeatability per k, then matching score."""
    lines = []
    datasets = sorted({s["dataset"] for s in summary})
    methods = sorted({s["method"] for s in summary})
    index = {(s["method"], s["dataset"], s["k"], s["metric"]): s for s in summary}

    def cell(method, dataset, k, metric):
        s = index.get((method, dataset, k, metric))
        return "-" if s is None else f"{100 * s['mean']:.2f} +- {100 * s['std']:.2f}"

    lines.append("Repeatability % (mean +- std over runs)")
    head = ["method"] + [f"{d} k={k}" for d in datasets for k in ks]
    lines.append(" | ".join(head))
    for m in methods:
        lines.append(" | ".join([m or "-"] + [cell(m, d, k, "repeatability")
                                              for d in datasets for k in ks]))
    if any(s["metric"] == "matching_score" for s in summary):
        lines.append("")
        lines.append("Matching score %")
        lines.append(DESCRIPTOR_BANNER)
        mk = sorted({s["k"] for s in summary if s["metric"] == "matching_score"})
        lines.append(" | ".join(["method"] + [f"{d} k={k}" for d in datasets for k in mk]))
        for m in methods:
            lines.append(" | ".join([m or "-"] + [cell(m, d, k, "matching_score")
                                                  for d in datasets for k in mk]))
    return "\n".join(lines) + "\n"


def summary_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["method", "dataset", "k", "metric", "runs", "mean", "std"],
                       lineterminator="\n")
    w.writeheader()
    for s in summary:
        w.writerow({**s, "mean": repr(s["mean"]), "std": repr(s["std"])})
    return buf.getvalue()
