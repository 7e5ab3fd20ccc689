"""Brute-force reference implementations the tests compare against.

Each one is written independently of the package code: plain loops,
no shared helpers.
"""

import math

import numpy as np


def conv_oracle(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, h - k + 1, wd - k + 1))
    for a in range(n):
        for f in range(o):
            for i in range(h - k + 1):
                for j in range(wd - k + 1):
                    s = b[f]
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                s += w[f, ch, di, dj] * x[a, ch, i + di, j + dj]
                    out[a, f, i, j] = s
    return out


def maxpool_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, ch, i, j] = max(x[a, ch, 2 * i + di, 2 * j + dj]
                                           for di in (0, 1) for dj in (0, 1))
    return out


def splat_oracle(points, shape):
    h, w = shape
    vm = np.zeros((h, w))
    for x, y in points:
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            continue
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if y0 + dy < h and x0 + dx < w:
                    vm[y0 + dy, x0 + dx] += wx * wy
    return vm


def nms_oracle(values, radius, k):
    """Exhaustive window scan, then sort by (-score, y, x)."""
    h, w = values.shape
    peaks = []
    for y in range(h):
        for x in range(w):
            v = values[y, x]
            if v <= 0:
                continue
            ok = True
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    u = values[yy, xx]
                    if u > v or (u == v and (yy, xx) < (y, x)):
                        ok = False
            if ok:
                peaks.append((-v, y, x))
    peaks.sort()
    return [(y, x) for _, y, x in peaks[:k]]


def overlap_monte_carlo(ca, ra, cb, rb, h, samples=200_000, seed=0):
    """IoU of disc A with the preimage of disc B (mapped through ``h`` from A to B).

    Samples uniformly in a box around disc A and the preimage's support.
    Only sensible when ``h`` is close to a similarity in the sampled area.
    """
    rng = np.random.default_rng(seed)
    hi = np.linalg.inv(h)
    # rough extent of B's preimage
    ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    bd = np.stack([cb[0] + rb * np.cos(ang), cb[1] + rb * np.sin(ang), np.ones_like(ang)])
    pa = hi @ bd
    pa = (pa[:2] / pa[2]).T
    lo = np.minimum(pa.min(axis=0), np.asarray(ca) - ra) - 1
    up = np.maximum(pa.max(axis=0), np.asarray(ca) + ra) + 1
    p = rng.uniform(lo, up, size=(samples, 2))
    in_a = np.sum((p - ca) ** 2, axis=1) <= ra ** 2
    q = np.c_[p, np.ones(samples)] @ h.T
    q = q[:, :2] / q[:, 2:]
    in_b = np.sum((q - cb) ** 2, axis=1) <= rb ** 2
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0
