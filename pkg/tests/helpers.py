"""Independent reference implementations shared by the test modules."""

import math

import numpy as np

from conpatch.denoise import centre_grid
from conpatch.imgcore import extract_patches
from conpatch.patchdb import knn_approx_many, knn_exact_many

# criterion number -> "CRITERION n PASS|FAIL ..." line, filled by test_acceptance
ACCEPTANCE_LINES = {}


def brute_surface(arr, cx, cy, p, scale=1.0, offset=0.0):
    """Similarity weights of one centre, evaluated pixel by pixel."""
    h, w = arr.shape
    r = p.c // 2

    def px(y, x):
        return arr[min(max(y, 0), h - 1), min(max(x, 0), w - 1)]

    out = []
    axis = [-(p.h // 2) + p.m * i for i in range(math.ceil(p.h / p.m))]
    for dy in axis:
        for dx in axis:
            if dy == 0 and dx == 0:
                continue
            ssd = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    t = px(cy + a, cx + b) - px(cy + dy + a, cx + dx + b)
                    ssd += t * t
            d = max(ssd * scale - offset, 0.0)
            out.append(math.exp(-d / (2 * p.sigma**2)))
    return np.array(out)


def content_only_denoise(noisy, db_content, index, params):
    """Plain small-patch pipeline: raw c x c queries, no context anywhere."""
    c = params.context.c
    r = c // 2
    h, w = noisy.shape
    xs, ys = centre_grid(h, w, params.stride)
    q = extract_patches(noisy, xs, ys, c)
    if index is None:
        idx, _ = knn_exact_many(db_content, q, params.k)
    else:
        idx, _ = knn_approx_many(index, q, params.k, params.max_visits)
    nb = db_content.vectors[idx].astype(np.float64)
    diff = nb - q[:, None, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    wts = np.exp(-d2 / (2.0 * params.sigma_v * params.sigma_v))
    wts = wts / wts.sum(axis=1)[:, None]
    est = np.einsum("nk,nkd->nd", wts, nb)
    acc = np.zeros((h + 2 * r, w + 2 * r))
    cov = np.zeros_like(acc)
    for j in range(c * c):
        dy, dx = divmod(j, c)
        acc[ys + dy, xs + dx] += est[:, j]
        cov[ys + dy, xs + dx] += 1.0
    return acc[r : r + h, r : r + w] / cov[r : r + h, r : r + w]
