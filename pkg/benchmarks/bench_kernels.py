#!/usr/bin/env python3
"""Compare the compiled kernels against the numpy fallback.

Each kernel is timed on the same inputs under both backends (best of
``--repeat`` runs) and the outputs are checked for agreement.

    python benchmarks/bench_kernels.py --repeat 3
"""

import argparse
import time

import numpy as np

from conpatch import _backend
from conpatch.context import ContextParams, _weight_terms, window_offsets
from conpatch.patchdb import PatchDatabase, build_index


def best_time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(scale, rng):
    p = ContextParams(sigma=5.0, normalize=True)
    img = rng.random((int(128 * scale), int(128 * scale))) * 255
    pad = p.margin
    padded = np.ascontiguousarray(np.pad(img, pad, mode="edge"))
    n = int(4000 * scale)
    ys = rng.integers(0, img.shape[0], n).astype(np.intp)
    xs = rng.integers(0, img.shape[1], n).astype(np.intp)
    oy, ox = window_offsets(p)
    scale_w, offset = _weight_terms(p)
    ctx_args = (padded, pad, ys, xs, p.c, oy, ox, float(p.sigma), scale_w, offset, p.b)

    db = PatchDatabase((rng.random((int(20000 * scale), 57)) * 255).astype(np.float32), p)
    index = build_index(db)
    q = np.ascontiguousarray(rng.random((int(200 * scale), 57)) * 255)
    tree_args = (db.vectors, index.perm, index.lo, index.hi, index.left, index.right, index.start, index.end,
                 q, 20, 512)

    nimg = rng.random((int(32 * scale), int(32 * scale))) * 255
    npad = 3 + 10
    nlm_args = (np.ascontiguousarray(np.pad(nimg, npad, mode="edge")), npad, nimg.shape[0], nimg.shape[1],
                3, 10, 441, 1 / 49, 2 * 25.0**2, 1 / 100.0)
    return [
        ("context_histograms", lambda k: k.context_histograms(*ctx_args)),
        ("knn_scan", lambda k: k.knn_scan(db.vectors, q, 20)),
        ("kdtree_query", lambda k: k.kdtree_query(*tree_args)),
        ("nlm", lambda k: k.nlm(*nlm_args)),
    ]


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and np.allclose(a, b, rtol=1e-12, atol=1e-9)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=3, help="timing repetitions per kernel")
    parser.add_argument("--scale", type=float, default=1.0, help="problem size multiplier")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if _backend.compiled_kernels is None:
        parser.error("compiled extension not available (build it or unset CONPATCH_PURE_PYTHON)")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20} {'python s':>10} {'cython s':>10} {'speed-up':>9}  agree")
    for name, fn in cases(args.scale, rng):
        t_py, out_py = best_time(lambda: fn(_backend.python_kernels), args.repeat)
        t_cy, out_cy = best_time(lambda: fn(_backend.compiled_kernels), args.repeat)
        print(f"{name:<20} {t_py:>10.4f} {t_cy:>10.4f} {t_py / t_cy:>8.1f}x  {agree(out_py, out_cy)}")


if __name__ == "__main__":
    main()
