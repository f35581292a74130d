"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. Squared distances are accumulated sequentially in
raster/dimension order in both, so the two backends agree bit for bit on
distances; only ``exp`` may differ in the last ulp.
"""

import heapq

import numpy as np

BACKEND = "python"


def correlation_weights(padded, pad, ys, xs, c, off_y, off_x, sigma, scale, offset):
    """Similarity weights between each centre patch and its offset patches.

    For centre ``i`` and offset ``j`` the squared patch distance ``d`` is
    ``scale * SSD - offset`` clamped at zero, and the weight is
    ``exp(-d / (2 sigma^2))``. ``ys``/``xs`` are image coordinates; the
    padded array carries ``pad`` replicated pixels on every side.
    """
    ys = np.asarray(ys, dtype=np.intp) + pad - c // 2
    xs = np.asarray(xs, dtype=np.intp) + pad - c // 2
    n = ys.shape[0]
    n_off = len(off_y)
    out = np.empty((n, n_off), dtype=np.float64)
    denom = 2.0 * sigma * sigma
    for j in range(n_off):
        dy = int(off_y[j])
        dx = int(off_x[j])
        acc = np.zeros(n, dtype=np.float64)
        for r in range(c):
            for s in range(c):
                t = padded[ys + r, xs + s] - padded[ys + r + dy, xs + s + dx]
                acc += t * t
        d = acc * scale - offset
        np.maximum(d, 0.0, out=d)
        out[:, j] = np.exp(-d / denom)
    return out


def bin_index(weights, b):
    """Bin of each weight: bin k (0-based) holds ``(k/b, (k+1)/b]``; 0 goes to bin 0."""
    edges = np.arange(1, b, dtype=np.float64) / b
    return np.searchsorted(edges, weights, side="left")


def bin_weights(weights, b):
    weights = np.atleast_2d(weights)
    n, n_w = weights.shape
    idx = bin_index(weights, b)
    flat = (np.arange(n)[:, None] * b + idx).ravel()
    counts = np.bincount(flat, minlength=n * b).reshape(n, b).astype(np.float64)
    return counts / n_w


def context_histograms(padded, pad, ys, xs, c, off_y, off_x, sigma, scale, offset, b):
    w = correlation_weights(padded, pad, ys, xs, c, off_y, off_x, sigma, scale, offset)
    return bin_weights(w, b)


def _row_sqdist(rows, q):
    # Sequential accumulation over dimensions (matches the compiled loop).
    acc = np.zeros(rows.shape[0], dtype=np.float64)
    for j in range(rows.shape[1]):
        t = rows[:, j].astype(np.float64) - q[j]
        acc += t * t
    return acc


def knn_scan(db, queries, k):
    """Exact k-NN by full scan; ties go to the lower row index."""
    nq = queries.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    dist = np.empty((nq, k), dtype=np.float64)
    for i in range(nq):
        d = _row_sqdist(db, queries[i])
        order = np.argsort(d, kind="stable")[:k]
        idx[i] = order
        dist[i] = d[order]
    return idx, dist


def _box_dist(lo, hi, q):
    acc = 0.0
    for j in range(len(q)):
        v = q[j]
        if v < lo[j]:
            t = lo[j] - v
            acc += t * t
        elif v > hi[j]:
            t = v - hi[j]
            acc += t * t
    return acc


def kdtree_query(db, perm, lo, hi, left, right, start, end, queries, k, max_visits):
    """Best-first kd-tree search bounded by ``max_visits`` node expansions.

    Each expansion pops the queued node with the smallest bounding-box
    distance and descends from it to a leaf, queueing the farther child at
    every split; the leaf bucket is then scanned. A node is pruned only when its bound is strictly larger than
    the current k-th distance, so an unbounded search is exact including
    tie-breaking by lower row index.
    """
    nq = queries.shape[0]
    out_idx = np.full((nq, k), -1, dtype=np.int64)
    out_dist = np.full((nq, k), np.inf, dtype=np.float64)
    lo_l = lo.tolist()
    hi_l = hi.tolist()
    for qi in range(nq):
        q = queries[qi]
        ql = q.tolist()
        # result: max-heap of (-dist, -idx)
        best = []
        frontier = [(_box_dist(lo_l[0], hi_l[0], ql), 0)]
        visits = 0
        while frontier:
            bound, node = heapq.heappop(frontier)
            if len(best) == k and bound > -best[0][0]:
                break
            if visits >= max_visits:
                break
            visits += 1
            # descend to a leaf, queueing the farther child at every split
            while left[node] >= 0:
                lc, rc = int(left[node]), int(right[node])
                lb = _box_dist(lo_l[lc], hi_l[lc], ql)
                rb = _box_dist(lo_l[rc], hi_l[rc], ql)
                if rb < lb:
                    lc, rc, lb, rb = rc, lc, rb, lb
                if len(best) < k or rb <= -best[0][0]:
                    heapq.heappush(frontier, (rb, rc))
                if len(best) == k and lb > -best[0][0]:
                    node = -1
                    break
                node = lc
            if node < 0:
                continue
            rows = perm[start[node] : end[node]]
            d = _row_sqdist(db[rows], q)
            for dv, ri in zip(d.tolist(), rows.tolist()):
                if len(best) < k:
                    heapq.heappush(best, (-dv, -ri))
                elif (dv, ri) < (-best[0][0], -best[0][1]):
                    heapq.heapreplace(best, (-dv, -ri))
        res = sorted((-nd, -ni) for nd, ni in best)
        for j, (dv, ri) in enumerate(res):
            out_dist[qi, j] = dv
            out_idx[qi, j] = ri
    return out_idx, out_dist


def nlm(padded, pad, height, width, patch_r, win_r, k, inv_n, offset, inv_h2):
    """Pixel-wise non-local means restricted to a square search window.

    Candidate weights are ``exp(-max(d2 * inv_n - offset, 0) * inv_h2)``
    where ``d2`` is the squared distance between the two patches. Only the
    ``k`` candidates with the smallest ``d2`` (ties: raster order) take part.
    """
    side = 2 * win_r + 1
    n_cand = side * side
    k = min(k, n_cand)
    out = np.empty((height, width), dtype=np.float64)
    base_y = pad - patch_r
    base_x = pad - patch_r
    ps = 2 * patch_r + 1
    chunk = max(1, int(2_000_000 // max(1, n_cand * width)))
    for r0 in range(0, height, chunk):
        r1 = min(height, r0 + chunk)
        rows = r1 - r0
        dists = np.empty((n_cand, rows, width), dtype=np.float64)
        vals = np.empty((n_cand, rows, width), dtype=np.float64)
        ci = 0
        for dy in range(-win_r, win_r + 1):
            for dx in range(-win_r, win_r + 1):
                acc = np.zeros((rows, width), dtype=np.float64)
                for r in range(ps):
                    for s in range(ps):
                        a = padded[base_y + r0 + r : base_y + r1 + r, base_x + s : base_x + s + width]
                        bq = padded[
                            base_y + r0 + r + dy : base_y + r1 + r + dy,
                            base_x + s + dx : base_x + s + dx + width,
                        ]
                        t = a - bq
                        acc += t * t
                dists[ci] = acc
                vals[ci] = padded[pad + r0 + dy : pad + r1 + dy, pad + dx : pad + dx + width]
                ci += 1
        w = np.exp(-np.maximum(dists * inv_n - offset, 0.0) * inv_h2)
        if k < n_cand:
            order = np.argsort(dists, axis=0, kind="stable")
            keep = np.zeros_like(dists, dtype=bool)
            np.put_along_axis(keep, order[:k], True, axis=0)
            w = np.where(keep, w, 0.0)
        num = np.zeros((rows, width))
        den = np.zeros((rows, width))
        for ci in range(n_cand):
            num += w[ci] * vals[ci]
            den += w[ci]
        out[r0:r1] = num / den
    return out
