# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures and semantics mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, ceil
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()

BACKEND = "cython"


cdef inline double _ssd(const double[:, ::1] p, Py_ssize_t ay, Py_ssize_t ax,
                        Py_ssize_t by, Py_ssize_t bx, Py_ssize_t c) noexcept nogil:
    cdef double acc = 0.0, t
    cdef Py_ssize_t r, s
    for r in range(c):
        for s in range(c):
            t = p[ay + r, ax + s] - p[by + r, bx + s]
            acc = acc + t * t
    return acc


cdef inline Py_ssize_t _bin(double w, Py_ssize_t b) noexcept nogil:
    # bin k holds (k/b, (k+1)/b]; edges compared exactly as k/b
    cdef Py_ssize_t k = <Py_ssize_t>ceil(w * b) - 1
    if k < 0:
        k = 0
    if k > b - 1:
        k = b - 1
    while k > 0 and w <= (<double>k) / b:
        k -= 1
    while k < b - 1 and w > (<double>(k + 1)) / b:
        k += 1
    return k


def correlation_weights(const double[:, ::1] padded, Py_ssize_t pad, ys, xs, Py_ssize_t c,
                        off_y, off_x, double sigma, double scale, double offset):
    cdef const Py_ssize_t[::1] cy = np.ascontiguousarray(ys, dtype=np.intp)
    cdef const Py_ssize_t[::1] cx = np.ascontiguousarray(xs, dtype=np.intp)
    cdef const Py_ssize_t[::1] oy = np.ascontiguousarray(off_y, dtype=np.intp)
    cdef const Py_ssize_t[::1] ox = np.ascontiguousarray(off_x, dtype=np.intp)
    cdef Py_ssize_t n = cy.shape[0], n_off = oy.shape[0], i, j, ay, ax
    cdef double denom = 2.0 * sigma * sigma, d
    out = np.empty((n, n_off), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t h = c // 2
    with nogil:
        for i in range(n):
            ay = cy[i] + pad - h
            ax = cx[i] + pad - h
            for j in range(n_off):
                d = _ssd(padded, ay, ax, ay + oy[j], ax + ox[j], c) * scale - offset
                if d < 0.0:
                    d = 0.0
                o[i, j] = exp(-d / denom)
    return out


def bin_weights(weights, Py_ssize_t b):
    cdef const double[:, ::1] w = np.ascontiguousarray(np.atleast_2d(weights), dtype=np.float64)
    cdef Py_ssize_t n = w.shape[0], n_w = w.shape[1], i, j
    out = np.zeros((n, b), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double inv = 1.0 / n_w
    with nogil:
        for i in range(n):
            for j in range(n_w):
                o[i, _bin(w[i, j], b)] += 1.0
            for j in range(b):
                o[i, j] = o[i, j] / n_w
    return out


def context_histograms(const double[:, ::1] padded, Py_ssize_t pad, ys, xs, Py_ssize_t c,
                       off_y, off_x, double sigma, double scale, double offset, Py_ssize_t b):
    cdef const Py_ssize_t[::1] cy = np.ascontiguousarray(ys, dtype=np.intp)
    cdef const Py_ssize_t[::1] cx = np.ascontiguousarray(xs, dtype=np.intp)
    cdef const Py_ssize_t[::1] oy = np.ascontiguousarray(off_y, dtype=np.intp)
    cdef const Py_ssize_t[::1] ox = np.ascontiguousarray(off_x, dtype=np.intp)
    cdef Py_ssize_t n = cy.shape[0], n_off = oy.shape[0], i, j, ay, ax
    cdef double denom = 2.0 * sigma * sigma, d, w
    out = np.zeros((n, b), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t h = c // 2
    with nogil:
        for i in range(n):
            ay = cy[i] + pad - h
            ax = cx[i] + pad - h
            for j in range(n_off):
                d = _ssd(padded, ay, ax, ay + oy[j], ax + ox[j], c) * scale - offset
                if d < 0.0:
                    d = 0.0
                w = exp(-d / denom)
                o[i, _bin(w, b)] += 1.0
            for j in range(b):
                o[i, j] = o[i, j] / n_off
    return out


# --- k-NN --------------------------------------------------------------------

cdef inline double _row_dist(const float[:, ::1] db, Py_ssize_t row,
                             const double[::1] q, Py_ssize_t dim) noexcept nogil:
    cdef double acc = 0.0, t
    cdef Py_ssize_t j
    for j in range(dim):
        t = <double>db[row, j] - q[j]
        acc = acc + t * t
    return acc


cdef inline bint _worse(double da, long long ia, double db_, long long ib) noexcept nogil:
    # (da, ia) > (db_, ib) lexicographically
    return da > db_ or (da == db_ and ia > ib)


cdef void _res_sift_down(double* d, long long* ix, Py_ssize_t n, Py_ssize_t pos) noexcept nogil:
    # max-heap on (dist, idx)
    cdef Py_ssize_t child
    cdef double td
    cdef long long ti
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        if child + 1 < n and _worse(d[child + 1], ix[child + 1], d[child], ix[child]):
            child += 1
        if _worse(d[child], ix[child], d[pos], ix[pos]):
            td = d[pos]; d[pos] = d[child]; d[child] = td
            ti = ix[pos]; ix[pos] = ix[child]; ix[child] = ti
            pos = child
        else:
            break


cdef void _res_sift_up(double* d, long long* ix, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t parent
    cdef double td
    cdef long long ti
    while pos > 0:
        parent = (pos - 1) // 2
        if _worse(d[pos], ix[pos], d[parent], ix[parent]):
            td = d[pos]; d[pos] = d[parent]; d[parent] = td
            ti = ix[pos]; ix[pos] = ix[parent]; ix[parent] = ti
            pos = parent
        else:
            break


cdef inline void _res_offer(double* d, long long* ix, Py_ssize_t* size, Py_ssize_t k,
                            double dist, long long idx) noexcept nogil:
    if size[0] < k:
        d[size[0]] = dist
        ix[size[0]] = idx
        _res_sift_up(d, ix, size[0])
        size[0] += 1
    elif _worse(d[0], ix[0], dist, idx):
        d[0] = dist
        ix[0] = idx
        _res_sift_down(d, ix, k, 0)


cdef void _res_sorted(double* d, long long* ix, Py_ssize_t size,
                      double[:, ::1] od, long long[:, ::1] oi, Py_ssize_t row) noexcept nogil:
    # heap-sort the max-heap in place, ascending
    cdef Py_ssize_t n = size, j
    cdef double td
    cdef long long ti
    while n > 1:
        td = d[0]; d[0] = d[n - 1]; d[n - 1] = td
        ti = ix[0]; ix[0] = ix[n - 1]; ix[n - 1] = ti
        n -= 1
        _res_sift_down(d, ix, n, 0)
    for j in range(size):
        od[row, j] = d[j]
        oi[row, j] = ix[j]


def knn_scan(const float[:, ::1] db, const double[:, ::1] queries, Py_ssize_t k):
    cdef Py_ssize_t n = db.shape[0], dim = db.shape[1], nq = queries.shape[0]
    cdef Py_ssize_t qi, r, size
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_dist = np.empty((nq, k), dtype=np.float64)
    cdef long long[:, ::1] oi = out_idx
    cdef double[:, ::1] od = out_dist
    cdef double* hd = <double*>malloc(k * sizeof(double))
    cdef long long* hi = <long long*>malloc(k * sizeof(long long))
    cdef double dist
    if hd == NULL or hi == NULL:
        free(hd); free(hi)
        raise MemoryError()
    try:
        with nogil:
            for qi in range(nq):
                size = 0
                for r in range(n):
                    dist = _row_dist(db, r, queries[qi], dim)
                    if size < k or not _worse(dist, r, hd[0], hi[0]):
                        _res_offer(hd, hi, &size, k, dist, r)
                _res_sorted(hd, hi, size, od, oi, qi)
    finally:
        free(hd)
        free(hi)
    return out_idx, out_dist


cdef inline double _box_dist(const double[:, ::1] lo, const double[:, ::1] hi_, Py_ssize_t node,
                             const double[::1] q, Py_ssize_t dim) noexcept nogil:
    cdef double acc = 0.0, t, v
    cdef Py_ssize_t j
    for j in range(dim):
        v = q[j]
        if v < lo[node, j]:
            t = lo[node, j] - v
            acc = acc + t * t
        elif v > hi_[node, j]:
            t = v - hi_[node, j]
            acc = acc + t * t
    return acc


cdef inline bint _pq_less(double ba, long long na, double bb, long long nb) noexcept nogil:
    return ba < bb or (ba == bb and na < nb)


cdef void _pq_push(double* b, long long* nd, Py_ssize_t* size, double bound, long long node) noexcept nogil:
    cdef Py_ssize_t pos = size[0], parent
    b[pos] = bound
    nd[pos] = node
    size[0] += 1
    while pos > 0:
        parent = (pos - 1) // 2
        if _pq_less(b[pos], nd[pos], b[parent], nd[parent]):
            b[pos], b[parent] = b[parent], b[pos]
            nd[pos], nd[parent] = nd[parent], nd[pos]
            pos = parent
        else:
            break


cdef void _pq_pop(double* b, long long* nd, Py_ssize_t* size) noexcept nogil:
    cdef Py_ssize_t n, pos = 0, child
    size[0] -= 1
    n = size[0]
    b[0] = b[n]
    nd[0] = nd[n]
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        if child + 1 < n and _pq_less(b[child + 1], nd[child + 1], b[child], nd[child]):
            child += 1
        if _pq_less(b[child], nd[child], b[pos], nd[pos]):
            b[pos], b[child] = b[child], b[pos]
            nd[pos], nd[child] = nd[child], nd[pos]
            pos = child
        else:
            break


def kdtree_query(const float[:, ::1] db, const long long[::1] perm,
                 const double[:, ::1] lo, const double[:, ::1] hi,
                 const long long[::1] left, const long long[::1] right,
                 const long long[::1] start, const long long[::1] end,
                 const double[:, ::1] queries, Py_ssize_t k, long long max_visits):
    cdef Py_ssize_t dim = db.shape[1], nq = queries.shape[0], n_nodes = left.shape[0]
    cdef Py_ssize_t qi, size, pq_size, p
    cdef long long node, visits, lc, rc, row
    cdef double bound, lb, rb, dist
    out_idx = np.full((nq, k), -1, dtype=np.int64)
    out_dist = np.full((nq, k), np.inf, dtype=np.float64)
    cdef long long[:, ::1] oi = out_idx
    cdef double[:, ::1] od = out_dist
    cdef double* hd = <double*>malloc(k * sizeof(double))
    cdef long long* hx = <long long*>malloc(k * sizeof(long long))
    cdef double* pb = <double*>malloc((n_nodes + 1) * sizeof(double))
    cdef long long* pn = <long long*>malloc((n_nodes + 1) * sizeof(long long))
    if hd == NULL or hx == NULL or pb == NULL or pn == NULL:
        free(hd); free(hx); free(pb); free(pn)
        raise MemoryError()
    try:
        with nogil:
            for qi in range(nq):
                size = 0
                pq_size = 0
                visits = 0
                _pq_push(pb, pn, &pq_size, _box_dist(lo, hi, 0, queries[qi], dim), 0)
                while pq_size > 0:
                    bound = pb[0]
                    node = pn[0]
                    _pq_pop(pb, pn, &pq_size)
                    if size == k and bound > hd[0]:
                        break
                    if visits >= max_visits:
                        break
                    visits += 1
                    while left[node] >= 0:
                        lc = left[node]
                        rc = right[node]
                        lb = _box_dist(lo, hi, lc, queries[qi], dim)
                        rb = _box_dist(lo, hi, rc, queries[qi], dim)
                        if rb < lb:
                            lc, rc = rc, lc
                            lb, rb = rb, lb
                        if size < k or rb <= hd[0]:
                            _pq_push(pb, pn, &pq_size, rb, rc)
                        if size == k and lb > hd[0]:
                            node = -1
                            break
                        node = lc
                    if node < 0:
                        continue
                    for p in range(start[node], end[node]):
                        row = perm[p]
                        dist = _row_dist(db, row, queries[qi], dim)
                        if size < k or _worse(hd[0], hx[0], dist, row):
                            _res_offer(hd, hx, &size, k, dist, row)
                _res_sorted(hd, hx, size, od, oi, qi)
    finally:
        free(hd); free(hx); free(pb); free(pn)
    return out_idx, out_dist


# --- non-local means ---------------------------------------------------------

cdef struct _Cand:
    double d
    Py_ssize_t i


cdef int _cand_cmp(const void* a, const void* b) noexcept nogil:
    cdef const _Cand* x = <const _Cand*>a
    cdef const _Cand* y = <const _Cand*>b
    if x.d < y.d:
        return -1
    if x.d > y.d:
        return 1
    if x.i < y.i:
        return -1
    if x.i > y.i:
        return 1
    return 0


def nlm(const double[:, ::1] padded, Py_ssize_t pad, Py_ssize_t height, Py_ssize_t width,
        Py_ssize_t patch_r, Py_ssize_t win_r, Py_ssize_t k, double inv_n, double offset, double inv_h2):
    cdef Py_ssize_t side = 2 * win_r + 1, n_cand = side * side, ps = 2 * patch_r + 1
    cdef Py_ssize_t y, x, dy, dx, ci, ay, ax
    cdef double num, den, w, t
    if k > n_cand:
        k = n_cand
    out = np.empty((height, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef _Cand* cand = <_Cand*>malloc(n_cand * sizeof(_Cand))
    cdef double* dist = <double*>malloc(n_cand * sizeof(double))
    cdef char* keep = <char*>malloc(n_cand * sizeof(char))
    if cand == NULL or dist == NULL or keep == NULL:
        free(cand); free(dist); free(keep)
        raise MemoryError()
    try:
        with nogil:
            for y in range(height):
                for x in range(width):
                    ay = y + pad - patch_r
                    ax = x + pad - patch_r
                    ci = 0
                    for dy in range(-win_r, win_r + 1):
                        for dx in range(-win_r, win_r + 1):
                            dist[ci] = _ssd(padded, ay, ax, ay + dy, ax + dx, ps)
                            ci += 1
                    if k < n_cand:
                        for ci in range(n_cand):
                            cand[ci].d = dist[ci]
                            cand[ci].i = ci
                            keep[ci] = 0
                        qsort(cand, n_cand, sizeof(_Cand), _cand_cmp)
                        for ci in range(k):
                            keep[cand[ci].i] = 1
                    else:
                        for ci in range(n_cand):
                            keep[ci] = 1
                    num = 0.0
                    den = 0.0
                    ci = 0
                    for dy in range(-win_r, win_r + 1):
                        for dx in range(-win_r, win_r + 1):
                            if keep[ci]:
                                t = dist[ci] * inv_n - offset
                                if t < 0.0:
                                    t = 0.0
                                w = exp(-t * inv_h2)
                                num = num + w * padded[y + pad + dy, x + pad + dx]
                                den = den + w
                            ci += 1
                    o[y, x] = num / den
    finally:
        free(cand); free(dist); free(keep)
    return out
