"""External patch denoising, the internal NLM baseline and the matching benchmark.

External denoising retrieves, for every noisy patch on a stride grid, its
``k`` nearest database con-patches and replaces the patch by their weighted
average

    x_hat = sum_j w_j x_j / sum_j w_j,   w_j = exp(-|y - x_j|^2 / (2 sigma_v^2)),

where the weights use the ``c x c`` content only. The context feature acts
in the retrieval stage alone. Overlapping estimates are averaged per pixel.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import kernels
from .context import ContextParams, _weight_terms, alpha_from_sqrt, con_patch_vectors, feature_gain, window_offsets
from .imgcore import Image, pixels, rng_from_seed
from .patchdb import KnnIndex, PatchDatabase, knn_approx_many, knn_exact_many

# (upper noise bound, sqrt(alpha)): first band whose bound exceeds sigma_v wins.
SQRT_ALPHA_SCHEDULE = ((50.0, 0.9), (100.0, 1.1), (math.inf, 1.3))
DATABASE_SIGMA = 5.0


def sqrt_alpha_schedule(sigma_v: float) -> float:
    """Default context gain for a noise level."""
    for bound, value in SQRT_ALPHA_SCHEDULE:
        if sigma_v < bound:
            return value
    return SQRT_ALPHA_SCHEDULE[-1][1]


def database_context(**changes) -> ContextParams:
    """Context settings for clean database images (per-pixel weights, sigma 5)."""
    base = ContextParams(sigma=DATABASE_SIGMA, h=21, b=8, m=4, c=7, normalize=True)
    return base.with_(**changes) if changes else base


@dataclass(frozen=True)
class DenoiseParams:
    """Parameters of the external denoiser.

    Attributes
    ----------
    sigma_v : float
        Noise standard deviation of the input.
    k : int
        Neighbours per patch.
    stride : int
        Step of the patch-centre grid; must not exceed the patch side.
    context : ContextParams
        Database-side context settings. The query side reuses them with
        ``sigma = sigma_v`` and the noise energy subtracted.
    sqrt_alpha : float or None
        Context gain in pipeline units; None picks the noise-level schedule.
    use_context : bool
        False forces a zero gain (plain small-patch retrieval).
    exact : bool
        Use the exact scan instead of the kd-tree.
    max_visits : int or None
        kd-tree expansion budget; None keeps the index default.
    """

    sigma_v: float
    k: int = 500
    stride: int = 1
    context: ContextParams = field(default_factory=database_context)
    sqrt_alpha: float | None = None
    use_context: bool = True
    exact: bool = False
    max_visits: int | None = None

    def __post_init__(self):
        if not self.sigma_v > 0:
            raise ValueError(f"sigma_v must be > 0, got {self.sigma_v}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 1 <= self.stride <= self.context.c:
            raise ValueError(f"stride must lie in [1, {self.context.c}], got {self.stride}")
        if self.sqrt_alpha is not None and not self.sqrt_alpha >= 0:
            raise ValueError(f"sqrt_alpha must be >= 0, got {self.sqrt_alpha}")

    @property
    def effective_sqrt_alpha(self) -> float:
        if not self.use_context:
            return 0.0
        if self.sqrt_alpha is None:
            return sqrt_alpha_schedule(self.sigma_v)
        return float(self.sqrt_alpha)

    @property
    def alpha(self) -> float:
        """Gain baked into the con-patch vectors (``ContextParams.alpha``)."""
        return alpha_from_sqrt(self.effective_sqrt_alpha)

    @property
    def query_context(self) -> ContextParams:
        return self.context.with_(sigma=self.sigma_v, noise_sigma=self.sigma_v, alpha=self.alpha)

    @property
    def database_context(self) -> ContextParams:
        return self.context.with_(alpha=self.alpha)

    def with_(self, **changes) -> "DenoiseParams":
        return replace(self, **changes)


# --- patch averaging ----------------------------------------------------------------


def patch_weights(noisy_content, neighbors, sigma_v: float) -> np.ndarray:
    """Normalised averaging weights of ``neighbors`` (rows) for one noisy patch.

    If every weight underflows to zero the nearest neighbour gets weight 1.
    """
    y = np.asarray(noisy_content, dtype=np.float64).ravel()
    nb = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    w = _weights(y[None, :], nb[None, :, :], sigma_v)[0]
    return w


def _weights(y: np.ndarray, nb: np.ndarray, sigma_v: float) -> np.ndarray:
    # y: (n, d) noisy patches; nb: (n, k, d) neighbours
    diff = nb - y[:, None, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    w = np.exp(-d2 / (2.0 * sigma_v * sigma_v))
    total = w.sum(axis=1)
    dead = total == 0
    if np.any(dead):
        w[dead] = 0.0
        w[dead, np.argmin(d2[dead], axis=1)] = 1.0
        total[dead] = 1.0
    return w / total[:, None]


def denoise_patch(noisy_content, neighbors, sigma_v: float) -> np.ndarray:
    """Weighted average of clean neighbours for one noisy patch."""
    nb = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if nb.shape[0] == 0 or nb.size == 0:
        raise ValueError("denoise_patch needs at least one neighbour")
    y = np.asarray(noisy_content, dtype=np.float64).ravel()
    if nb.shape[1] != y.shape[0]:
        raise ValueError(f"neighbour length {nb.shape[1]} differs from patch length {y.shape[0]}")
    if not sigma_v > 0:
        raise ValueError(f"sigma_v must be > 0, got {sigma_v}")
    w = patch_weights(y, nb, sigma_v)
    return w @ nb


# --- external denoising ---------------------------------------------------------


def centre_grid(height: int, width: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch centres ``(xs, ys)`` every ``stride`` pixels, last row and column included."""
    gy = np.unique(np.r_[np.arange(0, height, stride), height - 1])
    gx = np.unique(np.r_[np.arange(0, width, stride), width - 1])
    yy, xx = np.meshgrid(gy, gx, indexing="ij")
    return xx.ravel(), yy.ravel()


def prepare_search(db: PatchDatabase, params: DenoiseParams, leaf_size: int = 32):
    """Database rescaled to the run's gain plus a kd-tree over it (None if exact)."""
    from .patchdb import build_index

    tuned = db.with_alpha(params.alpha)
    index = None if params.exact else build_index(tuned, leaf_size)
    return tuned, index


def _check_db(db: PatchDatabase, params: DenoiseParams) -> None:
    p, q = db.params, params.context
    for name in ("c", "h", "b", "m", "normalize"):
        if getattr(p, name) != getattr(q, name):
            raise ValueError(
                f"database {name}={getattr(p, name)} does not match parameters {name}={getattr(q, name)}"
            )
    if not math.isclose(p.alpha, params.alpha, rel_tol=1e-6, abs_tol=0.0):
        raise ValueError(
            f"database gain alpha={p.alpha:g} differs from the run's alpha={params.alpha:g}; "
            "rescale it with PatchDatabase.with_alpha"
        )


def search(db: PatchDatabase, index: KnnIndex | None, queries: np.ndarray, params: DenoiseParams):
    if params.exact or index is None:
        return knn_exact_many(db, queries, params.k)
    if index.db is not db:
        raise ValueError("index was built over a different database object")
    return knn_approx_many(index, queries, params.k, params.max_visits)


def denoise_image(noisy, db: PatchDatabase, index: KnnIndex | None, params: DenoiseParams,
                  chunk: int = 2048, trace: dict | None = None) -> Image:
    """Denoise an image with k-NN averaging over an external database.

    ``index`` may be None when ``params.exact`` is set. ``trace``, if
    given, receives the neighbour indices and averaging weights of every
    grid patch (used to inspect the two stages separately).
    """
    arr = pixels(noisy)
    _check_db(db, params)
    c = params.context.c
    r = c // 2
    height, width = arr.shape
    xs, ys = centre_grid(height, width, params.stride)
    qctx = params.query_context
    acc = np.zeros((height + 2 * r, width + 2 * r))
    cov = np.zeros_like(acc)
    content = db.content
    all_idx, all_w = [], []
    for s in range(0, xs.shape[0], chunk):
        cx = xs[s : s + chunk]
        cy = ys[s : s + chunk]
        queries = con_patch_vectors(arr, cx, cy, qctx)
        idx, _ = search(db, index, queries, params)
        nb = content[idx].astype(np.float64)
        w = _weights(queries[:, : c * c], nb, params.sigma_v)
        est = np.einsum("nk,nkd->nd", w, nb)
        # centres are distinct, so every offset writes distinct pixels
        for j in range(c * c):
            dy, dx = divmod(j, c)
            acc[cy + dy, cx + dx] += est[:, j]
            cov[cy + dy, cx + dx] += 1.0
        if trace is not None:
            all_idx.append(idx)
            all_w.append(w)
    if trace is not None:
        trace["indices"] = np.concatenate(all_idx)
        trace["weights"] = np.concatenate(all_w)
        trace["centres"] = (xs, ys)
    out = acc[r : r + height, r : r + width] / cov[r : r + height, r : r + width]
    return Image(out)


# --- internal NLM ---------------------------------------------------------------


def internal_nlm(noisy, window: int = 21, patch_side: int = 7, sigma_v: float = 25.0,
                 k: int | None = None, h: float | None = None, literal: bool = False) -> Image:
    """Pixel-wise non-local means inside a ``window x window`` search area.

    With ``literal=True`` the candidates are weighted exactly like the
    external averaging, ``exp(-d2 / (2 sigma_v^2))`` on the full patch
    distance ``d2``. The default is the common tuned form
    ``exp(-max(d2 / n - 2 sigma_v^2, 0) / h^2)`` with ``n = patch_side^2``
    and ``h = 0.4 sigma_v``. Only the ``k`` closest candidates (all by
    default) contribute.
    """
    arr = pixels(noisy)
    if window < 1 or window % 2 == 0 or patch_side < 1 or patch_side % 2 == 0:
        raise ValueError("window and patch_side must be odd and positive")
    if window < patch_side:
        raise ValueError(f"window {window} is smaller than patch_side {patch_side}")
    if not sigma_v > 0:
        raise ValueError(f"sigma_v must be > 0, got {sigma_v}")
    n_cand = window * window
    k = n_cand if k is None else int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pr, wr = patch_side // 2, window // 2
    if literal:
        inv_n, offset, inv_h2 = 1.0, 0.0, 1.0 / (2.0 * sigma_v * sigma_v)
    else:
        hh = 0.4 * sigma_v if h is None else float(h)
        if not hh > 0:
            raise ValueError(f"filter parameter h must be > 0, got {hh}")
        inv_n, offset, inv_h2 = 1.0 / (patch_side * patch_side), 2.0 * sigma_v * sigma_v, 1.0 / (hh * hh)
    pad = pr + wr
    padded = np.ascontiguousarray(np.pad(arr, pad, mode="edge"))
    height, width = arr.shape
    out = kernels.nlm(padded, pad, height, width, pr, wr, min(k, n_cand), inv_n, offset, inv_h2)
    return Image(np.asarray(out))


# --- matching-quality benchmark ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class MatchingReport:
    """Per-query clean-domain matching errors of four search strategies."""

    e_gt: np.ndarray
    e_small: np.ndarray
    e_large: np.ndarray
    e_con: np.ndarray
    c: int
    h_large: int
    k: int
    sigma_v: float

    COLUMNS = ("query", "E_GT", "E_small", "E_large", "E_con")

    def __len__(self) -> int:
        return self.e_gt.shape[0]

    def means(self) -> dict:
        return {
            "E_GT": float(self.e_gt.mean()),
            "E_small": float(self.e_small.mean()),
            "E_large": float(self.e_large.mean()),
            "E_con": float(self.e_con.mean()),
        }

    def rows(self):
        for i in range(len(self)):
            yield (i, self.e_gt[i], self.e_small[i], self.e_large[i], self.e_con[i])

    def binned_means(self, edges) -> list[tuple[float, float, int, float, float, float]]:
        """Mean E per ``E_GT`` bin: ``(lo, hi, count, small, large, con)``.

        Bins are ``[lo, hi)`` except the last, which also holds ``hi``.
        """
        edges = np.asarray(edges, dtype=np.float64)
        which = np.digitize(self.e_gt, edges) - 1
        which[self.e_gt == edges[-1]] = len(edges) - 2  # the last bin is closed
        out = []
        for j in range(len(edges) - 1):
            sel = which == j
            n = int(sel.sum())
            if n == 0:
                out.append((edges[j], edges[j + 1], 0, math.nan, math.nan, math.nan))
                continue
            out.append((edges[j], edges[j + 1], n, float(self.e_small[sel].mean()),
                        float(self.e_large[sel].mean()), float(self.e_con[sel].mean())))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _stack(patches, side: int, name: str) -> np.ndarray:
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    if arr.ndim != 2 or arr.shape[1] != side * side:
        raise ValueError(f"{name} must hold {side}x{side} patches, got shape {arr.shape}")
    return arr


def central_part(patches: np.ndarray, side: int, c: int) -> np.ndarray:
    """The ``c x c`` centre of flattened ``side x side`` patches."""
    o = (side - c) // 2
    sq = patches.reshape(-1, side, side)
    return np.ascontiguousarray(sq[:, o : o + c, o : o + c].reshape(-1, c * c))


def patch_contexts(patches: np.ndarray, side: int, params: ContextParams) -> np.ndarray:
    """Context histogram of the centre of each flattened ``side x side`` patch.

    The context window is confined to the patch itself; neighbour patches
    reaching outside it see edge-replicated pixels.
    """
    sq = patches.reshape(-1, side, side)
    pad = params.margin
    n = sq.shape[0]
    # lay the padded patches out side by side in one tall image
    tall = np.pad(sq, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    block = side + 2 * pad
    img = np.ascontiguousarray(tall.reshape(n * block, block))
    centre = pad + side // 2
    ys = np.arange(n) * block + centre
    xs = np.full(n, centre)
    oy, ox = window_offsets(params)
    scale, offset = _weight_terms(params)
    # the tall image already carries the replicated border: no extra padding
    return kernels.context_histograms(
        img, 0, ys.astype(np.intp), xs.astype(np.intp), params.c, oy, ox,
        float(params.sigma), scale, offset, params.b,
    )


def _rms_error(clean_centre: np.ndarray, example_centre: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = example_centre[idx] - clean_centre[:, None, :]
    return np.sqrt(np.einsum("nkd,nkd->nk", diff, diff).mean(axis=1))


def _scan(rows: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    db = np.ascontiguousarray(rows, dtype=np.float32)
    idx, _ = kernels.knn_scan(db, np.ascontiguousarray(queries, dtype=np.float64), k)
    return idx


def eval_matching(clean_queries, noisy_queries, examples, k: int = 20, c: int = 7, h_large: int = 17,
                  context: ContextParams | None = None, sigma_v: float = 35.0,
                  sqrt_alpha: float = 0.9) -> MatchingReport:
    """Compare ground-truth, small-patch, large-patch and con-patch retrieval.

    Every error is the root mean squared distance between the clean centre
    of a query and the clean centres of its ``k`` matches. The context of
    a patch is computed inside its own ``h_large x h_large`` extent, with
    ``sigma = 5`` on the clean examples and ``sigma = sigma_v`` (noise
    energy removed) on the noisy queries.
    """
    if not 1 <= c < h_large:
        raise ValueError(f"need 1 <= c < h_large, got c={c}, h_large={h_large}")
    cq = _stack(clean_queries, h_large, "clean_queries")
    nq = _stack(noisy_queries, h_large, "noisy_queries")
    ex = _stack(examples, h_large, "examples")
    if cq.shape != nq.shape:
        raise ValueError(f"clean/noisy query sets differ: {cq.shape} vs {nq.shape}")
    if k > ex.shape[0]:
        raise ValueError(f"k={k} exceeds example count {ex.shape[0]}")
    base = database_context(c=c, h=h_large) if context is None else context.with_(c=c)
    gain = feature_gain(sqrt_alpha)
    ex_ctx = base.with_(noise_sigma=0.0)
    q_ctx = base.with_(sigma=sigma_v, noise_sigma=sigma_v) if sigma_v > 0 else ex_ctx

    clean_c = central_part(cq, h_large, c)
    noisy_c = central_part(nq, h_large, c)
    ex_c = central_part(ex, h_large, c)

    idx_gt = _scan(ex_c, clean_c, k)
    idx_small = _scan(ex_c, noisy_c, k)
    idx_large = _scan(ex, nq, k)
    ex_con = np.hstack([ex_c, gain * patch_contexts(ex, h_large, ex_ctx)])
    q_con = np.hstack([noisy_c, gain * patch_contexts(nq, h_large, q_ctx)])
    idx_con = _scan(ex_con, q_con, k)
    return MatchingReport(
        e_gt=_rms_error(clean_c, ex_c, idx_gt),
        e_small=_rms_error(clean_c, ex_c, idx_small),
        e_large=_rms_error(clean_c, ex_c, idx_large),
        e_con=_rms_error(clean_c, ex_c, idx_con),
        c=c, h_large=h_large, k=k, sigma_v=sigma_v,
    )


@dataclass(frozen=True, eq=False)
class MatchingSets:
    clean_queries: np.ndarray
    noisy_queries: np.ndarray
    examples: np.ndarray
    candidates: int


def matching_sets(images, n_queries: int, n_examples: int, h_large: int = 17, sigma_v: float = 35.0,
                  seed: int = 0, k: int = 20, c: int = 7, require_neighbors: bool = True) -> MatchingSets:
    """Draw disjoint query and example sets of large patches from a corpus.

    Centres are drawn without replacement over every (image, centre) pair
    whose large patch fits inside its image. With ``require_neighbors``
    only queries whose ``k``-th nearest example (clean centres) lies
    within the noise level ``c * sigma_v`` are kept; up to four times the
    requested queries are drawn to fill the set.
    """
    arrs = [pixels(im) for im in images]
    if not arrs:
        raise ValueError("corpus is empty")
    r = h_large // 2
    sizes = np.array([max(a.shape[0] - 2 * r, 0) * max(a.shape[1] - 2 * r, 0) for a in arrs], dtype=np.int64)
    total = int(sizes.sum())
    n_cand = 4 * n_queries if require_neighbors else n_queries
    if n_cand + n_examples > total:
        raise ValueError(f"corpus offers {total} large patches, need {n_cand + n_examples}")
    rng = rng_from_seed(seed, 4)
    flat = rng.choice(total, size=n_cand + n_examples, replace=False)
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    def cut(ids):
        ids = np.asarray(ids)
        out = np.empty((ids.shape[0], h_large * h_large))
        which = np.searchsorted(bounds, ids, side="right") - 1
        off = np.arange(h_large)
        for i, a in enumerate(arrs):
            sel = np.nonzero(which == i)[0]
            if sel.size == 0:
                continue
            w = a.shape[1] - 2 * r
            local = ids[sel] - bounds[i]
            y0 = local // w
            x0 = local % w
            out[sel] = a[y0[:, None, None] + off[None, :, None], x0[:, None, None] + off[None, None, :]].reshape(sel.size, -1)
        return out

    examples = cut(np.sort(flat[n_cand:]))
    queries = cut(flat[:n_cand])
    if require_neighbors:
        ex_c = central_part(examples, h_large, c)
        q_c = central_part(queries, h_large, c)
        _, dist = kernels.knn_scan(np.ascontiguousarray(ex_c, dtype=np.float32), q_c, k)
        keep = np.nonzero(dist[:, -1] <= (c * sigma_v) ** 2)[0][:n_queries]
        queries = queries[keep]
    else:
        queries = queries[:n_queries]
    noise = rng_from_seed(seed, 5)
    noisy = queries + sigma_v * noise.standard_normal(queries.shape)
    return MatchingSets(queries, noisy, examples, n_cand)
