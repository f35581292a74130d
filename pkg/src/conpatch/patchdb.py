"""Con-patch databases and k-nearest-neighbour search.

Database rows are float32 con-patch vectors. Exact search is a full scan;
approximate search walks a median-split kd-tree best-first and stops after
a fixed number of node expansions. All distances are squared Euclidean,
accumulated in float64, and ties are broken by the lower row index.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ._backend import kernels
from .context import ContextParams, con_patch_vectors
from .imgcore import Image, ImageIOError, load_image, pixels, rng_from_seed

log = logging.getLogger(__name__)

DB_MAGIC = b"CPDB"
DB_VERSION = 1
# magic, version, dim, count, c, h, b, m, sigma, alpha, normalize, noise_sigma,
# seed, manifest length, corpus digest
_DB_HEADER = struct.Struct("<4sIIQIIIIddIdQQ32s")
IDX_MAGIC = b"CPIX"
UNLIMITED = 2**62


class QueryResult(NamedTuple):
    indices: np.ndarray
    distances: np.ndarray


@dataclass(eq=False)
class PatchDatabase:
    """Flat store of con-patch vectors plus provenance.

    Attributes
    ----------
    vectors : ndarray, float32, shape (count, dim)
    params : ContextParams
        Configuration every row was built with (``sigma`` is the clean-image
        setting, ``alpha`` the gain baked into the feature block).
    seed : int
    manifest : list of (path, sha256) pairs
    origins : ndarray, int32, shape (count, 3)
        ``(image index, x, y)`` of each sampled centre.
    """

    vectors: np.ndarray = field(repr=False)
    params: ContextParams
    seed: int = 0
    manifest: list = field(default_factory=list)
    origins: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"database needs at least one row, got shape {v.shape}")
        v.setflags(write=False)
        self.vectors = v
        if self.origins is None:
            self.origins = np.full((v.shape[0], 3), -1, dtype=np.int32)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def content(self) -> np.ndarray:
        """Content block (the ``c x c`` patches) of every row."""
        cc = self.params.c * self.params.c
        return self.vectors[:, :cc]

    @property
    def corpus_digest(self) -> bytes:
        h = hashlib.sha256()
        for path, digest in self.manifest:
            h.update(f"{path}\t{digest}\n".encode())
        return h.digest()

    def digest(self) -> str:
        """SHA-256 of the serialised database."""
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def with_alpha(self, alpha: float) -> "PatchDatabase":
        """Copy with the feature block rescaled to a new gain."""
        p = self.params
        if alpha == p.alpha:
            return self
        cc = p.c * p.c
        vec = np.array(self.vectors, dtype=np.float32)
        if alpha == 0:
            vec[:, cc:] = 0.0
        elif p.alpha == 0:
            raise ValueError("cannot rescale a database built with alpha=0")
        else:
            vec[:, cc:] = (vec[:, cc:].astype(np.float64) * math.sqrt(alpha / p.alpha)).astype(np.float32)
        return PatchDatabase(vec, p.with_(alpha=alpha), self.seed, list(self.manifest), self.origins)

    def content_only(self) -> "PatchDatabase":
        """Database of the ``c x c`` content block alone (dim ``c*c``)."""
        return PatchDatabase(
            np.array(self.content), self.params.with_(b=1, alpha=0.0), self.seed,
            list(self.manifest), self.origins,
        )

    # --- serialisation ----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        p = self.params
        manifest = "".join(f"{path}\t{digest}\n" for path, digest in self.manifest).encode()
        fh.write(
            _DB_HEADER.pack(
                DB_MAGIC, DB_VERSION, self.dim, self.count, p.c, p.h, p.b, p.m,
                float(p.sigma), float(p.alpha), int(p.normalize), float(p.noise_sigma),
                self.seed & 0xFFFFFFFFFFFFFFFF, len(manifest), self.corpus_digest,
            )
        )
        fh.write(manifest)
        fh.write(self.vectors.astype("<f4", copy=False).tobytes())
        fh.write(np.ascontiguousarray(self.origins, dtype="<i4").tobytes())

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                self.write(fh)
            tmp.replace(path)
        except OSError as exc:
            raise ImageIOError(f"{path}: cannot write database ({exc.strerror or exc})") from exc

    @classmethod
    def load(cls, path, mmap: bool = False) -> "PatchDatabase":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                head = fh.read(_DB_HEADER.size)
                if len(head) < _DB_HEADER.size:
                    raise ImageIOError(f"{path}: truncated database header")
                (magic, version, dim, count, c, h, b, m, sigma, alpha, normalize,
                 noise_sigma, seed, mlen, cdig) = _DB_HEADER.unpack(head)
                if magic != DB_MAGIC:
                    raise ImageIOError(f"{path}: not a con-patch database (magic {magic!r})")
                if version != DB_VERSION:
                    raise ImageIOError(f"{path}: unsupported database version {version}")
                manifest_raw = fh.read(mlen)
        except ImageIOError:
            raise
        except OSError as exc:
            raise ImageIOError(f"{path}: cannot read database ({exc.strerror or exc})") from exc
        offset = _DB_HEADER.size + mlen
        expected = offset + count * dim * 4 + count * 3 * 4
        if path.stat().st_size != expected:
            raise ImageIOError(f"{path}: size {path.stat().st_size} != expected {expected}")
        if mmap:
            vectors = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(count, dim))
        else:
            vectors = np.fromfile(path, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
        origins = np.fromfile(
            path, dtype="<i4", count=count * 3, offset=offset + count * dim * 4
        ).reshape(count, 3)
        manifest = []
        for line in manifest_raw.decode().splitlines():
            p_, d_ = line.split("\t")
            manifest.append((p_, d_))
        params = ContextParams(
            sigma=sigma, h=h, b=b, m=m, alpha=alpha, c=c,
            normalize=bool(normalize), noise_sigma=noise_sigma,
        )
        db = cls(np.asarray(vectors), params, int(seed), manifest, origins)
        if db.corpus_digest != cdig:
            raise ImageIOError(f"{path}: corpus manifest digest mismatch")
        return db


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def valid_centers(shape: tuple[int, int], params: ContextParams) -> tuple[range, range]:
    """Centres whose whole context (window plus offset patches) lies inside the image."""
    hgt, wid = shape
    mg = params.margin
    return range(mg, wid - mg), range(mg, hgt - mg)


def sample_database(
    corpus: Sequence, n: int, params: ContextParams, seed: int = 0
) -> PatchDatabase:
    """Draw ``n`` con-patches uniformly over all (image, valid centre) pairs.

    ``corpus`` items are file paths or in-memory images. Sampling is
    without replacement unless ``n`` exceeds the number of available
    centres, in which case it falls back to sampling with replacement and
    emits a warning.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    images = []
    manifest = []
    for i, item in enumerate(corpus):
        if isinstance(item, (str, Path)):
            try:
                img = load_image(item)
            except OSError as exc:
                raise ImageIOError(f"cannot read corpus entry {item}: {exc}") from exc
            manifest.append((str(item), file_digest(item)))
        else:
            img = Image(pixels(item))
            manifest.append((f"<memory:{i}>", hashlib.sha256(img.data.tobytes()).hexdigest()))
        images.append(img.data)

    sizes = []
    for arr, (name, _) in zip(images, manifest):
        xs, ys = valid_centers(arr.shape, params)
        if len(xs) < 1 or len(ys) < 1:
            raise ValueError(
                f"{name}: {arr.shape[1]}x{arr.shape[0]} image too small for margin {params.margin}"
            )
        sizes.append(len(xs) * len(ys))
    sizes = np.asarray(sizes, dtype=np.int64)
    total = int(sizes.sum())
    rng = rng_from_seed(seed, stream=2)
    if n > total:
        warnings.warn(
            f"requested {n} patches but only {total} distinct centres exist; sampling with replacement",
            stacklevel=2,
        )
        flat = np.sort(rng.integers(0, total, size=n))
    else:
        flat = np.sort(rng.choice(total, size=n, replace=False))

    bounds = np.concatenate([[0], np.cumsum(sizes)])
    img_idx = np.searchsorted(bounds, flat, side="right") - 1
    vectors = np.empty((n, params.dim), dtype=np.float32)
    origins = np.empty((n, 3), dtype=np.int32)
    for i, arr in enumerate(images):
        sel = np.nonzero(img_idx == i)[0]
        if sel.size == 0:
            continue
        xs, ys = valid_centers(arr.shape, params)
        local = flat[sel] - bounds[i]
        cy = ys.start + local // len(xs)
        cx = xs.start + local % len(xs)
        vectors[sel] = con_patch_vectors(arr, cx, cy, params)
        origins[sel, 0] = i
        origins[sel, 1] = cx
        origins[sel, 2] = cy
    log.info("sampled %d con-patches (dim %d) from %d images", n, params.dim, len(images))
    return PatchDatabase(vectors, params, seed, manifest, origins)


# --- search ---------------------------------------------------------------


def _queries(query, dim: int) -> np.ndarray:
    q = np.ascontiguousarray(np.atleast_2d(np.asarray(query, dtype=np.float64)))
    if q.shape[1] != dim:
        raise ValueError(f"query dim {q.shape[1]} does not match database dim {dim}")
    return q


def _check_k(k: int, count: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > count:
        raise ValueError(f"k={k} exceeds database size {count}")


def knn_exact_many(db: PatchDatabase, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k-NN for a batch of queries; returns ``(indices, distances)`` of shape ``(nq, k)``."""
    _check_k(k, db.count)
    q = _queries(queries, db.dim)
    return kernels.knn_scan(db.vectors, q, k)


def knn_exact(db: PatchDatabase, query, k: int) -> QueryResult:
    idx, dist = knn_exact_many(db, query, k)
    return QueryResult(idx[0], dist[0])


@dataclass(eq=False)
class KnnIndex:
    """Median-split kd-tree over a :class:`PatchDatabase`.

    Node ``i`` spans rows ``perm[start[i]:end[i]]`` and stores the tight
    bounding box ``lo[i]``, ``hi[i]`` of those rows. Leaves have
    ``left[i] == -1``.
    """

    db: PatchDatabase = field(repr=False)
    leaf_size: int
    perm: np.ndarray = field(repr=False)
    lo: np.ndarray = field(repr=False)
    hi: np.ndarray = field(repr=False)
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    start: np.ndarray = field(repr=False)
    end: np.ndarray = field(repr=False)
    split_dim: np.ndarray = field(repr=False)
    split_val: np.ndarray = field(repr=False)
    max_visits: int = 4096

    @property
    def n_nodes(self) -> int:
        return self.left.shape[0]

    def leaves(self) -> list[np.ndarray]:
        return [self.perm[self.start[i] : self.end[i]] for i in range(self.n_nodes) if self.left[i] < 0]

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def save(self, path) -> None:
        meta = json.dumps({"leaf_size": self.leaf_size, "db_digest": self.db.digest()})
        arrays = dict(
            perm=self.perm, lo=self.lo, hi=self.hi, left=self.left, right=self.right,
            start=self.start, end=self.end, split_dim=self.split_dim, split_val=self.split_val,
        )
        with open(path, "wb") as fh:
            fh.write(IDX_MAGIC)
            np.savez(fh, meta=np.array(meta), **arrays)

    @classmethod
    def load(cls, path, db: PatchDatabase) -> "KnnIndex":
        with open(path, "rb") as fh:
            if fh.read(4) != IDX_MAGIC:
                raise ImageIOError(f"{path}: not a con-patch index")
            data = np.load(fh)
            meta = json.loads(str(data["meta"]))
            if meta["db_digest"] != db.digest():
                raise ValueError(f"{path}: index was built for a different database")
            arrays = {k: data[k] for k in data.files if k != "meta"}
        return cls(db=db, leaf_size=meta["leaf_size"], **arrays)


def build_index(db: PatchDatabase, leaf_size: int = 32) -> KnnIndex:
    """Build a kd-tree: split on the widest dimension at the median row.

    Rows are ordered by (value, row id) along the split dimension so the
    tree is deterministic; the lower half goes left.
    """
    if leaf_size < 1:
        raise ValueError(f"leaf_size must be >= 1, got {leaf_size}")
    vec = db.vectors
    n, dim = vec.shape
    perm = np.arange(n, dtype=np.int64)
    lo, hi, left, right, start, end, sdim, sval = [], [], [], [], [], [], [], []

    def new_node(s, e):
        rows = vec[perm[s:e]]
        lo.append(rows.min(axis=0).astype(np.float64))
        hi.append(rows.max(axis=0).astype(np.float64))
        left.append(-1)
        right.append(-1)
        start.append(s)
        end.append(e)
        sdim.append(-1)
        sval.append(0.0)
        return len(left) - 1

    stack = [new_node(0, n)]
    while stack:
        node = stack.pop()
        s, e = start[node], end[node]
        spread = hi[node] - lo[node]
        if e - s <= leaf_size or not np.any(spread > 0):
            continue
        d = int(np.argmax(spread))
        seg = perm[s:e]
        vals = vec[seg, d]
        order = np.lexsort((seg, vals))
        perm[s:e] = seg[order]
        mid = s + (e - s) // 2
        sdim[node] = d
        sval[node] = float(vec[perm[mid], d])
        l_id = new_node(s, mid)
        r_id = new_node(mid, e)
        left[node] = l_id
        right[node] = r_id
        stack.append(r_id)
        stack.append(l_id)

    as_i = lambda a: np.ascontiguousarray(a, dtype=np.int64)  # noqa: E731
    return KnnIndex(
        db=db,
        leaf_size=leaf_size,
        perm=perm,
        lo=np.ascontiguousarray(np.vstack(lo)),
        hi=np.ascontiguousarray(np.vstack(hi)),
        left=as_i(left),
        right=as_i(right),
        start=as_i(start),
        end=as_i(end),
        split_dim=as_i(sdim),
        split_val=np.asarray(sval, dtype=np.float64),
    )


def _visits(max_visits) -> int:
    if max_visits is None or max_visits == math.inf:
        return UNLIMITED
    if max_visits < 1:
        raise ValueError(f"max_visits must be >= 1, got {max_visits}")
    return int(max_visits)


def knn_approx_many(index: KnnIndex, queries, k: int, max_visits=None) -> tuple[np.ndarray, np.ndarray]:
    """Best-first kd-tree k-NN for a batch of queries.

    ``max_visits`` bounds the node expansions per query (``None`` uses the
    index default, ``math.inf`` searches exhaustively and equals
    :func:`knn_exact_many`). Slots that were never filled hold index -1
    and distance ``inf``.
    """
    db = index.db
    _check_k(k, db.count)
    q = _queries(queries, db.dim)
    mv = _visits(index.max_visits if max_visits is None else max_visits)
    return kernels.kdtree_query(
        db.vectors, index.perm, index.lo, index.hi, index.left, index.right,
        index.start, index.end, q, k, mv,
    )


def knn_approx(index: KnnIndex, query, k: int, max_visits=None) -> QueryResult:
    idx, dist = knn_approx_many(index, query, k, max_visits)
    return QueryResult(idx[0], dist[0])


def recall(approx_idx: np.ndarray, exact_idx: np.ndarray) -> float:
    """Mean fraction of exact neighbours recovered, over queries."""
    approx_idx = np.atleast_2d(approx_idx)
    exact_idx = np.atleast_2d(exact_idx)
    hits = [len(np.intersect1d(a, e)) / e.shape[0] for a, e in zip(approx_idx, exact_idx)]
    return float(np.mean(hits))
