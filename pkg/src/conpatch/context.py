"""Self-similarity context feature and con-patch construction.

A con-patch is a small ``c x c`` patch concatenated with a ``b``-bin
histogram of similarity weights between that patch and its neighbours
sampled every ``m`` pixels inside an ``h x h`` window, scaled by
``sqrt(alpha)``. Euclidean distance between con-patches is the content
distance plus ``alpha`` times the histogram distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import kernels
from .imgcore import pixels

CONPATCH_VERSION = 1
_HEADER = struct.Struct("<IIfI")  # c, b, alpha, version -> 16 bytes

# Luminance scale of one unit of pipeline-level gain. ``ContextParams.alpha``
# multiplies ``|H_a - H_b|^2`` next to squared luminance differences on the
# 0..255 scale; pipeline parameters quote ``sqrt(alpha)`` in these units.
# The value was chosen by denoising held-out training tiles at sigma_v = 25
# (best raw gain about 126 for the default sqrt(alpha) = 0.9).
GAIN_UNIT = 140.0


def feature_gain(sqrt_alpha: float) -> float:
    """Histogram multiplier for a pipeline-level ``sqrt(alpha)``."""
    return GAIN_UNIT * float(sqrt_alpha)


def alpha_from_sqrt(sqrt_alpha: float) -> float:
    """``ContextParams.alpha`` matching a pipeline-level ``sqrt(alpha)``."""
    return feature_gain(sqrt_alpha) ** 2


@dataclass(frozen=True)
class ContextParams:
    """Parameters of the context feature.

    Attributes
    ----------
    sigma : float
        Illumination tolerance of the similarity weights (luminance units).
    h : int
        Side of the context window.
    b : int
        Number of histogram bins.
    m : int
        Sampling stride of neighbour patches inside the window.
    alpha : float
        Context gain; the feature block is ``sqrt(alpha) * H``.
    c : int
        Side of the central patch.
    normalize : bool
        Use the per-pixel mean squared difference instead of the plain sum
        inside the similarity weight.
    noise_sigma : float
        When positive, the expected noise energy ``2 * noise_sigma**2`` per
        pixel is subtracted from the patch distance (clamped at zero) before
        weighting. Used for features computed on noisy images.
    """

    sigma: float = 5.0
    h: int = 21
    b: int = 8
    m: int = 4
    alpha: float = 0.81
    c: int = 7
    normalize: bool = False
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.h < 1 or self.h % 2 == 0:
            raise ValueError(f"context window h must be odd and positive, got {self.h}")
        if self.c < 1 or self.c % 2 == 0:
            raise ValueError(f"patch side c must be odd and positive, got {self.c}")
        if self.c > self.h:
            raise ValueError(f"patch side c={self.c} exceeds window h={self.h}")
        if self.m < 1:
            raise ValueError(f"stride m must be >= 1, got {self.m}")
        if self.b < 1:
            raise ValueError(f"bin count b must be >= 1, got {self.b}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def dim(self) -> int:
        return self.c * self.c + self.b

    @property
    def sqrt_alpha(self) -> float:
        return math.sqrt(self.alpha)

    @property
    def margin(self) -> int:
        """Distance from a centre to the farthest pixel any offset patch touches."""
        return self.h // 2 + self.c // 2

    def with_(self, **changes) -> "ContextParams":
        return replace(self, **changes)


def window_offsets(params: ContextParams) -> tuple[np.ndarray, np.ndarray]:
    """Offsets ``(dy, dx)`` of the neighbour patches, zero offset excluded.

    Both axes start at ``-(h // 2)`` and advance by ``m``; there are
    ``ceil(h / m)`` samples per axis.
    """
    n = -(-params.h // params.m)
    axis = -(params.h // 2) + params.m * np.arange(n)
    dy, dx = np.meshgrid(axis, axis, indexing="ij")
    dy = dy.ravel()
    dx = dx.ravel()
    keep = ~((dy == 0) & (dx == 0))
    return dy[keep].astype(np.intp), dx[keep].astype(np.intp)


def _weight_terms(params: ContextParams) -> tuple[float, float]:
    scale = 1.0 / (params.c * params.c) if params.normalize else 1.0
    offset = 2.0 * params.noise_sigma**2
    if not params.normalize:
        offset *= params.c * params.c
    return scale, offset


def correlation_weights_many(img, xs, ys, params: ContextParams) -> np.ndarray:
    """Correlation surfaces for many centres, shape ``(n, n_offsets)``."""
    arr = pixels(img)
    pad = params.margin
    padded = np.ascontiguousarray(np.pad(arr, pad, mode="edge"))
    oy, ox = window_offsets(params)
    scale, offset = _weight_terms(params)
    return kernels.correlation_weights(
        padded, pad, _as_idx(ys), _as_idx(xs), params.c, oy, ox,
        float(params.sigma), scale, offset,
    )


def correlation_surface(img, center_x: int, center_y: int, params: ContextParams) -> np.ndarray:
    """Similarity weights between the patch at a pixel and its window neighbours."""
    arr = pixels(img)
    _check_center(arr, center_x, center_y)
    return correlation_weights_many(arr, [center_x], [center_y], params)[0]


def weights_to_histogram(weights, b: int) -> np.ndarray:
    """Normalised ``b``-bin histogram of weights in ``[0, 1]``.

    Bin ``k`` (0-based) collects ``(k/b, (k+1)/b]``; a weight of exactly 0
    falls in the first bin.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot build a histogram from an empty weight list")
    if b < 1:
        raise ValueError(f"bin count must be >= 1, got {b}")
    if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
        raise ValueError("weights must lie in [0, 1]")
    return kernels.bin_weights(w[None, :], b)[0]


def context_histograms(img, xs, ys, params: ContextParams) -> np.ndarray:
    """Context histograms ``H`` for many centres, shape ``(n, b)``."""
    arr = pixels(img)
    pad = params.margin
    padded = np.ascontiguousarray(np.pad(arr, pad, mode="edge"))
    oy, ox = window_offsets(params)
    scale, offset = _weight_terms(params)
    return kernels.context_histograms(
        padded, pad, _as_idx(ys), _as_idx(xs), params.c, oy, ox,
        float(params.sigma), scale, offset, params.b,
    )


def context_map(img, params: ContextParams) -> np.ndarray:
    """Context histogram of every pixel, shape ``(height, width, b)``."""
    arr = pixels(img)
    h, w = arr.shape
    ys, xs = np.mgrid[0:h, 0:w]
    return context_histograms(arr, xs.ravel(), ys.ravel(), params).reshape(h, w, params.b)


def con_patch_vectors(img, xs, ys, params: ContextParams) -> np.ndarray:
    """Stacked con-patch vectors ``[content | sqrt(alpha) H]``, shape ``(n, c*c + b)``."""
    from .imgcore import extract_patches

    content = extract_patches(img, xs, ys, params.c)
    if params.alpha == 0:
        feature = np.zeros((content.shape[0], params.b))
    else:
        feature = params.sqrt_alpha * context_histograms(img, xs, ys, params)
    return np.hstack([content, feature])


@dataclass(frozen=True, eq=False)
class ConPatch:
    content: np.ndarray = field(repr=False)
    feature: np.ndarray = field(repr=False)
    origin: tuple[int, int] = (0, 0)
    alpha: float = 0.0

    @property
    def c(self) -> int:
        return math.isqrt(self.content.shape[0])

    @property
    def b(self) -> int:
        return self.feature.shape[0]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.content, self.feature])

    def to_bytes(self) -> bytes:
        """Little-endian float32 ``[content | feature]`` behind a 16-byte header."""
        head = _HEADER.pack(self.c, self.b, self.alpha, CONPATCH_VERSION)
        return head + self.vector.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, origin=(0, 0)) -> "ConPatch":
        if len(raw) < _HEADER.size:
            raise ValueError("truncated con-patch record")
        c, b, alpha, version = _HEADER.unpack_from(raw)
        if version != CONPATCH_VERSION:
            raise ValueError(f"unsupported con-patch version {version}")
        body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
        if body.shape[0] != c * c + b:
            raise ValueError(f"con-patch body has {body.shape[0]} values, expected {c * c + b}")
        return cls(body[: c * c], body[c * c :], origin, float(alpha))


def build_con_patch(img, center_x: int, center_y: int, params: ContextParams) -> ConPatch:
    arr = pixels(img)
    _check_center(arr, center_x, center_y)
    vec = con_patch_vectors(arr, [center_x], [center_y], params)[0]
    cc = params.c * params.c
    return ConPatch(vec[:cc], vec[cc:], (center_x, center_y), params.alpha)


def con_distance(a: ConPatch, b: ConPatch) -> float:
    """Squared con-patch distance ``|content_a - content_b|^2 + |feature_a - feature_b|^2``."""
    if a.content.shape != b.content.shape or a.feature.shape != b.feature.shape:
        raise ValueError(
            f"con-patch configuration mismatch: c={a.c}/{b.c}, b={a.b}/{b.b}"
        )
    if a.alpha != b.alpha:
        raise ValueError(f"con-patch gain mismatch: alpha={a.alpha} vs {b.alpha}")
    dc = a.content - b.content
    df = a.feature - b.feature
    return float(dc @ dc + df @ df)


def _as_idx(v) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(v, dtype=np.intp).ravel())


def _check_center(arr: np.ndarray, x: int, y: int) -> None:
    h, w = arr.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"center ({x}, {y}) outside {w}x{h} image")
