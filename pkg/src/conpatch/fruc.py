"""Bi-directional motion-compensated frame-rate up-conversion.

The unknown middle frame is split into non-overlapping blocks. For each
block at position ``p`` a symmetric vector ``v`` is searched so that the
block seen at ``p - v`` in the previous frame matches the block at
``p + v`` in the next frame; the interpolated block is the average of the
two. Vectors are stored in half-pixel units, so a stored ``v`` displaces
each side by ``v / 2`` pixels and the total motion between the two source
frames is ``v`` pixels.

With a positive gain the block distance is augmented by the squared
distance between the context histograms of the two compensated blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .context import ContextParams, context_map, feature_gain
from .imgcore import Image, pixels, psnr, sample_clamped

# 8-neighbourhood used by the half-pel refinement, in raster order.
_HALF_STEPS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _default_context() -> ContextParams:
    return ContextParams(sigma=10.0, h=21, b=8, m=4, c=7, alpha=0.0, normalize=True)


@dataclass(frozen=True)
class FrucParams:
    """Block-matching parameters.

    Attributes
    ----------
    block : int
        Side of the square blocks of the interpolated frame.
    radius : int
        Search radius in pixels, applied per side of the symmetric vector.
    halfpel : bool
        Refine the best full-pel vector on its 8 half-pel neighbours.
    context : ContextParams
        Context feature settings. Its ``alpha`` is ignored; the gain comes
        from ``sqrt_alpha``.
    sqrt_alpha : float
        Context gain. Zero gives classic block matching.
    metric : {"ssd", "sad"}
        Block distance.
    """

    block: int = 16
    radius: int = 10
    halfpel: bool = True
    context: ContextParams = field(default_factory=_default_context)
    sqrt_alpha: float = 1.3
    metric: str = "ssd"

    def __post_init__(self):
        if self.block < 1:
            raise ValueError(f"block must be >= 1, got {self.block}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if not self.sqrt_alpha >= 0:
            raise ValueError(f"sqrt_alpha must be >= 0, got {self.sqrt_alpha}")
        if self.metric not in ("ssd", "sad"):
            raise ValueError(f"metric must be 'ssd' or 'sad', got {self.metric!r}")

    @property
    def gain(self) -> float:
        """Multiplier applied to the histograms before comparing them."""
        return feature_gain(self.sqrt_alpha)

    def with_(self, **changes) -> "FrucParams":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class MotionField:
    """One symmetric vector per block, in half-pixel units.

    ``dx`` and ``dy`` have shape ``(rows, cols)`` with
    ``rows = ceil(height / block)`` and ``cols = ceil(width / block)``.
    """

    dx: np.ndarray
    dy: np.ndarray
    block: int
    width: int
    height: int

    def __post_init__(self):
        rows, cols = _grid_shape(self.height, self.width, self.block)
        for name in ("dx", "dy"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (rows, cols):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(rows, cols)}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, width: int, height: int, block: int) -> "MotionField":
        rows, cols = _grid_shape(height, width, block)
        z = np.zeros((rows, cols), dtype=np.int64)
        return cls(z, z, block, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def __eq__(self, other):
        if not isinstance(other, MotionField):
            return NotImplemented
        return (
            (self.block, self.width, self.height) == (other.block, other.width, other.height)
            and np.array_equal(self.dx, other.dx)
            and np.array_equal(self.dy, other.dy)
        )


def _grid_shape(height: int, width: int, block: int) -> tuple[int, int]:
    return -(-height // block), -(-width // block)


def _pair(prev, next_) -> tuple[np.ndarray, np.ndarray]:
    a = pixels(prev)
    b = pixels(next_)
    if a.shape != b.shape:
        raise ValueError(f"frame size mismatch: {a.shape[::-1]} vs {b.shape[::-1]}")
    return a, b


def frame_average(prev, next_) -> Image:
    """Pixel-wise mean of two frames."""
    a, b = _pair(prev, next_)
    return Image(0.5 * (a + b))


# --- block access -------------------------------------------------------------


def _block_coords(x0: int, y0: int, block: int, width: int, height: int):
    xs = np.arange(x0, min(x0 + block, width), dtype=np.float64)
    ys = np.arange(y0, min(y0 + block, height), dtype=np.float64)
    return np.meshgrid(xs, ys, indexing="xy")


def compensated_block(frame: np.ndarray, x0: int, y0: int, block: int, shift_x: float, shift_y: float) -> np.ndarray:
    """Block at ``(x0, y0)`` sampled with a fractional displacement.

    Samples outside the frame replicate the border.
    """
    h, w = frame.shape
    gx, gy = _block_coords(x0, y0, block, w, h)
    return sample_clamped(frame, gx + shift_x, gy + shift_y)


def _context_at(ctx: np.ndarray, x0: int, y0: int, bw: int, bh: int, shift_x: float, shift_y: float) -> np.ndarray:
    # Context of the compensated block: histogram at the full-pel rounding
    # of its centre, clamped to the frame.
    h, w, _ = ctx.shape
    cx = math.floor(x0 + (bw - 1) / 2.0 + shift_x + 0.5)
    cy = math.floor(y0 + (bh - 1) / 2.0 + shift_y + 0.5)
    cx = min(max(cx, 0), w - 1)
    cy = min(max(cy, 0), h - 1)
    return ctx[cy, cx]


def _sq_sum(df: np.ndarray):
    # Sequential sum of squares over the last axis, so the per-block and
    # the vectorised search paths round identically.
    acc = np.zeros(df.shape[:-1])
    for k in range(df.shape[-1]):
        acc = acc + df[..., k] * df[..., k]
    return acc


def _block_distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    d = a - b
    if metric == "sad":
        return float(np.abs(d).sum())
    return float((d * d).sum())


def matching_cost(prev, next_, block_x: int, block_y: int, v: tuple[int, int], params: FrucParams, contexts=None) -> float:
    """Cost ``D(v)`` of one candidate for the block whose top-left is ``(block_x, block_y)``.

    ``v = (vx, vy)`` is in half-pixel units. ``contexts`` optionally holds
    the precomputed context maps of both frames.
    """
    a, b = _pair(prev, next_)
    h, w = a.shape
    vx, vy = v
    sx, sy = vx / 2.0, vy / 2.0
    bp = compensated_block(a, block_x, block_y, params.block, -sx, -sy)
    bn = compensated_block(b, block_x, block_y, params.block, sx, sy)
    cost = _block_distance(bp, bn, params.metric)
    if params.gain > 0:
        if contexts is None:
            contexts = frame_contexts(a, b, params)
        bh, bw = bp.shape
        hp = _context_at(contexts[0], block_x, block_y, bw, bh, -sx, -sy)
        hn = _context_at(contexts[1], block_x, block_y, bw, bh, sx, sy)
        cost += float(_sq_sum(params.gain * (hp - hn)))
    return cost


def frame_contexts(prev, next_, params: FrucParams) -> tuple[np.ndarray, np.ndarray] | None:
    """Per-pixel context histograms of both frames, or None without context."""
    if params.gain == 0:
        return None
    a, b = _pair(prev, next_)
    return context_map(a, params.context), context_map(b, params.context)


# --- motion search ------------------------------------------------------------


def _full_pel_candidates(radius: int) -> list[tuple[int, int]]:
    """Full-pel vectors (half-pel units) ordered by ``|v|_1`` then raster order."""
    cands = [(2 * vx, 2 * vy) for vy in range(-radius, radius + 1) for vx in range(-radius, radius + 1)]
    cands.sort(key=lambda v: (abs(v[0]) + abs(v[1]), v[1], v[0]))
    return cands


def _order_key(cost: float, v: tuple[int, int]):
    return (cost, abs(v[0]) + abs(v[1]), v[1], v[0])


def bidirectional_search(prev, next_, block_x: int, block_y: int, params: FrucParams, contexts=None) -> tuple[int, int]:
    """Best symmetric vector ``(vx, vy)`` in half-pel units for one block.

    Ties are broken by the smaller ``|v|_1`` and then by raster order of
    ``(vy, vx)``.
    """
    a, b = _pair(prev, next_)
    h, w = a.shape
    if not (0 <= block_x < w and 0 <= block_y < h):
        raise ValueError(f"block origin ({block_x}, {block_y}) outside {w}x{h} frame")
    if contexts is None:
        contexts = frame_contexts(a, b, params)
    field = _search_blocks(a, b, params, contexts, [(block_x, block_y)])
    return field[0]


def _search_blocks(a, b, params, contexts, origins):
    limit = 2 * params.radius
    out = []
    for x0, y0 in origins:
        best = None
        for v in _full_pel_candidates(params.radius):
            key = _order_key(matching_cost(a, b, x0, y0, v, params, contexts), v)
            if best is None or key < best[0]:
                best = (key, v)
        if params.halfpel:
            cx, cy = best[1]
            for ddy, ddx in _HALF_STEPS:
                v = (cx + ddx, cy + ddy)
                if abs(v[0]) > limit or abs(v[1]) > limit:
                    continue
                key = _order_key(matching_cost(a, b, x0, y0, v, params, contexts), v)
                if key < best[0]:
                    best = (key, v)
        out.append(best[1])
    return out


def _shift_stack(frame: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(frame, pad, mode="edge")


def _block_sums(err: np.ndarray, block: int) -> np.ndarray:
    h, w = err.shape
    rows, cols = _grid_shape(h, w, block)
    padded = np.zeros((rows * block, cols * block))
    padded[:h, :w] = err
    return padded.reshape(rows, block, cols, block).sum(axis=(1, 3))


def _block_geometry(height: int, width: int, block: int):
    rows, cols = _grid_shape(height, width, block)
    y0 = np.arange(rows) * block
    x0 = np.arange(cols) * block
    bh = np.minimum(y0 + block, height) - y0
    bw = np.minimum(x0 + block, width) - x0
    return y0, x0, bh, bw


def estimate_motion(prev, next_, params: FrucParams, contexts=None) -> MotionField:
    """Motion field of the frame halfway between ``prev`` and ``next_``.

    Every full-pel candidate is evaluated for all blocks at once on shifted
    copies of the frames; the half-pel refinement then samples the eight
    neighbours of each block's winner bilinearly.
    """
    a, b = _pair(prev, next_)
    h, w = a.shape
    if contexts is None:
        contexts = frame_contexts(a, b, params)
    y0, x0, bh, bw = _block_geometry(h, w, params.block)
    rows, cols = len(y0), len(x0)
    gain = params.gain
    r = params.radius
    pa = _shift_stack(a, r)
    pb = _shift_stack(b, r)

    def block_err(diff):
        if params.metric == "sad":
            return _block_sums(np.abs(diff), params.block)
        return _block_sums(diff * diff, params.block)

    best_vx = np.zeros((rows, cols), dtype=np.int64)
    best_vy = np.zeros((rows, cols), dtype=np.int64)
    best_cost = np.full((rows, cols), np.inf)
    for vx, vy in _full_pel_candidates(r):
        sx, sy = vx // 2, vy // 2
        sa = pa[r - sy : r - sy + h, r - sx : r - sx + w]
        sb = pb[r + sy : r + sy + h, r + sx : r + sx + w]
        cost = block_err(sa - sb)
        if gain > 0:
            cost = cost + _context_costs(contexts, gain, y0, x0, bh, bw, sx, sy)
        # candidates arrive in tie-break order, so only strict improvements win
        better = cost < best_cost
        best_cost = np.where(better, cost, best_cost)
        best_vx = np.where(better, vx, best_vx)
        best_vy = np.where(better, vy, best_vy)

    if params.halfpel:
        best_vx, best_vy = _refine_halfpel(a, b, params, contexts, best_vx, best_vy, best_cost, y0, x0, bh, bw)
    return MotionField(best_vx, best_vy, params.block, w, h)


def _refine_halfpel(a, b, params, contexts, vx, vy, cost, y0, x0, bh, bw):
    h, w = a.shape
    limit = 2 * params.radius
    rows, cols = vx.shape
    block = params.block
    # sample grid of every block, padded to full block size (masked below)
    oy, ox = np.mgrid[0:block, 0:block]
    gy = y0[:, None, None, None] + oy[None, None, :, :]
    gx = x0[None, :, None, None] + ox[None, None, :, :]
    mask = (gy < h) & (gx < w)
    key_cost = cost.copy()
    key_l1 = np.abs(vx) + np.abs(vy)
    key_vy = vy.copy()
    key_vx = vx.copy()
    out_vx = vx.copy()
    out_vy = vy.copy()
    for ddy, ddx in _HALF_STEPS:
        cvx = vx + ddx
        cvy = vy + ddy
        valid = (np.abs(cvx) <= limit) & (np.abs(cvy) <= limit)
        sx = (cvx / 2.0)[:, :, None, None]
        sy = (cvy / 2.0)[:, :, None, None]
        bp = sample_clamped(a, gx - sx, gy - sy)
        bn = sample_clamped(b, gx + sx, gy + sy)
        d = bp - bn
        e = np.abs(d) if params.metric == "sad" else d * d
        c = np.where(mask, e, 0.0).sum(axis=(2, 3))
        if params.gain > 0:
            c = c + _context_costs(contexts, params.gain, y0, x0, bh, bw, cvx / 2.0, cvy / 2.0)
        l1 = np.abs(cvx) + np.abs(cvy)
        better = valid & (
            (c < key_cost)
            | ((c == key_cost) & (l1 < key_l1))
            | ((c == key_cost) & (l1 == key_l1) & (cvy < key_vy))
            | ((c == key_cost) & (l1 == key_l1) & (cvy == key_vy) & (cvx < key_vx))
        )
        key_cost = np.where(better, c, key_cost)
        key_l1 = np.where(better, l1, key_l1)
        key_vy = np.where(better, cvy, key_vy)
        key_vx = np.where(better, cvx, key_vx)
        out_vx = np.where(better, cvx, out_vx)
        out_vy = np.where(better, cvy, out_vy)
    return out_vx, out_vy


def _context_costs(contexts, gain, y0, x0, bh, bw, sx, sy):
    # Context distance of one candidate per block; the shifts broadcast
    # against the (rows, cols) block grid.
    ctx_a, ctx_b = contexts
    h, w, _ = ctx_a.shape
    cy = (y0 + (bh - 1) / 2.0)[:, None]
    cx = (x0 + (bw - 1) / 2.0)[None, :]
    cy_p = np.clip(np.floor(cy - sy + 0.5), 0, h - 1).astype(np.intp)
    cx_p = np.clip(np.floor(cx - sx + 0.5), 0, w - 1).astype(np.intp)
    cy_n = np.clip(np.floor(cy + sy + 0.5), 0, h - 1).astype(np.intp)
    cx_n = np.clip(np.floor(cx + sx + 0.5), 0, w - 1).astype(np.intp)
    return _sq_sum(gain * (ctx_a[cy_p, cx_p] - ctx_b[cy_n, cx_n]))


# --- interpolation ------------------------------------------------------------


def interpolate_frame(prev, next_, field: MotionField, params: FrucParams | None = None) -> Image:
    """Average of the two motion-compensated blocks for every block."""
    a, b = _pair(prev, next_)
    h, w = a.shape
    if (field.width, field.height) != (w, h):
        raise ValueError(
            f"motion field is for {field.width}x{field.height} frames, got {w}x{h}"
        )
    if params is not None and params.block != field.block:
        raise ValueError(f"motion field block {field.block} differs from params block {params.block}")
    block = field.block
    ys, xs = np.mgrid[0:h, 0:w]
    by = ys // block
    bx = xs // block
    vx = field.dx[by, bx]
    vy = field.dy[by, bx]
    out = np.empty((h, w))
    whole = (vx % 2 == 0) & (vy % 2 == 0)
    # full-pel displacements read pixels directly (exact), half-pel ones interpolate
    sx = vx // 2
    sy = vy // 2
    ia = a[np.clip(ys - sy, 0, h - 1), np.clip(xs - sx, 0, w - 1)]
    ib = b[np.clip(ys + sy, 0, h - 1), np.clip(xs + sx, 0, w - 1)]
    out[whole] = 0.5 * (ia[whole] + ib[whole])
    frac = ~whole
    if np.any(frac):
        fx = vx[frac] / 2.0
        fy = vy[frac] / 2.0
        pa = sample_clamped(a, xs[frac] - fx, ys[frac] - fy)
        pb = sample_clamped(b, xs[frac] + fx, ys[frac] + fy)
        out[frac] = 0.5 * (pa + pb)
    return Image(out)


def interpolate_pair(prev, next_, params: FrucParams) -> tuple[Image, MotionField]:
    field = estimate_motion(prev, next_, params)
    return interpolate_frame(prev, next_, field, params), field


def _check_frames(frames) -> list[np.ndarray]:
    arrs = [pixels(f) for f in frames]
    if len(arrs) < 2:
        raise ValueError(f"need at least 2 frames, got {len(arrs)}")
    shape = arrs[0].shape
    for i, f in enumerate(arrs):
        if f.shape != shape:
            raise ValueError(f"frame {i} is {f.shape[::-1]}, expected {shape[::-1]}")
    return arrs


def upconvert(frames, params: FrucParams, method: str = "mc") -> list[Image]:
    """Double the frame rate by inserting one frame between every consecutive pair.

    ``method`` is ``"mc"`` for motion compensation or ``"average"`` for
    plain frame averaging. The result holds ``2 n - 1`` frames.
    """
    arrs = _check_frames(frames)
    out = [Image(arrs[0])]
    for a, b in zip(arrs[:-1], arrs[1:]):
        if method == "average":
            mid = frame_average(a, b)
        elif method == "mc":
            mid, _ = interpolate_pair(a, b, params)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.extend([mid, Image(b)])
    return out


@dataclass(frozen=True)
class FrameScore:
    frame: int
    method: str
    psnr: float


def rebuild_odd(frames, params: FrucParams, method: str = "mc") -> list[Image]:
    """Drop the odd frames and rebuild each from its even neighbours.

    Returns the rebuilt frames for original indices ``1, 3, 5, ...``; a
    trailing odd frame without a following even frame is not rebuilt.
    """
    arrs = _check_frames(frames)
    if len(arrs) < 3:
        raise ValueError("evaluation needs at least 3 frames")
    return upconvert(arrs[0::2], params, method)[1::2]


def evaluate_upconvert(frames, params: FrucParams, method: str = "mc") -> list[FrameScore]:
    """PSNR of every frame rebuilt by :func:`rebuild_odd` against the original."""
    arrs = _check_frames(frames)
    rebuilt = rebuild_odd(arrs, params, method)
    return [FrameScore(2 * j + 1, method, psnr(arrs[2 * j + 1], f)) for j, f in enumerate(rebuilt)]


def mean_psnr(scores) -> float:
    vals = [s.psnr for s in scores]
    return float(np.mean(vals)) if vals else math.nan
