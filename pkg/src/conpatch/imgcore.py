"""Grayscale image container, patch access, noise synthesis, sampling and PSNR."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PEAK = 255.0


class ImageIOError(OSError):
    """Raised when an image file cannot be read or written."""


@dataclass(frozen=True)
class Image:
    """Single-channel luminance raster.

    ``data`` is stored as a read-only ``float64`` array of shape
    ``(height, width)``. Values are nominally in ``[0, 255]`` but are not
    clipped (noisy images routinely leave that range).
    """

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Image(width={self.width}, height={self.height})"

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class NoiseSpec:
    sigma_v: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_v >= 0:
            raise ValueError(f"sigma_v must be >= 0, got {self.sigma_v}")


def pixels(img) -> np.ndarray:
    """Return the 2-D float64 pixel array of an :class:`Image` or array-like."""
    if isinstance(img, Image):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {arr.shape}")
    return arr


def rng_from_seed(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed and a stream id.

    Philox draws depend only on (seed, stream, draw index), never on
    thread scheduling.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def pad_edge(img, pad: int) -> np.ndarray:
    return np.pad(pixels(img), pad, mode="edge")


def extract_patch(img, center_x: int, center_y: int, side: int) -> np.ndarray:
    """Return the ``side x side`` window around a pixel as a raster-order vector.

    Pixels falling outside the image are filled by edge replication.
    """
    arr = pixels(img)
    if side < 1 or side % 2 == 0:
        raise ValueError(f"patch side must be odd and positive, got {side}")
    h, w = arr.shape
    if not (0 <= center_x < w and 0 <= center_y < h):
        raise ValueError(f"center ({center_x}, {center_y}) outside {w}x{h} image")
    r = side // 2
    ys = np.clip(np.arange(center_y - r, center_y + r + 1), 0, h - 1)
    xs = np.clip(np.arange(center_x - r, center_x + r + 1), 0, w - 1)
    return arr[np.ix_(ys, xs)].ravel()


def extract_patches(img, xs, ys, side: int) -> np.ndarray:
    """Vectorised :func:`extract_patch`; returns an ``(n, side*side)`` array."""
    arr = pixels(img)
    r = side // 2
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    padded = np.pad(arr, r, mode="edge")
    off = np.arange(side)
    rows = ys[:, None, None] + off[None, :, None]
    cols = xs[:, None, None] + off[None, None, :]
    return padded[rows, cols].reshape(len(xs), side * side)


def add_gaussian_noise(img, spec: NoiseSpec) -> Image:
    """Add i.i.d. zero-mean Gaussian noise; the result is not clipped."""
    arr = pixels(img)
    if spec.sigma_v == 0:
        return Image(arr)
    noise = rng_from_seed(spec.seed, stream=1).standard_normal(arr.shape)
    return Image(arr + spec.sigma_v * noise)


def psnr(reference, test) -> float:
    """Peak signal-to-noise ratio in dB against a 255 peak.

    Returns ``math.inf`` when the images are identical.
    """
    a = pixels(reference)
    b = pixels(test)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def bilinear_sample(img, x: float, y: float) -> float:
    arr = pixels(img)
    h, w = arr.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValueError(f"({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")
    return float(sample_clamped(arr, np.array([x]), np.array([y]))[0])


def sample_clamped(arr: np.ndarray, xs, ys) -> np.ndarray:
    """Bilinear sampling at fractional coordinates with edge replication.

    ``xs`` and ``ys`` broadcast against each other; coordinates outside the
    image are clamped to the border before interpolation.
    """
    h, w = arr.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = arr[y0, x0] * (1.0 - fx) + arr[y0, x1] * fx
    bottom = arr[y1, x0] * (1.0 - fx) + arr[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


# --- file I/O ---------------------------------------------------------------


def _read_pgm(raw: bytes, path) -> np.ndarray:
    # P5 header: magic, width, height, maxval separated by whitespace, with
    # optional '#' comments, followed by exactly one whitespace byte.
    tokens = []
    pos = 2
    n = len(raw)
    while len(tokens) < 3:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageIOError(f"{path}: malformed PGM header {tokens!r}") from None
    if width < 1 or height < 1 or not (0 < maxval < 256):
        raise ImageIOError(
            f"{path}: unsupported PGM geometry/depth (w={width}, h={height}, maxval={maxval})"
        )
    pos += 1  # single whitespace after maxval
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise ImageIOError(f"{path}: PGM body has {len(body)} bytes, expected {width * height}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64)


def _rgb_to_luma(arr: np.ndarray) -> np.ndarray:
    # ITU-R BT.601 luma weights.
    arr = arr.astype(np.float64)
    return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]


def load_image(path) -> Image:
    """Load a binary PGM (P5) or an 8-bit PNG as a luminance :class:`Image`.

    Colour PNGs are converted with BT.601 luma weights.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if raw[:2] == b"P5":
        return Image(_read_pgm(raw, path))
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image as PILImage
        import io

        try:
            with PILImage.open(io.BytesIO(raw)) as im:
                im.load()
                mode = im.mode
                if mode in ("L", "P", "RGB", "RGBA", "LA", "I;16", "I"):
                    if mode == "P":
                        im = im.convert("RGB")
                    elif mode == "LA":
                        im = im.convert("L")
                    arr = np.asarray(im)
                else:
                    raise ImageIOError(f"{path}: unsupported PNG mode {mode}")
        except ImageIOError:
            raise
        except Exception as exc:
            raise ImageIOError(f"{path}: malformed PNG ({exc})") from exc
        if arr.ndim == 3:
            arr = _rgb_to_luma(arr[..., :3])
        elif arr.dtype != np.uint8:
            raise ImageIOError(f"{path}: only 8-bit PNG is supported, got {arr.dtype}")
        return Image(arr.astype(np.float64))
    raise ImageIOError(f"{path}: unsupported format (expected binary PGM 'P5' or PNG)")


def quantize(img) -> np.ndarray:
    """Round to the nearest integer in ``[0, 255]`` as ``uint8``."""
    return np.clip(np.rint(pixels(img)), 0, 255).astype(np.uint8)


def save_image(img, path) -> None:
    """Write ``img`` as 8-bit PGM, or PNG when the suffix is ``.png``."""
    path = Path(path)
    data = quantize(img)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image as PILImage

            PILImage.fromarray(data, mode="L").save(path)
            return
        h, w = data.shape
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(data.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def frame_path(directory, index: int) -> Path:
    return Path(directory) / f"frame_{index:06d}.pgm"


def load_frames(directory) -> list[Image]:
    """Load every ``*.pgm`` in ``directory`` in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise ImageIOError(f"{directory}: no PGM frames found")
    return [load_image(p) for p in files]


def save_frames(frames, directory, start: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i, frame in enumerate(frames):
        p = frame_path(directory, start + i)
        save_image(frame, p)
        out.append(p)
    return out
