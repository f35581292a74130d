"""Desk-scale corpora and synthetic clips used by the acceptance runs.

The natural-image corpus is assembled from sample photographs bundled with
common Python packages (scikit-image, scikit-learn, sporco, PyWavelets and
matplotlib; the optional ``corpus`` extra), converted to 8-bit luminance
and written as PGM files. Test images are centre crops of five held-out
photographs that never contribute training tiles.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .imgcore import Image, _rgb_to_luma, rng_from_seed, save_image

TEST_SOURCES = ("camera", "astronaut", "coffee", "china", "rocket")
TRAIN_SOURCES = (
    "brick", "cat", "clock", "coins", "grass", "gravel", "immunohistochemistry",
    "retina", "motorcycle", "flower", "barbara", "kodim23", "monarch", "sail",
    "tulips", "aero", "ascent", "hopper",
)
TILE = 256
TEST_CROP = (128, 160)  # height, width


def _luma(arr: np.ndarray) -> np.ndarray:
    return _rgb_to_luma(arr[..., :3]) if arr.ndim == 3 else arr.astype(np.float64)


def _read_bundled(package: str, *parts: str) -> np.ndarray:
    ref = resources.files(package).joinpath(*parts)
    if ref.name.endswith(".npz"):
        with ref.open("rb") as fh, np.load(fh) as data:
            return data[data.files[0]]
    from PIL import Image as PILImage

    with ref.open("rb") as fh, PILImage.open(fh) as im:
        return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)


def load_source(name: str) -> np.ndarray:
    """One bundled sample photograph as a luminance array rounded to 0..255."""
    if name not in TRAIN_SOURCES + TEST_SOURCES:
        raise ValueError(f"unknown corpus image {name!r}")
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image

        arr = load_sample_image(f"{name}.jpg")
    elif name in ("barbara", "kodim23", "monarch", "sail", "tulips"):
        arr = _read_bundled("sporco", "data", f"{name}.png")
    elif name in ("aero", "ascent"):
        arr = _read_bundled("pywt", "data", f"{name}.npz")
    elif name == "hopper":
        arr = _read_bundled("matplotlib", "mpl-data", "sample_data", "grace_hopper.jpg")
    elif name == "motorcycle":
        import skimage.data

        arr = skimage.data.stereo_motorcycle()[0]
    else:
        import skimage.data

        arr = getattr(skimage.data, name)()
    arr = _luma(arr)
    if arr.max() <= 1.0:
        arr = arr * 255.0
    return np.clip(np.rint(arr), 0, 255)


def tiles(arr: np.ndarray, side: int = TILE) -> list[np.ndarray]:
    """Non-overlapping ``side x side`` tiles in raster order (remainders dropped)."""
    h, w = arr.shape
    return [arr[y : y + side, x : x + side] for y in range(0, h - side + 1, side) for x in range(0, w - side + 1, side)]


def centre_crop(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = arr.shape
    if h < height or w < width:
        raise ValueError(f"cannot crop {width}x{height} from {w}x{h}")
    y = h // 2 - height // 2
    x = w // 2 - width // 2
    return arr[y : y + height, x : x + width]


def write_desk_corpus(root) -> tuple[list[Path], list[Path]]:
    """Write ``train/`` tiles and ``test/`` crops below ``root`` as PGM files.

    Returns the train and test path lists. Existing files are overwritten.
    """
    root = Path(root)
    train_dir = root / "train"
    test_dir = root / "test"
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for name in TRAIN_SOURCES:
        for j, t in enumerate(tiles(load_source(name))):
            path = train_dir / f"{name}_{j:02d}.pgm"
            save_image(t, path)
            train.append(path)
    for name in TEST_SOURCES:
        path = test_dir / f"{name}.pgm"
        save_image(centre_crop(load_source(name), *TEST_CROP), path)
        test.append(path)
    return train, test


def smooth_texture(height: int, width: int, seed: int = 0, slope: float = 1.6) -> np.ndarray:
    """Random ``1/f^slope`` texture scaled to [0, 255] and rounded to integers."""
    rng = rng_from_seed(seed, 3)
    noise = rng.standard_normal((height, width))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    radius = np.hypot(fy, fx)
    radius[0, 0] = 1.0
    spectrum = np.fft.rfft2(noise) / radius**slope
    spectrum[0, 0] = 0.0
    tex = np.fft.irfft2(spectrum, s=(height, width))
    tex -= tex.min()
    tex *= 255.0 / max(tex.max(), 1e-12)
    return np.rint(tex)


def translating_clip(n_frames: int = 32, height: int = 96, width: int = 128,
                     step: tuple[int, int] = (2, 0), seed: int = 0) -> list[Image]:
    """Frames cut from one large texture moving by ``step = (dx, dy)`` pixels per frame."""
    dx, dy = step
    span_x = abs(dx) * (n_frames - 1)
    span_y = abs(dy) * (n_frames - 1)
    canvas = smooth_texture(height + span_y, width + span_x, seed)
    frames = []
    for t in range(n_frames):
        # content moves by +step, so the crop window moves by -step
        x = span_x - dx * t if dx >= 0 else -dx * t
        y = span_y - dy * t if dy >= 0 else -dy * t
        frames.append(Image(canvas[y : y + height, x : x + width].copy()))
    return frames
