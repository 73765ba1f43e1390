"""Bicubic degradation, multi-resolution sampling, difficulty tiers and SSIM.

Images are float arrays of shape (H, W, 3) with values in [0, 1]; batches
are (B, H, W, 3). Every function here is pure.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image

KEYS_A = -0.5
INPUT_SIZE = 112


def keys_kernel(x, a=KEYS_A):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=256)
def _weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix along one axis.

    Pixel centres are aligned (half-pixel convention). When shrinking, the
    kernel is stretched by the scale factor so it also acts as the
    anti-aliasing filter. Taps falling outside the image are clamped to the
    nearest edge pixel, and each row is normalised to sum to one.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(np.floor(center - 2 * support))
        hi = int(np.ceil(center + 2 * support))
        taps = np.arange(lo, hi + 1)
        w = keys_kernel((taps - center) / support)
        w /= w.sum()
        np.add.at(m[o], np.clip(taps, 0, n_in - 1), w)
    m.setflags(write=False)
    return m


def resample_bicubic(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize an image (or a batch of images) with separable bicubic filtering."""
    img = np.asarray(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = img.shape[-3], img.shape[-2]
    if h == 0 or w == 0:
        raise ValueError("cannot resample an empty image")
    if (h, w) == (out_h, out_w):
        return np.clip(img, 0.0, 1.0)
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float64
    mh = _weights(h, out_h).astype(dtype, copy=False)
    mw = _weights(w, out_w).astype(dtype, copy=False)
    x = img.astype(dtype, copy=False)
    lead = x.shape[:-3]
    c = x.shape[-1]
    x = x.reshape((-1, h, w * c))
    # rows, then columns
    x = (mh @ x).reshape(-1, w, c)
    out = (mw @ x).reshape(lead + (out_h, out_w, c))
    return np.clip(out, 0.0, 1.0)


def degrade(img: np.ndarray, r: int) -> np.ndarray:
    """Down-sample a square image to ``r`` px and back up to its original size."""
    img = np.asarray(img)
    size = img.shape[-2]
    if img.shape[-3] != size:
        raise ValueError(f"degrade expects square images, got {img.shape[-3]}x{size}")
    if not 1 <= r <= size:
        raise ValueError(f"degradation resolution {r} outside [1, {size}]")
    if r == size:
        return np.clip(img, 0.0, 1.0)
    small = resample_bicubic(img, r, r)
    return resample_bicubic(small, size, size)


class DifficultyTier(enum.Enum):
    EXTREMELY_HARD = "extremely_hard"
    HARD = "hard"
    SEMI_HARD = "semi_hard"
    NOT_AUGMENTED = "not_augmented"


def classify_difficulty(r: int) -> DifficultyTier:
    if r < 12:
        return DifficultyTier.EXTREMELY_HARD
    if r < 20:
        return DifficultyTier.HARD
    if r <= 32:
        return DifficultyTier.SEMI_HARD
    return DifficultyTier.NOT_AUGMENTED


@dataclass(frozen=True)
class AugmentationPlan:
    """Degradation resolutions with relative sampling weights."""

    entries: tuple[tuple[int, float], ...]
    input_size: int = INPUT_SIZE

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((int(r), float(w)) for r, w in self.entries))
        for r, w in self.entries:
            if not 1 <= r <= self.input_size:
                raise ValueError(f"resolution {r} outside [1, {self.input_size}]")
            if w < 0:
                raise ValueError(f"negative weight for {r} px")
        if self.entries and sum(w for _, w in self.entries) <= 0:
            raise ValueError("plan weights must sum to a positive value")

    @classmethod
    def parse(cls, text: str, input_size: int = INPUT_SIZE) -> "AugmentationPlan":
        """Parse ``"7:1, 14:1, 20:2"``."""
        entries = []
        for item in text.replace(";", ",").split(","):
            item = item.strip()
            if not item:
                continue
            r, _, w = item.partition(":")
            entries.append((int(r), float(w) if w else 1.0))
        return cls(tuple(entries), input_size)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(r for r, _ in self.entries)

    @property
    def probabilities(self) -> np.ndarray:
        w = np.array([w for _, w in self.entries], dtype=np.float64)
        return w / w.sum()

    def __str__(self):
        return ", ".join(f"{r}:{w:g}" for r, w in self.entries)


MAUG_PLAN = AugmentationPlan(((7, 1.0), (14, 1.0), (20, 2.0)))
NO_AUG_PLAN = AugmentationPlan(((INPUT_SIZE, 1.0),))


def sample_resolution(plan: AugmentationPlan, rng: np.random.Generator) -> int:
    if not plan.entries:
        raise ValueError("cannot sample from an empty augmentation plan")
    i = rng.choice(len(plan.entries), p=plan.probabilities)
    return plan.entries[i][0]


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _gaussian_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    k = len(g)
    rows = sum(g[i] * x[i:x.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[:, i:rows.shape[1] - k + 1 + i] for i in range(k))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the luminance channels over all valid 11x11 Gaussian windows."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[:2]} smaller than the {SSIM_WINDOW}px window")
    x, y = luminance(a), luminance(b)
    g = _gaussian_1d()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# PNG interchange
# --------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_png(path, img: np.ndarray) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    Image.fromarray(to_uint8(img)).save(tmp, format="PNG")
    os.replace(tmp, path)
