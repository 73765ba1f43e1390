"""Procedural identity-labelled images, a directory loader, and pair sampling.

An identity is a fixed pattern on a grey field. It has three layers:

- 8 to 16 smooth coloured Gaussian blobs;
- two low-frequency colour gratings (2 to 4 cycles per image);
- three fine full-field colour gratings (period 3 to 6 px).

Each sample shows the pattern under a small random rigid motion. It also
adds a per-image illumination nuisance: a colour cast, a linear ramp and two
very-low-frequency colour waves, all scaled by the brightness jitter.

Degradation to 14 px or below wipes out the fine gratings, which are the
easiest identity cue at full resolution. What survives is the coarse layer,
and at low resolution it has to be separated from the illumination nuisance.
A model trained only at full resolution never needs that separation.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageops import read_png, resample_bicubic, write_png

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
BLOB_COUNT = (8, 16)
BLOB_SIGMA = (0.06, 0.12)  # fraction of the image size
BLOB_AMP = 0.06
N_WAVES = 2
WAVE_CYCLES = (2.0, 4.0)  # per image width
WAVE_AMP = 0.10
N_TEXTURES = 3
TEXTURE_PERIOD = (3.0, 6.0)  # px at full resolution
TEXTURE_AMP = 0.15
N_NUISANCE = 2
NUISANCE_CYCLES = (0.25, 0.75)
NUISANCE_GAIN = 1.25  # nuisance wave amplitude per unit of brightness jitter
RAMP_GAIN = 2.0


@dataclass(frozen=True)
class DatasetSpec:
    n_identities: int = 50
    images_per_identity: int = 40
    input_size: int = 112
    translation: float = 4.0  # px, uniform in [-t, t] per axis
    rotation: float = 8.0  # degrees, uniform in [-r, r]
    brightness: float = 0.08  # additive, uniform in [-b, b]
    eval_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 2:
            raise ValueError("need at least 2 identities")
        if self.images_per_identity < 2:
            raise ValueError("need at least 2 images per identity")
        if not 0 <= self.eval_fraction < 1:
            raise ValueError("eval_fraction must lie in [0, 1)")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, S, S, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int identity ids
    is_eval: np.ndarray  # (N,) bool split tag
    names: list[str] | None = None  # identity names, indexed by label

    def __len__(self):
        return len(self.labels)

    @property
    def n_identities(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def split(self, which: str) -> np.ndarray:
        """Indices of the ``"train"`` or ``"eval"`` split."""
        if which == "train":
            return np.flatnonzero(~self.is_eval)
        if which == "eval":
            return np.flatnonzero(self.is_eval)
        raise ValueError(f"unknown split {which!r}")


def _split_mask(count: int, eval_fraction: float) -> np.ndarray:
    n_eval = int(round(count * eval_fraction))
    if count - n_eval < 1:
        n_eval = count - 1
    mask = np.zeros(count, dtype=bool)
    if n_eval > 0:
        mask[count - n_eval:] = True
    return mask


def _identity_pattern(rng: np.random.Generator, size: int) -> dict:
    n = int(rng.integers(BLOB_COUNT[0], BLOB_COUNT[1] + 1))
    waves = [_wave(rng, size, WAVE_AMP, WAVE_CYCLES) for _ in range(N_WAVES)]
    texture_cycles = (size / TEXTURE_PERIOD[1], size / TEXTURE_PERIOD[0])
    waves += [_wave(rng, size, TEXTURE_AMP, texture_cycles) for _ in range(N_TEXTURES)]
    return {
        "centers": rng.uniform(0.15, 0.85, (n, 2)) * size,
        "sigmas": rng.uniform(*BLOB_SIGMA, n) * size,
        "colors": rng.uniform(-BLOB_AMP, BLOB_AMP, (n, 3)),
        "waves": waves,
    }


def _wave(rng: np.random.Generator, size: int, amp: float, cycles) -> dict:
    return {
        "freq": rng.uniform(*cycles) / size,
        "angle": rng.uniform(0, np.pi),
        "phase": rng.uniform(0, 2 * np.pi),
        "color": rng.uniform(-amp, amp, 3),
    }


def _add_wave(img, w, x, y):
    t = x * np.cos(w["angle"]) + y * np.sin(w["angle"])
    img += np.sin(2 * np.pi * w["freq"] * t + w["phase"])[..., None] * w["color"]


def _render(pattern, size: int, shift, angle_deg: float, light: np.ndarray, nuisance=()) -> np.ndarray:
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # inverse rigid motion: sample the pattern at the pre-image of each pixel
    th = np.deg2rad(angle_deg)
    px, py = xx - c - shift[0], yy - c - shift[1]
    qx = np.cos(th) * px + np.sin(th) * py + c
    qy = -np.sin(th) * px + np.cos(th) * py + c
    img = np.full((size, size, 3), 0.5)
    for (mx, my), s, col in zip(pattern["centers"], pattern["sigmas"], pattern["colors"]):
        img += np.exp(-((qx - mx) ** 2 + (qy - my) ** 2) / (2 * s * s))[..., None] * col
    for w in pattern["waves"]:
        _add_wave(img, w, qx, qy)
    # illumination nuisance lives in image coordinates: stray waves, colour cast, linear ramp
    for w in nuisance:
        _add_wave(img, w, xx, yy)
    u, v = (xx - c) / size, (yy - c) / size
    img += light[0:3] + (u * light[3] + v * light[4])[..., None]
    return np.clip(img, 0.0, 1.0)


def generate_dataset(spec: DatasetSpec) -> LabeledDataset:
    n, k, s = spec.n_identities, spec.images_per_identity, spec.input_size
    images = np.empty((n * k, s, s, 3), dtype=np.float32)
    for ident in range(n):
        rng = np.random.default_rng([spec.seed, ident])
        pattern = _identity_pattern(rng, s)
        for j in range(k):
            shift = rng.uniform(-1, 1, 2) * spec.translation
            angle = rng.uniform(-1, 1) * spec.rotation
            light = rng.uniform(-1, 1, 5) * spec.brightness
            light[:3] += rng.uniform(-1, 1) * spec.brightness
            light[3:] *= RAMP_GAIN
            nuisance = [_wave(rng, s, NUISANCE_GAIN * spec.brightness, NUISANCE_CYCLES) for _ in range(N_NUISANCE)]
            images[ident * k + j] = _render(pattern, s, shift, angle, light, nuisance)
    labels = np.repeat(np.arange(n), k)
    is_eval = np.tile(_split_mask(k, spec.eval_fraction), n)
    return LabeledDataset(images, labels, is_eval, [f"id{i:04d}" for i in range(n)])


def save_dataset(ds: LabeledDataset, root) -> Path:
    """Write ``root/<identity>/<image>.png`` plus a manifest of ``identity,filename`` rows."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = ds.names or [f"id{i:04d}" for i in range(ds.n_identities)]
    rows = []
    counters: dict[int, int] = {}
    for img, label in zip(ds.images, ds.labels):
        j = counters.get(int(label), 0)
        counters[int(label)] = j + 1
        ident = names[label]
        (root / ident).mkdir(exist_ok=True)
        fname = f"img{j:04d}.png"
        write_png(root / ident / fname, img)
        rows.append(f"{ident},{fname}")
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(rows) + "\n")
    os.replace(tmp, root / MANIFEST)
    return root


def load_dataset(path, input_size: int = 112, eval_fraction: float = 0.25) -> LabeledDataset:
    """Load ``root/<identity>/<image>.png``; labels follow sorted directory names.

    Within each identity the last ``eval_fraction`` of the sorted files form the
    eval split. Identities with fewer than two images are kept for training
    only and never appear in verification pairs.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    idents = sorted(d for d in root.iterdir() if d.is_dir())
    images, labels, is_eval, names = [], [], [], []
    for ident in idents:
        files = sorted(f for f in ident.iterdir() if f.suffix.lower() == ".png")
        if not files:
            continue
        label = len(names)
        names.append(ident.name)
        if len(files) < 2:
            warnings.warn(f"identity {ident.name!r} has fewer than 2 images; excluded from pairs")
            mask = np.zeros(len(files), dtype=bool)
        else:
            mask = _split_mask(len(files), eval_fraction)
        for f, ev in zip(files, mask):
            img = read_png(f)
            if img.shape[:2] != (input_size, input_size):
                img = resample_bicubic(img, input_size, input_size)
            images.append(img.astype(np.float32))
            labels.append(label)
            is_eval.append(ev)
    if not images:
        raise ValueError(f"no images found under {root}")
    return LabeledDataset(np.stack(images), np.array(labels), np.array(is_eval), names)


@dataclass
class VerificationPairs:
    images: np.ndarray  # shared image pool
    a: np.ndarray  # indices into images
    b: np.ndarray
    same: np.ndarray  # bool

    def __len__(self):
        return len(self.same)

    def swapped(self) -> "VerificationPairs":
        return VerificationPairs(self.images, self.b, self.a, self.same)


def make_pairs(ds: LabeledDataset, n_pairs: int, seed, split: str = "eval") -> VerificationPairs:
    """Balanced positive/negative pairs drawn from one split of ``ds``."""
    idx = ds.split(split)
    labels = ds.labels[idx]
    groups = [idx[labels == c] for c in np.unique(labels)]
    groups = [g for g in groups if len(g) >= 2]
    if len(np.unique(labels)) < 2 or not groups:
        raise ValueError("need at least two identities and one identity with two images")
    rng = np.random.default_rng(seed)
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos

    positives = np.array([(g[i], g[j]) for g in groups for i in range(len(g)) for j in range(i + 1, len(g))])
    pick = rng.choice(len(positives), n_pos, replace=n_pos > len(positives))
    pos = positives[pick].reshape(-1, 2)

    n_cross = (len(idx) ** 2 - sum(np.sum(labels == c) ** 2 for c in np.unique(labels))) // 2
    unique = n_neg <= n_cross
    seen: set[tuple[int, int]] = set()
    neg = []
    while len(neg) < n_neg:
        i, j = rng.choice(idx, 2, replace=True)
        if ds.labels[i] == ds.labels[j]:
            continue
        key = (min(i, j), max(i, j))
        if unique and key in seen:
            continue
        seen.add(key)
        neg.append((i, j))
    neg = np.array(neg, dtype=np.int64).reshape(-1, 2)

    allp = np.concatenate([pos, neg])
    same = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = rng.permutation(len(same))
    return VerificationPairs(ds.images, allp[order, 0], allp[order, 1], same[order])
