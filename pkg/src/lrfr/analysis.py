"""Diagnostics over trained checkpoints.

Accuracy-vs-resolution and gradient-norm sweeps, cosine-similarity
histograms, per-dimension HR/LR embedding errors and a PCA projection.
None of these functions modify the checkpoint they are given.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import VerificationPairs
from .imageops import degrade
from .losses import LossSpec
from .model import Checkpoint, embed
from .numerics import GraphError
from .training import CLS_KEY, compute_gradients

N_BINS = 64
N_FOLDS = 10
EMBED_CHUNK = 128


@dataclass
class SweepReport:
    name: str
    resolutions: list[int]
    values: list[float]
    model_id: str = "model"
    seed: int = 0

    def __post_init__(self):
        if len(self.resolutions) != len(self.values):
            raise ValueError("one value per resolution required")
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError("resolutions must be strictly increasing")
        if not all(np.isfinite(self.values)):
            raise ValueError(f"{self.name}: non-finite metric")

    @property
    def argmax(self) -> int:
        """Resolution with the largest metric (the smallest one on ties)."""
        return self.resolutions[int(np.argmax(self.values))]

    def as_dict(self) -> dict:
        return dict(zip(self.resolutions, self.values))

    def rows(self):
        return [("resolution", self.name)] + list(zip(self.resolutions, self.values))


@dataclass
class SimilarityHistogram:
    edges: np.ndarray  # N_BINS + 1 edges over [-1, 1]
    positive: np.ndarray
    negative: np.ndarray
    overlap: float
    resolution: int
    model_id: str = "model"
    seed: int = 0
    name: str = "simhist"

    def rows(self):
        out = [("bin_lo", "bin_hi", "positive", "negative")]
        for lo, hi, p, n in zip(self.edges[:-1], self.edges[1:], self.positive, self.negative):
            out.append((float(lo), float(hi), int(p), int(n)))
        return out


@dataclass
class DimErrorReport:
    per_dim: np.ndarray  # mean |u_hr - u_lr| per embedding dimension
    edges: np.ndarray
    counts: np.ndarray  # histogram of per_dim
    resolution: int
    model_id: str = "model"
    seed: int = 0
    name: str = "dimerror"

    @property
    def mean(self) -> float:
        return float(self.per_dim.mean())

    def rows(self):
        return [("dim", "mean_abs_error")] + [(i, float(v)) for i, v in enumerate(self.per_dim)]


@dataclass
class PCAResult:
    coords: np.ndarray  # (N, k)
    components: np.ndarray  # (k, D) unit rows
    variances: np.ndarray  # (k,) eigenvalues of the covariance
    mean: np.ndarray
    centroids: dict = field(default_factory=dict)  # group -> (k,) centroid in PCA coordinates
    iterations: list[int] = field(default_factory=list)
    name: str = "pca"
    model_id: str = "model"
    seed: int = 0

    def rows(self):
        k = self.coords.shape[1]
        return [tuple(f"pc{i + 1}" for i in range(k))] + [tuple(map(float, r)) for r in self.coords]


# --------------------------------------------------------------------------
# Embedding helpers
# --------------------------------------------------------------------------


def embed_at(params, images: np.ndarray, resolution: int | None = None) -> np.ndarray:
    """Unit-norm embeddings of ``images`` degraded to ``resolution`` px."""
    size = params.config.input_size
    out = []
    for start in range(0, len(images), EMBED_CHUNK):
        chunk = images[start:start + EMBED_CHUNK]
        if resolution is not None and resolution != size:
            chunk = degrade(chunk, resolution)
        f, _ = embed(params, chunk)
        out.append(f.astype(np.float64))
    f = np.concatenate(out) if out else np.zeros((0, params.config.embedding_dim))
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.maximum(norm, 1e-12)


def pair_similarities(params, pairs: VerificationPairs, resolution: int | None = None) -> np.ndarray:
    if len(pairs) == 0:
        raise ValueError("no verification pairs")
    # embed each distinct image once
    used, inverse = np.unique(np.concatenate([pairs.a, pairs.b]), return_inverse=True)
    emb = embed_at(params, pairs.images[used], resolution)
    ea, eb = emb[inverse[:len(pairs)]], emb[inverse[len(pairs):]]
    return np.clip(np.sum(ea * eb, axis=1), -1.0, 1.0)


# --------------------------------------------------------------------------
# Verification accuracy
# --------------------------------------------------------------------------


def best_threshold(sim: np.ndarray, same: np.ndarray) -> tuple[float, float]:
    """Threshold maximising accuracy of ``sim >= t``; returns (threshold, accuracy)."""
    order = np.argsort(sim, kind="stable")
    s, y = sim[order], same[order].astype(np.int64)
    n = len(s)
    # predicting "same" for indices >= i: correct = negatives below i + positives from i on
    neg_below = np.concatenate([[0], np.cumsum(1 - y)])
    pos_from = np.concatenate([np.cumsum(y[::-1])[::-1], [0]])
    correct = neg_below + pos_from
    # only cut between distinct values
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[1:] != s[:-1]
    correct = np.where(valid, correct, -1)
    i = int(np.argmax(correct))
    if i == 0:
        t = -np.inf
    elif i == n:
        t = np.inf
    else:
        t = 0.5 * (s[i - 1] + s[i])
    return t, correct[i] / n


def verification_accuracy(sim: np.ndarray, same: np.ndarray, folds: int = N_FOLDS) -> float:
    """Mean held-out accuracy with the threshold chosen on the other folds."""
    sim, same = np.asarray(sim, dtype=np.float64), np.asarray(same, dtype=bool)
    n = len(sim)
    if n == 0:
        raise ValueError("no verification pairs")
    folds = max(1, min(folds, n))
    bounds = np.linspace(0, n, folds + 1).astype(int)
    accs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        test = np.zeros(n, dtype=bool)
        test[lo:hi] = True
        fit = ~test if folds > 1 else test
        t, _ = best_threshold(sim[fit], same[fit])
        accs.append(np.mean((sim[test] >= t) == same[test]))
    return float(np.mean(accs))


def _unique_report(name, resolutions, values, model_id, seed) -> SweepReport:
    by_res: dict[int, float] = {}
    for r, v in zip(resolutions, values):
        if r in by_res and by_res[r] != v:
            raise RuntimeError(f"{name}: repeated {r} px gave {by_res[r]!r} then {v!r}")
        by_res[r] = v
    keys = sorted(by_res)
    return SweepReport(name, keys, [by_res[k] for k in keys], model_id, seed)


def _check_resolutions(resolutions, size):
    resolutions = [int(r) for r in resolutions]
    if not resolutions:
        raise ValueError("no resolutions given")
    bad = [r for r in resolutions if not 1 <= r <= size]
    if bad:
        raise ValueError(f"resolutions {bad} outside [1, {size}]")
    return resolutions


def resolution_accuracy_sweep(ckpt: Checkpoint, pairs: VerificationPairs, resolutions,
                              model_id="model", seed=0) -> SweepReport:
    """10-fold verification accuracy with both pair members degraded to each resolution."""
    resolutions = _check_resolutions(resolutions, ckpt.params.config.input_size)
    if len(pairs) == 0:
        raise ValueError("no verification pairs")
    values = [verification_accuracy(pair_similarities(ckpt.params, pairs, r), pairs.same) for r in resolutions]
    return _unique_report("accuracy", resolutions, values, model_id, seed)


def gradient_norm_sweep(ckpt: Checkpoint, batch: np.ndarray, labels, resolutions, loss_spec: LossSpec,
                        model_id="model", seed=0) -> SweepReport:
    """Sum over network parameters of the gradient L2 norm, HR batch vs its degraded copy.

    The CosFace class weights are not counted; they are not part of the network.
    """
    size = ckpt.params.config.input_size
    resolutions = _check_resolutions(resolutions, size)
    batch = np.asarray(batch)
    labels = np.asarray(labels)
    params = ckpt.params
    values = []
    for r in resolutions:
        lr = degrade(batch, r) if r != size else batch
        try:
            _, grads = compute_gradients(params, ckpt.class_weights, batch, lr, labels, loss_spec)
        except GraphError as exc:
            raise FloatingPointError(f"gradient sweep failed at {r} px: {exc}") from exc
        total = 0.0
        for name, g in grads.items():
            if name == CLS_KEY:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name} at {r} px")
            total += float(np.linalg.norm(g.astype(np.float64)))
        values.append(total)
    return _unique_report("gradnorm", resolutions, values, model_id, seed)


# --------------------------------------------------------------------------
# Similarity distributions and per-dimension errors
# --------------------------------------------------------------------------


def overlap_coefficient(pos_counts, neg_counts) -> float:
    p = np.asarray(pos_counts, dtype=np.float64)
    n = np.asarray(neg_counts, dtype=np.float64)
    if p.sum() == 0 or n.sum() == 0:
        raise ValueError("overlap needs both positive and negative pairs")
    return float(np.minimum(p / p.sum(), n / n.sum()).sum())


def similarity_distributions(ckpt: Checkpoint, pairs: VerificationPairs, resolution: int,
                             model_id="model", seed=0) -> SimilarityHistogram:
    if len(pairs) == 0:
        raise ValueError("no verification pairs")
    sim = pair_similarities(ckpt.params, pairs, resolution)
    edges = np.linspace(-1.0, 1.0, N_BINS + 1)
    pos, _ = np.histogram(sim[pairs.same], edges)
    neg, _ = np.histogram(sim[~pairs.same], edges)
    return SimilarityHistogram(edges, pos, neg, overlap_coefficient(pos, neg), resolution, model_id, seed)


def per_dim_error(ckpt: Checkpoint, probe_images: np.ndarray, resolution: int, bins: int = 20,
                  model_id="model", seed=0) -> DimErrorReport:
    """Mean ``|u_hr,i - u_lr,i|`` per dimension over unit-norm embeddings."""
    if len(probe_images) == 0:
        raise ValueError("empty probe set")
    u_hr = embed_at(ckpt.params, probe_images)
    u_lr = embed_at(ckpt.params, probe_images, resolution)
    per_dim = np.abs(u_hr - u_lr).mean(axis=0)
    counts, edges = np.histogram(per_dim, bins)
    return DimErrorReport(per_dim, edges, counts, resolution, model_id, seed)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


def pca_project(embeddings: np.ndarray, k: int, seed=0, groups=None, tol: float = 1e-9,
                max_iter: int = 1000) -> PCAResult:
    """Top-``k`` principal components by power iteration with deflation.

    Each component is oriented so that its largest-magnitude entry is
    positive. ``groups`` (one label per row) yields per-group centroids in
    the projected coordinates.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    n, d = x.shape
    if not 1 <= k < n or k > d:
        raise ValueError(f"need 1 <= k < N and k <= D, got k={k}, N={n}, D={d}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    scale = max(np.trace(cov), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)
    comps, lams, iters = [], [], []
    work = cov.copy()
    for i in range(k):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for it in range(1, max_iter + 1):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                raise ValueError(f"covariance has rank {i} < k={k}")
            w /= norm
            if w @ v < 0:
                w = -w  # undo sign flips from negative Rayleigh quotients
            delta = np.linalg.norm(w - v)
            v = w
            lam = float(v @ work @ v)
            if delta < tol:
                break
        if lam <= 1e-12 * scale:
            raise ValueError(f"covariance has rank {i} < k={k}")
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        lams.append(lam)
        iters.append(it)
        work = work - lam * np.outer(v, v)
    components = np.array(comps)
    coords = xc @ components.T
    centroids = {}
    if groups is not None:
        groups = np.asarray(groups)
        if len(groups) != n:
            raise ValueError("one group label per embedding required")
        for g in np.unique(groups):
            centroids[g.item() if hasattr(g, "item") else g] = coords[groups == g].mean(axis=0)
    return PCAResult(coords, components, np.array(lams), mean, centroids, iters)


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_report(report, out_dir) -> tuple[Path, Path]:
    """Write ``<report>_<model-id>_<seed>.csv`` and ``.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report.name}_{report.model_id}_{report.seed}"
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(report.rows())
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    _atomic_write(csv_path, buf.getvalue())
    payload = _jsonable(asdict(report))
    if isinstance(report, SimilarityHistogram):
        payload["overlap"] = report.overlap
    if isinstance(report, DimErrorReport):
        payload["mean"] = report.mean
    _atomic_write(json_path, json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path
