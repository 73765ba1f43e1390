"""Embedding distances, CosFace, and the combined Siamese objective.

Every function returns its value together with analytic gradients. Distance
functions accept a single pair of vectors ``(D,)`` or a batch ``(B, D)``;
batched values are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NORM_EPS

EXP_CLAMP = 50.0
DIST_KINDS = ("l1", "l2", "smooth_l1", "logexp")


@dataclass(frozen=True)
class LossSpec:
    dist_kind: str = "logexp"
    p: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    cosface_s: float = 48.0
    cosface_m: float = 0.4

    def __post_init__(self):
        if self.dist_kind not in DIST_KINDS:
            raise ValueError(f"unknown distance kind {self.dist_kind!r}; expected one of {DIST_KINDS}")
        if self.p <= 0:
            raise ValueError("p must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.cosface_s <= 0:
            raise ValueError("CosFace scale must be positive")
        if not 0 <= self.cosface_m < 1:
            raise ValueError("CosFace margin must lie in [0, 1)")


@dataclass
class DistResult:
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    per_row: np.ndarray | None = None  # batched calls: the unaveraged values


def _diff(x, y):
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] == 0:
        raise ValueError(f"expected (D,) or (B, D) inputs, got {x.shape}")
    return x - y


def _reduce(per_row, grad, d):
    # per_row: (...,) values; grad: d value_row / d x, shaped like d
    if d.ndim == 1:
        return DistResult(float(per_row), grad, -grad)
    b = d.shape[0]
    grad = grad / b
    return DistResult(float(np.mean(per_row)), grad, -grad, per_row)


def dist_l1(x, y) -> DistResult:
    d = _diff(x, y)
    n = d.shape[-1]
    return _reduce(np.abs(d).sum(-1) / n, np.sign(d) / n, d)


def dist_l2(x, y) -> DistResult:
    d = _diff(x, y)
    n = d.shape[-1]
    return _reduce((d * d).sum(-1) / (2 * n), d / n, d)


def dist_smooth_l1(x, y, beta=1.0) -> DistResult:
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = _diff(x, y)
    n = d.shape[-1]
    a = np.abs(d)
    quad = a < beta
    h = np.where(quad, d * d / (2 * beta), a - beta / 2)
    g = np.where(quad, d / beta, np.sign(d))
    return _reduce(h.sum(-1) / n, g / n, d)


def dist_logexp(x, y, p=1.0) -> DistResult:
    """``log(1 + sum_i (exp(|x_i - y_i|^p) - 1)) / (p D)``.

    The derivative of one coordinate is damped by the exponentiated error of
    all the others, so dimensions with large errors dominate the update. At
    ``x_i == y_i`` the gradient is taken as 0.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    d = _diff(x, y)
    n = d.shape[-1]
    a = np.abs(d)
    ap = np.minimum(a ** p, EXP_CLAMP)
    em1 = np.expm1(ap)
    total = em1.sum(-1, keepdims=True)  # S - 1
    per_row = np.log1p(total)[..., 0] / (p * n)
    with np.errstate(divide="ignore", invalid="ignore"):
        dpow = np.where(a > 0, p * a ** (p - 1), 0.0)
    dpow = np.where(a ** p > EXP_CLAMP, 0.0, dpow)
    grad = np.sign(d) * (em1 + 1) * dpow / ((1 + total) * p * n)
    return _reduce(per_row, grad, d)


def logexp_grad_magnitude(x, y, p=1.0) -> np.ndarray:
    """``|d dist_logexp / d x_i|`` as a one-sided slope, defined at ``x_i == y_i`` too.

    ``dist_logexp`` returns 0 for coordinates with zero error; this gives the
    magnitude of the slope on either side, ``e^{|d_i|^p} |d_i|^{p-1} / ((1 + S) D)``.
    For ``p < 1`` a zero coordinate has an infinite slope.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    d = _diff(x, y)
    n = d.shape[-1]
    a = np.abs(d)
    ap = np.minimum(a ** p, EXP_CLAMP)
    total = np.expm1(ap).sum(-1, keepdims=True)
    with np.errstate(divide="ignore"):
        dpow = p * a ** (p - 1) if p != 1 else np.ones_like(a)
    dpow = np.where(a ** p > EXP_CLAMP, 0.0, dpow)
    return np.exp(ap) * dpow / ((1 + total) * p * n)


def distance(x, y, spec: LossSpec) -> DistResult:
    if spec.dist_kind == "l1":
        return dist_l1(x, y)
    if spec.dist_kind == "l2":
        return dist_l2(x, y)
    if spec.dist_kind == "smooth_l1":
        return dist_smooth_l1(x, y, spec.beta)
    return dist_logexp(x, y, spec.p)


def l2_normalize(f, eps=NORM_EPS):
    """Row-normalise ``f``; returns the unit vectors and the inverse norms.

    Norms below ``eps`` are clamped, so zero rows map to zero instead of NaN.
    """
    norm = np.sqrt(np.sum(f * f, axis=-1, keepdims=True))
    r = 1.0 / np.maximum(norm, eps)
    return f * r, r


def l2_normalize_backward(f, r, g, eps=NORM_EPS):
    clamped = np.sqrt(np.sum(f * f, axis=-1, keepdims=True)) < eps
    cubic = np.where(clamped, 0, r ** 3)
    return r * g - cubic * f * np.sum(f * g, axis=-1, keepdims=True)


@dataclass
class CosFaceResult:
    value: float
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray
    cosine: np.ndarray


def cosface_loss(embeddings, class_weights, labels, s=48.0, m=0.4) -> CosFaceResult:
    """Additive-cosine-margin softmax cross entropy, averaged over the batch."""
    f = np.asarray(embeddings)
    w = np.asarray(class_weights)
    labels = np.asarray(labels, dtype=np.int64)
    if f.ndim != 2 or w.ndim != 2 or f.shape[1] != w.shape[1]:
        raise ValueError(f"incompatible shapes: embeddings {f.shape}, class weights {w.shape}")
    b, k = f.shape[0], w.shape[0]
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if b == 0 or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")

    fn, rf = l2_normalize(f)
    wn, rw = l2_normalize(w)
    cos = fn @ wn.T
    rows = np.arange(b)
    logits = s * cos
    logits[rows, labels] -= s * m
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(lse - shifted[rows, labels]))

    prob = np.exp(shifted - lse[:, None])
    prob[rows, labels] -= 1.0
    dcos = prob * (s / b)
    dfn = dcos @ wn
    dwn = dcos.T @ fn
    return CosFaceResult(value, l2_normalize_backward(f, rf, dfn), l2_normalize_backward(w, rw, dwn), cos)


@dataclass
class TotalLossResult:
    value: float
    dist: float
    cls_hr: float
    cls_lr: float
    grad_hr: np.ndarray
    grad_lr: np.ndarray
    grad_weights: np.ndarray


def total_loss(f_hr, f_lr, class_weights, labels, spec: LossSpec) -> TotalLossResult:
    """``lam * dist(unit(f_hr), unit(f_lr)) + cls(f_hr) / 2 + cls(f_lr) / 2``."""
    f_hr, f_lr = np.asarray(f_hr), np.asarray(f_lr)
    if f_hr.shape != f_lr.shape or f_hr.ndim != 2:
        raise ValueError(f"embedding shapes disagree: {f_hr.shape} vs {f_lr.shape}")
    u_hr, r_hr = l2_normalize(f_hr)
    u_lr, r_lr = l2_normalize(f_lr)
    dist = distance(u_hr, u_lr, spec)
    hr = cosface_loss(f_hr, class_weights, labels, spec.cosface_s, spec.cosface_m)
    lr = cosface_loss(f_lr, class_weights, labels, spec.cosface_s, spec.cosface_m)

    grad_hr = 0.5 * hr.grad_embeddings
    grad_lr = 0.5 * lr.grad_embeddings
    if spec.lam:
        grad_hr = grad_hr + spec.lam * l2_normalize_backward(f_hr, r_hr, dist.grad_x)
        grad_lr = grad_lr + spec.lam * l2_normalize_backward(f_lr, r_lr, dist.grad_y)
    value = spec.lam * dist.value + 0.5 * hr.value + 0.5 * lr.value
    return TotalLossResult(value, dist.value, hr.value, lr.value, grad_hr, grad_lr,
                           0.5 * (hr.grad_weights + lr.grad_weights))
