"""Siamese HR/LR training with SGD momentum and a step learning-rate schedule."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import LabeledDataset
from .imageops import NO_AUG_PLAN, AugmentationPlan, degrade, sample_resolution
from .losses import LossSpec, total_loss
from .model import (Checkpoint, NetworkConfig, NetworkParams, embed, init_network, is_decay_exempt,
                    network_backward)
from .numerics import NonFiniteError


log = logging.getLogger(__name__)

CLS_KEY = "cls.weight"


class TrainingError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = LossSpec()
    plan: AugmentationPlan = NO_AUG_PLAN
    network: NetworkConfig = NetworkConfig()
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.003
    lr_milestones: tuple[int, ...] = (12, 17)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip_prob: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr milestones must be strictly increasing")
        if self.epochs and ms and ms[-1] >= self.epochs:
            raise ValueError("lr milestones must be smaller than the epoch count")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.plan.input_size != self.network.input_size:
            raise ValueError("augmentation plan and network disagree on input size")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(1 for m in self.lr_milestones if epoch >= m)


@dataclass
class TrainState:
    params: NetworkParams
    class_weights: np.ndarray
    momentum: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0

    def checkpoint(self) -> Checkpoint:
        extras = {f"momentum/{k}": v for k, v in self.momentum.items()}
        extras["state.step"] = np.array(self.step, dtype=np.float64)
        extras["state.epoch"] = np.array(self.epoch, dtype=np.float64)
        return Checkpoint(self.params, self.class_weights, extras)


def init_state(config: TrainConfig, n_classes: int) -> TrainState:
    dtype = np.dtype(config.dtype)
    params = init_network(config.network, config.seed, dtype)
    rng = np.random.default_rng([config.seed, 1])
    w = rng.normal(0.0, 1.0 / np.sqrt(config.network.embedding_dim),
                   (n_classes, config.network.embedding_dim)).astype(dtype)
    mom = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    mom[CLS_KEY] = np.zeros_like(w)
    return TrainState(params, w, mom)


def sgd_update(params: dict, grads: dict, buffers: dict, lr: float, mu: float, wd: float,
               exempt=frozenset()) -> tuple[dict, dict]:
    """One momentum step: ``v <- mu v + g + wd theta``, ``theta <- theta - lr v``.

    Returns fresh dicts; the inputs are left untouched.
    """
    new_p, new_v = {}, {}
    for name, theta in params.items():
        g = grads[name]
        v = buffers[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ValueError(f"{name}: shape mismatch param {theta.shape}, grad {g.shape}, buffer {v.shape}")
        step = g + wd * theta if wd and name not in exempt else g
        v = mu * v + step
        new_v[name] = v.astype(theta.dtype, copy=False)
        new_p[name] = (theta - lr * v).astype(theta.dtype, copy=False)
    return new_p, new_v


def augment_pairs(hr_batch: np.ndarray, plan: AugmentationPlan, flip_prob: float,
                  seed, step: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Flip each HR image (optionally) and build its degraded partner.

    Item ``i`` draws from its own generator seeded by ``(seed, step, i)``, so
    the result does not depend on processing order.
    """
    hr = np.array(hr_batch, copy=True)
    res = []
    for i in range(len(hr)):
        rng = np.random.default_rng([seed, step, i])
        if rng.random() < flip_prob:
            hr[i] = hr[i, :, ::-1]
        res.append(sample_resolution(plan, rng))
    lr = hr.copy()
    res_arr = np.array(res)
    for r in np.unique(res_arr):
        if r != plan.input_size:
            sel = res_arr == r
            lr[sel] = degrade(hr[sel], int(r))
    return hr, lr, res


def compute_gradients(params: NetworkParams, class_weights, hr, lr_imgs, labels, spec: LossSpec):
    """Forward both branches, evaluate the objective and backprop to every parameter."""
    identical = np.array_equal(hr, lr_imgs)
    if identical:
        f, cache = embed(params, hr)
        f_hr = f_lr = f
    else:
        f, cache = embed(params, np.concatenate([hr, lr_imgs]))
        f_hr, f_lr = f[:len(hr)], f[len(hr):]
    res = total_loss(f_hr, f_lr, class_weights, labels, spec)
    if identical:
        seed = res.grad_hr + res.grad_lr
    else:
        seed = np.concatenate([res.grad_hr, res.grad_lr])
    grads = network_backward(cache, seed.astype(f.dtype, copy=False))
    grads[CLS_KEY] = res.grad_weights.astype(class_weights.dtype, copy=False)
    return res, grads


def train_step(state: TrainState, hr_batch, labels, config: TrainConfig, lr: float | None = None):
    if len(hr_batch) == 0:
        raise ValueError("empty batch")
    lr = config.lr_at(state.epoch) if lr is None else lr
    hr, lr_imgs, res = augment_pairs(hr_batch, config.plan, config.flip_prob, config.seed, state.step)
    try:
        out, grads = compute_gradients(state.params, state.class_weights, hr, lr_imgs, labels, config.loss)
    except NonFiniteError as exc:
        record = {"epoch": state.epoch, "step": state.step, "lr": lr, "resolutions": res}
        raise TrainingError(f"non-finite activation at step {state.step}: {exc}", record) from exc
    record = {
        "epoch": state.epoch, "step": state.step, "loss": out.value, "dist": out.dist,
        "cls_hr": out.cls_hr, "cls_lr": out.cls_lr, "lr": lr, "resolutions": res,
    }
    if not np.isfinite(out.value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss or gradient at step {state.step}", record)

    params = dict(state.params.arrays)
    params[CLS_KEY] = state.class_weights
    exempt = frozenset(n for n in params if is_decay_exempt(n))
    new_p, new_v = sgd_update(params, grads, state.momentum, lr, config.momentum, config.weight_decay, exempt)
    cls_w = new_p.pop(CLS_KEY)
    new_params = NetworkParams(state.params.config, new_p, state.params.version + 1)
    return replace(state, params=new_params, class_weights=cls_w, momentum=new_v, step=state.step + 1), record


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step ids must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def epoch_mean(self, epoch: int, key="loss") -> float:
        return float(np.mean([r[key] for r in self.records if r["epoch"] == epoch]))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "step", "loss", "dist", "cls_hr", "cls_lr", "lr", "resolutions"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow([";".join(map(str, r[c])) if c == "resolutions" else r[c] for c in cols])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        for name, text in (("trainlog.jsonl", self.to_jsonl()), ("trainlog.csv", self.to_csv())):
            tmp = out / (name + ".tmp")
            tmp.write_text(text)
            os.replace(tmp, out / name)


def train(config: TrainConfig, dataset: LabeledDataset, out_dir=None, progress=None) -> tuple[Checkpoint, TrainLog]:
    """Train on the train split of ``dataset``.

    When ``out_dir`` is given, checkpoints are written there at every LR
    milestone and at the end (``final.lrfr``), together with the train log.
    """
    train_idx = dataset.split("train")
    if len(train_idx) == 0:
        raise ValueError("dataset has no training images")
    n_classes = int(dataset.labels.max()) + 1
    state = init_state(config, n_classes)
    tlog = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        state = replace(state, epoch=epoch)
        if out is not None and epoch in config.lr_milestones:
            state.checkpoint().save(out / f"epoch{epoch:03d}.lrfr")
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(train_idx)
        lr = config.lr_at(epoch)
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            state, record = train_step(state, dataset.images[idx], dataset.labels[idx], config, lr)
            tlog.append(record)
        if progress is not None:
            progress(epoch, tlog)
        log.info("epoch %d: loss %.4f lr %g", epoch, tlog.epoch_mean(epoch), lr)

    state = replace(state, epoch=config.epochs)
    ckpt = state.checkpoint()
    if out is not None:
        ckpt.save(out / "final.lrfr")
        tlog.write(out)
    return ckpt, tlog
