"""Sectioned ``key = value`` run configuration.

Sections and keys (all optional; omitted keys keep their defaults)::

    [data]     path, n_identities, images_per_identity, input_size,
               translation, rotation, brightness, eval_fraction, seed
    [model]    channel_widths, embedding_dim
    [loss]     distance (l1 | l2 | smooth_l1 | logexp), p, beta, lambda,
               cosface_s, cosface_m
    [augment]  plan ("7:1, 14:1, 20:2" or "none"), flip_prob
    [optim]    epochs, batch_size, lr, milestones, momentum, weight_decay,
               seed, dtype

Unknown sections or keys and unparsable values raise :class:`ConfigError`
naming the offending ``[section] key``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

from .datagen import DatasetSpec
from .imageops import AugmentationPlan
from .losses import LossSpec
from .model import NetworkConfig
from .training import TrainConfig

EXAMPLE = """\
# Reference hyperparameters with the desk-scale schedule.

[data]
# path = faces/          # root/<identity>/<image>.png; omit to generate synthetic data
n_identities = 50
images_per_identity = 40
input_size = 112
translation = 4          # px
rotation = 8             # degrees
brightness = 0.08
eval_fraction = 0.25
seed = 0

[model]
channel_widths = 16, 32, 64, 128
embedding_dim = 128

[loss]
distance = logexp        # l1 | l2 | smooth_l1 | logexp
p = 1
lambda = 1               # weight of the HR/LR feature distance
cosface_s = 48
cosface_m = 0.4

[augment]
plan = 7:1, 14:1, 20:2   # resolution:weight, sampled per image; "none" disables
flip_prob = 0.5

[optim]
epochs = 20
batch_size = 64
lr = 0.003
milestones = 12, 17      # epochs at which lr drops tenfold
momentum = 0.9
weight_decay = 5e-4
seed = 0
dtype = float32
"""


class ConfigError(ValueError):
    def __init__(self, section: str, key: str | None, message: str):
        where = f"[{section}]" + (f" {key}" if key else "")
        super().__init__(f"{where}: {message}")
        self.section = section
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    data: DatasetSpec
    data_path: str | None = None

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed), data=replace(self.data, seed=seed))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())


_SCHEMA = {
    "data": {"path": str, "n_identities": int, "images_per_identity": int, "input_size": int,
             "translation": float, "rotation": float, "brightness": float, "eval_fraction": float, "seed": int},
    "model": {"channel_widths": _ints, "embedding_dim": int},
    "loss": {"distance": str, "p": float, "beta": float, "lambda": float, "cosface_s": float, "cosface_m": float},
    "augment": {"plan": str, "flip_prob": float},
    "optim": {"epochs": int, "batch_size": int, "lr": float, "milestones": _ints, "momentum": float,
              "weight_decay": float, "seed": int, "dtype": str},
}


def _read_sections(text: str, source: str) -> dict[str, dict]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("?", None, f"cannot parse {source}: {exc}") from None
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(section, None, f"unknown section; expected one of {sorted(_SCHEMA)}")
        values = {}
        for key, raw in parser.items(section):
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(section, key, "unknown key")
            try:
                values[key] = conv(raw.strip())
            except ValueError:
                raise ConfigError(section, key, f"invalid value {raw!r}") from None
        out[section] = values
    return out


def _build(section: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(section, None, str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    sections = _read_sections(text, source)
    data = dict(sections.get("data", {}))
    data_path = data.pop("path", None)
    spec = _build("data", DatasetSpec, data)

    model = sections.get("model", {})
    net = _build("model", NetworkConfig, {**model, "input_size": spec.input_size})

    loss = dict(sections.get("loss", {}))
    if "distance" in loss:
        loss["dist_kind"] = loss.pop("distance")
    if "lambda" in loss:
        loss["lam"] = loss.pop("lambda")
    loss_spec = _build("loss", LossSpec, loss)

    aug = sections.get("augment", {})
    plan_text = aug.get("plan", "none")
    try:
        if plan_text.lower() == "none":
            plan = AugmentationPlan(((spec.input_size, 1.0),), spec.input_size)
        else:
            plan = AugmentationPlan.parse(plan_text, spec.input_size)
    except ValueError as exc:
        raise ConfigError("augment", "plan", str(exc)) from None

    optim = dict(sections.get("optim", {}))
    if "milestones" in optim:
        optim["lr_milestones"] = optim.pop("milestones")
    if optim.get("dtype", "float32") not in ("float32", "float64"):
        raise ConfigError("optim", "dtype", "expected float32 or float64")
    optim.setdefault("seed", spec.seed)
    train = _build("optim", TrainConfig, {**optim, "loss": loss_spec, "plan": plan, "network": net,
                                          "flip_prob": aug.get("flip_prob", 0.5)})
    if not 0 <= train.flip_prob <= 1:
        raise ConfigError("augment", "flip_prob", "must lie in [0, 1]")
    return RunConfig(train, spec, data_path)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
