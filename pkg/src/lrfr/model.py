"""Compact convolutional embedding network and the binary checkpoint format.

The network is a stack of 3x3 stride-2 convolutions with PReLU, a global
average pool and a linear projection. HR and LR images go through the same
parameters. There are no bias terms: with a margin softmax on normalised
features, a shared output offset soaks up the batch-common part of the
gradient and drags every embedding onto one direction early in training.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import GraphError, OpGraph

CKPT_MAGIC = b"LRFRCKPT"
CKPT_VERSION = 1
_DTYPES = {b"f32": np.dtype("<f4"), b"f64": np.dtype("<f8")}


class StaleCacheError(GraphError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    channel_widths: tuple[int, ...] = (16, 32, 64, 128)
    embedding_dim: int = 128
    input_size: int = 112

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        if not self.channel_widths or min(self.channel_widths) < 1:
            raise ValueError("need at least one stage with positive width")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be at least 2")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")


@dataclass
class NetworkParams:
    config: NetworkConfig
    arrays: dict[str, np.ndarray]
    version: int = 0

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)


def param_names(config: NetworkConfig) -> list[str]:
    names = []
    for i in range(len(config.channel_widths)):
        names += [f"conv{i}.weight", f"prelu{i}.slope"]
    return names + ["fc.weight"]


def is_decay_exempt(name: str) -> bool:
    return name.startswith("prelu")


def init_network(config: NetworkConfig, seed, dtype=np.float64) -> NetworkParams:
    """Fan-in scaled normal kernels and PReLU slopes at 0.25."""
    rng = np.random.default_rng(seed)
    arrays = {}
    cin = 3
    for i, cout in enumerate(config.channel_widths):
        fan_in = cin * 9
        arrays[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, 3, 3))
        arrays[f"prelu{i}.slope"] = np.full(cout, 0.25)
        cin = cout
    arrays["fc.weight"] = rng.normal(0.0, np.sqrt(1.0 / cin), (config.embedding_dim, cin))
    return NetworkParams(config, {k: v.astype(dtype) for k, v in arrays.items()})


@lru_cache(maxsize=16)
def build_graph(config: NetworkConfig) -> OpGraph:
    g = OpGraph()
    img = g.input("image")
    # per-image channel centring; keeps the net free of a dominant DC component
    h = g.sub(img, g.mean(img, axis=(1, 2), keepdims=True))
    for i in range(len(config.channel_widths)):
        k = g.input(f"conv{i}.weight", requires_grad=True)
        a = g.input(f"prelu{i}.slope", requires_grad=True)
        h = g.prelu(g.conv2d(h, k, stride=2, padding=1), a)
    pooled = g.global_avg_pool(h)
    w = g.input("fc.weight", requires_grad=True)
    g.output("embedding", g.matmul(pooled, w, transpose_b=True))
    return g


@dataclass
class EmbedCache:
    params: NetworkParams
    version: int
    graph: OpGraph
    trace: object = field(repr=False)


def embed(params: NetworkParams, batch: np.ndarray) -> tuple[np.ndarray, EmbedCache]:
    """Embed a batch of (B, S, S, 3) images; returns unnormalised embeddings."""
    batch = np.asarray(batch)
    s = params.config.input_size
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1:] != (s, s, 3):
        raise ValueError(f"expected images of shape (B, {s}, {s}, 3), got {batch.shape}")
    dtype = params["fc.weight"].dtype
    graph = build_graph(params.config)
    inputs = dict(params.arrays)
    inputs["image"] = batch.astype(dtype, copy=False)
    out = graph.evaluate(inputs)["embedding"]
    return out, EmbedCache(params, params.version, graph, graph.trace)


def network_backward(cache: EmbedCache, grad_embeddings: np.ndarray) -> dict[str, np.ndarray]:
    if cache.version != cache.params.version:
        raise StaleCacheError("parameters changed since this forward pass")
    return cache.graph.backprop({"embedding": grad_embeddings}, cache.trace)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays atomically in the little-endian LRFRCKPT layout."""
    path = os.fspath(path)
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = b"f32" if arr.dtype == np.float32 else b"f64"
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + tag + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an LRFR checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, arrays = 12, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            dtype = _DTYPES[data[pos:pos + 3]]
            pos += 3
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(data):
                raise ValueError("truncated payload")
            arrays[name] = np.frombuffer(data, dtype, count, pos).reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    return arrays


@dataclass
class Checkpoint:
    """Network parameters plus the CosFace class weights and optional extras."""

    params: NetworkParams
    class_weights: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"meta.input_size": np.array(self.params.config.input_size, dtype=np.float64)}
        arrays.update(self.params.arrays)
        arrays["cls.weight"] = self.class_weights
        arrays.update(self.extras)
        return arrays

    def save(self, path) -> None:
        save_arrays(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays = load_arrays(path)
        widths = []
        while f"conv{len(widths)}.weight" in arrays:
            widths.append(arrays[f"conv{len(widths)}.weight"].shape[0])
        if not widths or "fc.weight" not in arrays or "cls.weight" not in arrays:
            raise ValueError(f"{path}: checkpoint lacks network parameters")
        config = NetworkConfig(tuple(widths), arrays["fc.weight"].shape[0],
                               int(arrays.get("meta.input_size", np.array(112))))
        names = param_names(config)
        params = NetworkParams(config, {n: arrays[n] for n in names})
        extras = {k: v for k, v in arrays.items()
                  if k not in names and k not in ("cls.weight", "meta.input_size")}
        return cls(params, arrays["cls.weight"], extras)
