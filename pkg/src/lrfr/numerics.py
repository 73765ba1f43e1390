"""Dense tensor arithmetic over a fixed op set with reverse-mode gradients.

Graphs are built symbolically once and evaluated many times::

    g = OpGraph()
    x = g.input("x", requires_grad=True)
    w = g.input("w")
    g.output("out", g.sum(g.mul(g.l2_normalize(x), w)))
    g.evaluate({"x": xv, "w": wv})
    grads = g.backprop()

Tensors are plain numpy arrays. Every op keeps the dtype of its inputs, so
gradient checks run in float64 while training can run in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-12


class GraphError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class MissingCacheError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...] = ()
    attrs: Mapping = field(default_factory=dict)
    name: str | None = None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sign(x):
    # np.sign already maps 0 -> 0, which is the subgradient we want for |x|.
    return np.sign(x)


# --------------------------------------------------------------------------
# Primitive forward/backward rules.
#
# forward(values, attrs) -> (out, cache)
# backward(grad_out, values, out, cache, attrs, need) -> list of input grads
# --------------------------------------------------------------------------


def _add_fwd(v, a):
    return v[0] + v[1], None


def _add_bwd(g, v, out, c, a, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(g, v[1].shape) if need[1] else None]


def _sub_fwd(v, a):
    return v[0] - v[1], None


def _sub_bwd(g, v, out, c, a, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(-g, v[1].shape) if need[1] else None]


def _mul_fwd(v, a):
    return v[0] * v[1], None


def _mul_bwd(g, v, out, c, a, need):
    return [_unbroadcast(g * v[1], v[0].shape) if need[0] else None,
            _unbroadcast(g * v[0], v[1].shape) if need[1] else None]


def _scale_fwd(v, a):
    return v[0] * a["c"], None


def _scale_bwd(g, v, out, c, a, need):
    return [g * a["c"]]


def _shift_fwd(v, a):
    return v[0] + a["c"], None


def _shift_bwd(g, v, out, c, a, need):
    return [g]


def _matmul_fwd(v, a):
    x, w = v
    if a.get("transpose_b"):
        if x.shape[-1] != w.shape[-1]:
            raise ValueError
        return x @ w.T, None
    if x.shape[-1] != w.shape[0]:
        raise ValueError
    return x @ w, None


def _matmul_bwd(g, v, out, c, a, need):
    x, w = v
    if a.get("transpose_b"):
        gx = g @ w if need[0] else None
        gw = g.T @ x if need[1] else None
    else:
        gx = g @ w.T if need[0] else None
        gw = x.T @ g if need[1] else None
    return [gx, gw]


def _conv_geometry(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _conv2d_fwd(v, a):
    # x: (B, H, W, Cin) ; kernel: (Cout, Cin, k, k)
    x, kern = v
    stride, pad = a["stride"], a["padding"]
    if x.ndim != 4 or kern.ndim != 4 or kern.shape[1] != x.shape[3] or kern.shape[2] != kern.shape[3]:
        raise ValueError
    b, h, w, cin = x.shape
    cout, _, k, _ = kern.shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # (B, ho, wo, Cin, k, k)
    cols = win.reshape(b * ho * wo, cin * k * k)
    wmat = kern.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout)
    return out, cols


def _conv2d_bwd(g, v, out, cols, a, need):
    x, kern = v
    stride, pad = a["stride"], a["padding"]
    b, h, w, cin = x.shape
    cout, _, k, _ = kern.shape
    ho, wo = g.shape[1], g.shape[2]
    g2 = g.reshape(-1, cout)
    gk = (g2.T @ cols).reshape(kern.shape) if need[1] else None
    gx = None
    if need[0]:
        dcols = (g2 @ kern.reshape(cout, -1)).reshape(b, ho, wo, cin, k, k)
        dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, cin), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
        gx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
    return [gx, gk]


def _prelu_fwd(v, a):
    x, slope = v
    if slope.ndim != 1 or slope.shape[0] != x.shape[-1]:
        raise ValueError
    factor = np.where(x > 0, x.dtype.type(1), slope)
    return x * factor, factor


def _prelu_bwd(g, v, out, factor, a, need):
    x, slope = v
    gx = g * factor if need[0] else None
    gs = None
    if need[1]:
        gs = (g * np.minimum(x, 0)).reshape(-1, x.shape[-1]).sum(axis=0)
    return [gx, gs]


def _abs_fwd(v, a):
    return np.abs(v[0]), None


def _abs_bwd(g, v, out, c, a, need):
    return [g * _sign(v[0])]


def _exp_fwd(v, a):
    with np.errstate(over="ignore"):
        return np.exp(v[0]), None


def _exp_bwd(g, v, out, c, a, need):
    return [g * out]


def _log_fwd(v, a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(v[0]), None


def _log_bwd(g, v, out, c, a, need):
    return [g / v[0]]


def _sum_fwd(v, a):
    return np.sum(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False)), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_bwd(g, v, out, c, a, need):
    return [np.array(_expand_reduced(g, v[0].shape, a.get("axis"), a.get("keepdims", False)))]


def _mean_fwd(v, a):
    return np.mean(v[0], axis=a.get("axis"), keepdims=a.get("keepdims", False)), None


def _mean_bwd(g, v, out, c, a, need):
    x = v[0]
    axis = a.get("axis")
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return [_expand_reduced(g, x.shape, axis, a.get("keepdims", False)) / n]


def _square_fwd(v, a):
    return v[0] * v[0], None


def _square_bwd(g, v, out, c, a, need):
    return [2 * g * v[0]]


def _sqrt_fwd(v, a):
    with np.errstate(invalid="ignore"):
        return np.sqrt(v[0]), None


def _sqrt_bwd(g, v, out, c, a, need):
    with np.errstate(divide="ignore"):
        return [g / (2 * out)]


def _l2n_fwd(v, a):
    x = v[0]
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    guarded = norm < a["eps"]
    r = 1.0 / np.maximum(norm, a["eps"])
    return x * r, (r, guarded)


def _l2n_bwd(g, v, out, cache, a, need):
    # d(x r)/dx = r I - r^3 x x^T, or r I where the norm is clamped
    x = v[0]
    r, guarded = cache
    dot = np.sum(x * g, axis=-1, keepdims=True)
    return [r * g - np.where(guarded, 0, r ** 3) * x * dot]


def _gap_fwd(v, a):
    x = v[0]
    if x.ndim != 4:
        raise ValueError
    return x.mean(axis=(1, 2)), None


def _gap_bwd(g, v, out, c, a, need):
    x = v[0]
    hw = x.shape[1] * x.shape[2]
    return [np.broadcast_to((g / hw)[:, None, None, :], x.shape).copy()]


def _identity_fwd(v, a):
    return v[0], None


def _identity_bwd(g, v, out, c, a, need):
    return [g]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "shift": (_shift_fwd, _shift_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "prelu": (_prelu_fwd, _prelu_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "square": (_square_fwd, _square_bwd),
    "sqrt": (_sqrt_fwd, _sqrt_bwd),
    "l2_normalize": (_l2n_fwd, _l2n_bwd),
    "global_avg_pool": (_gap_fwd, _gap_bwd),
    "identity": (_identity_fwd, _identity_bwd),
}

PRIMITIVES = tuple(_OPS)


@dataclass
class Trace:
    """Forward cache produced by :meth:`OpGraph.evaluate`."""

    inputs: dict[str, np.ndarray]
    values: list
    caches: list
    outputs: dict[str, np.ndarray]


class OpGraph:
    """Acyclic graph of primitive ops.

    Nodes are appended in construction order, which is always a valid
    topological order since an op can only reference existing nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.requires_grad: dict[str, bool] = {}
        self._trace: Trace | None = None

    # -- construction ------------------------------------------------------

    def _push(self, op, inputs=(), name=None, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: unknown input node {i}")
        node = Node(len(self.nodes), op, tuple(inputs), attrs, name)
        self.nodes.append(node)
        return node.id

    def input(self, name, requires_grad=False):
        if name in self.leaves:
            raise GraphError(f"duplicate input name {name!r}")
        nid = self._push("input", name=name)
        self.leaves[name] = nid
        self.requires_grad[name] = requires_grad
        return nid

    def output(self, name, node):
        self.outputs[name] = node
        return node

    def add(self, a, b):
        return self._push("add", (a, b))

    def sub(self, a, b):
        return self._push("sub", (a, b))

    def mul(self, a, b):
        return self._push("mul", (a, b))

    def scale(self, a, c):
        return self._push("scale", (a,), c=float(c))

    def shift(self, a, c):
        """Add a scalar constant."""
        return self._push("shift", (a,), c=float(c))

    def matmul(self, a, b, transpose_b=False):
        return self._push("matmul", (a, b), transpose_b=transpose_b)

    def conv2d(self, x, kernel, stride=1, padding=0):
        return self._push("conv2d", (x, kernel), stride=int(stride), padding=int(padding))

    def prelu(self, x, slope):
        return self._push("prelu", (x, slope))

    def abs(self, a):
        return self._push("abs", (a,))

    def exp(self, a):
        return self._push("exp", (a,))

    def log(self, a):
        return self._push("log", (a,))

    def sum(self, a, axis=None, keepdims=False):
        return self._push("sum", (a,), axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self._push("mean", (a,), axis=axis, keepdims=keepdims)

    def square(self, a):
        return self._push("square", (a,))

    def sqrt(self, a):
        return self._push("sqrt", (a,))

    def l2_normalize(self, a, eps=NORM_EPS):
        return self._push("l2_normalize", (a,), eps=float(eps))

    def global_avg_pool(self, a):
        return self._push("global_avg_pool", (a,))

    def identity(self, a):
        return self._push("identity", (a,))

    # -- execution ---------------------------------------------------------

    def _needs_grad(self):
        need = [False] * len(self.nodes)
        for node in self.nodes:
            if node.op == "input":
                need[node.id] = self.requires_grad[node.name]
            else:
                need[node.id] = any(need[i] for i in node.inputs)
        return need

    def evaluate(self, inputs: Mapping[str, np.ndarray], check_finite=True) -> dict[str, np.ndarray]:
        missing = set(self.leaves) - set(inputs)
        if missing:
            raise GraphError(f"missing graph inputs: {sorted(missing)}")
        values: list = [None] * len(self.nodes)
        caches: list = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op == "input":
                values[node.id] = np.asarray(inputs[node.name])
                continue
            args = [values[i] for i in node.inputs]
            fwd = _OPS[node.op][0]
            try:
                out, cache = fwd(args, node.attrs)
            except ValueError:
                shapes = ", ".join(str(a.shape) for a in args)
                raise ShapeError(f"node {node.id} ({node.op}): incompatible shapes {shapes}") from None
            out = np.asarray(out)
            if check_finite and not np.all(np.isfinite(out)):
                raise NonFiniteError(f"node {node.id} ({node.op}) produced non-finite values", node.id)
            values[node.id] = out
            caches[node.id] = cache
        outputs = {name: values[nid] for name, nid in self.outputs.items()}
        self._trace = Trace(dict(inputs), values, caches, outputs)
        return outputs

    @property
    def trace(self) -> Trace | None:
        return self._trace

    def backprop(self, seed_grads=None, trace: Trace | None = None) -> dict[str, np.ndarray]:
        """Propagate ``seed_grads`` (output name -> gradient) back to the leaves.

        A bare array is accepted when the graph has one output; ``None`` seeds a
        scalar output with 1.
        """
        trace = trace or self._trace
        if trace is None:
            raise MissingCacheError("backprop called before evaluate")
        if not isinstance(seed_grads, Mapping):
            if len(self.outputs) != 1:
                raise GraphError("graph has several outputs; pass a dict of seed gradients")
            (name,) = self.outputs
            seed_grads = {name: seed_grads}
        values = trace.values
        grads: list = [None] * len(self.nodes)
        for name, seed in seed_grads.items():
            nid = self.outputs[name]
            out = values[nid]
            seed = np.ones_like(out) if seed is None else np.asarray(seed, dtype=out.dtype)
            if seed.shape != out.shape:
                raise ShapeError(f"seed gradient for {name!r} has shape {seed.shape}, output is {out.shape}")
            grads[nid] = seed if grads[nid] is None else grads[nid] + seed

        need = self._needs_grad()
        for node in reversed(self.nodes):
            g = grads[node.id]
            if g is None or node.op == "input" or not need[node.id]:
                continue
            args = [values[i] for i in node.inputs]
            in_need = [need[i] for i in node.inputs]
            bwd = _OPS[node.op][1]
            in_grads = bwd(g, args, values[node.id], trace.caches[node.id], node.attrs, in_need)
            for i, gi, ni in zip(node.inputs, in_grads, in_need):
                if not ni or gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi

        result = {}
        for name, nid in self.leaves.items():
            if self.requires_grad[name]:
                g = grads[nid]
                result[name] = np.zeros_like(values[nid]) if g is None else np.asarray(g)
        return result


def evaluate(graph: OpGraph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return graph.evaluate(inputs)


def backprop(graph: OpGraph, inputs: Mapping[str, np.ndarray], seed_grad=None) -> dict[str, np.ndarray]:
    """Backprop through ``graph`` using the cache left by ``evaluate(graph, inputs)``."""
    trace = graph.trace
    if trace is None:
        raise MissingCacheError("no forward cache: call evaluate first")
    for name, value in inputs.items():
        cached = trace.inputs.get(name)
        if cached is None or (cached is not value and not np.array_equal(cached, value)):
            raise MissingCacheError(f"forward cache was computed for different value of {name!r}")
    return graph.backprop(seed_grad, trace)


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradReport:
    """Comparison of analytic gradients against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """

    max_rel_error: dict[str, float]
    max_abs_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def table(self) -> str:
        lines = [f"{'parameter':<24}{'max rel':>12}{'max abs':>12}  status"]
        for name in self.max_rel_error:
            rel, ab = self.max_rel_error[name], self.max_abs_error[name]
            status = "ok" if rel <= self.tolerance else "FAIL"
            lines.append(f"{name:<24}{rel:>12.3e}{ab:>12.3e}  {status}")
        return "\n".join(lines)


def central_difference(f: Callable[[dict], float], inputs: Mapping[str, np.ndarray], name: str,
                       epsilon: float, coords=None) -> np.ndarray:
    """Central-difference estimate of d f / d inputs[name].

    ``coords`` restricts the estimate to a subset of flat indices; other
    entries of the result are NaN.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    x = base[name]
    flat = x.reshape(-1)
    est = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(base))
        flat[i] = orig - epsilon
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value perturbing {name}[{i}]")
        est[i] = (fp - fm) / (2 * epsilon)
    return est.reshape(x.shape)


def compare_gradients(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                      tolerance=1e-4, floor=1e-6) -> GradReport:
    rel, ab = {}, {}
    for name, a in analytic.items():
        n = numeric[name]
        mask = np.isfinite(n)
        a, n = np.asarray(a, dtype=np.float64)[mask], n[mask]
        diff = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel[name] = float((diff / denom).max()) if diff.size else 0.0
        ab[name] = float(diff.max()) if diff.size else 0.0
    return GradReport(rel, ab, tolerance)


def check_function(f: Callable[[dict], float], analytic: Mapping[str, np.ndarray],
                   inputs: Mapping[str, np.ndarray], epsilon=1e-5, tolerance=1e-4,
                   max_coords=None, rng=None, floor=1e-6) -> GradReport:
    """Check analytic gradients of a scalar function ``f(inputs)``.

    ``max_coords`` caps the number of coordinates probed per input (chosen
    at random with ``rng``), which keeps checks on large tensors cheap.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    numeric = {}
    for name in analytic:
        size = np.size(inputs[name])
        coords = None
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        numeric[name] = central_difference(f, inputs, name, epsilon, coords)
    return compare_gradients(analytic, numeric, tolerance, floor)


def grad_check(graph: OpGraph, inputs: Mapping[str, np.ndarray], epsilon=1e-5, output=None,
               tolerance=1e-4, max_coords=None, rng=None) -> GradReport:
    """Compare ``graph`` backprop with central differences at 64-bit precision."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    for k, v in inputs.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"input {k!r} is not finite")
    if output is None:
        if len(graph.outputs) != 1:
            raise GraphError("grad_check needs a single scalar output")
        (output,) = graph.outputs

    def f(vals):
        return float(np.sum(graph.evaluate(vals)[output]))

    outs = graph.evaluate(inputs)
    seeds = {name: (np.ones_like(v) if name == output else np.zeros_like(v)) for name, v in outs.items()}
    analytic = graph.backprop(seeds)
    return check_function(f, analytic, inputs, epsilon, tolerance, max_coords, rng)
