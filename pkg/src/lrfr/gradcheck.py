"""Finite-difference verification of every loss and of the full network.

Each case draws fresh random inputs per seed and compares analytic
gradients with central differences at 64-bit precision. Per case the worst
relative error over all seeds is kept.
"""

from __future__ import annotations

import numpy as np

from .losses import LossSpec, cosface_loss, distance, total_loss
from .model import NetworkConfig, NetworkParams, embed, init_network, network_backward
from .numerics import GradReport, check_function

# Smooth losses: 1e-4 keeps round-off (|loss| * 1e-16 / eps) below the
# error budget even at CosFace scale 48. The network uses 1e-6 so that a
# step rarely crosses a PReLU kink.
LOSS_EPS = 1e-4
NET_EPS = 1e-6
KINK_GAP = 1e-3
PREACT_GAP = 1e-4  # min |pre-activation| for a network sample to be kept
NET = NetworkConfig((4, 6), embedding_dim=5, input_size=16)

DIST_CASES = {
    "l1": LossSpec("l1"),
    "l2": LossSpec("l2"),
    "smooth_l1": LossSpec("smooth_l1", beta=0.5),
    "logexp_p1": LossSpec("logexp", p=1.0),
    "logexp_p2": LossSpec("logexp", p=2.0),
}


def _away_from(d, kink):
    """Move |d| off ``kink`` so a central difference never straddles it."""
    close = np.abs(np.abs(d) - kink) < 2 * KINK_GAP
    return np.where(close, np.where(d < 0, -1, 1) * (kink + 4 * KINK_GAP), d)


def _dist_case(spec: LossSpec, rng):
    x = rng.normal(size=(4, 16))
    y = x + _away_from(_away_from(rng.normal(size=x.shape), 0.0), spec.beta)
    res = distance(x, y, spec)
    return check_function(lambda v: distance(v["x"], v["y"], spec).value, {"x": res.grad_x, "y": res.grad_y},
                          {"x": x, "y": y}, LOSS_EPS)


def _cosface_case(rng):
    f, w = rng.normal(size=(6, 16)), rng.normal(size=(5, 16))
    y = rng.integers(0, 5, 6)
    res = cosface_loss(f, w, y)
    return check_function(lambda v: cosface_loss(v["f"], v["w"], y).value,
                          {"f": res.grad_embeddings, "w": res.grad_weights}, {"f": f, "w": w}, LOSS_EPS)


def _total_case(rng):
    hr = rng.normal(size=(6, 16))
    lr = hr + _away_from(rng.normal(size=hr.shape), 0.0)
    w = rng.normal(size=(5, 16))
    y = rng.integers(0, 5, 6)
    spec = LossSpec()
    res = total_loss(hr, lr, w, y, spec)
    return check_function(lambda v: total_loss(v["hr"], v["lr"], v["w"], y, spec).value,
                          {"hr": res.grad_hr, "lr": res.grad_lr, "w": res.grad_weights},
                          {"hr": hr, "lr": lr, "w": w}, LOSS_EPS)


def _min_preactivation(cache) -> float:
    convs = [n.id for n in cache.graph.nodes if n.op == "conv2d"]
    return min(float(np.abs(cache.trace.values[i]).min()) for i in convs)


def _network_case(rng, max_coords=12):
    # redraw until every PReLU input is clear of its kink, the network
    # analogue of keeping L1 differences away from zero
    while True:
        params = init_network(NET, int(rng.integers(2**31)))
        params.arrays["prelu0.slope"] = rng.uniform(0.1, 0.4, NET.channel_widths[0])
        hr = rng.random((3, NET.input_size, NET.input_size, 3))
        lr = np.clip(hr + rng.normal(0, 0.2, hr.shape), 0, 1)
        f, cache = embed(params, np.concatenate([hr, lr]))
        if _min_preactivation(cache) >= PREACT_GAP:
            break
    w = rng.normal(size=(4, NET.embedding_dim))
    labels = rng.integers(0, 4, 3)
    spec = LossSpec(cosface_s=8.0, cosface_m=0.3)
    names = params.names()

    def loss(values):
        p = NetworkParams(NET, {n: values[n] for n in names})
        f, _ = embed(p, np.concatenate([hr, lr]))
        return total_loss(f[:3], f[3:], values["cls"], labels, spec).value

    res = total_loss(f[:3], f[3:], w, labels, spec)
    grads = network_backward(cache, np.concatenate([res.grad_hr, res.grad_lr]))
    grads["cls"] = res.grad_weights
    return check_function(loss, grads, dict(params.arrays, cls=w), NET_EPS, max_coords=max_coords, rng=rng)


def _merge(reports: list[GradReport], tolerance: float) -> GradReport:
    rel: dict[str, float] = {}
    ab: dict[str, float] = {}
    for rep in reports:
        for k, v in rep.max_rel_error.items():
            rel[k] = max(rel.get(k, 0.0), v)
            ab[k] = max(ab.get(k, 0.0), rep.max_abs_error[k])
    return GradReport(rel, ab, tolerance)


def run_suite(seeds=range(100), tolerance: float = 1e-4) -> dict[str, GradReport]:
    """Worst-case gradient report per case over ``seeds``."""
    cases = {name: (lambda rng, s=spec: _dist_case(s, rng)) for name, spec in DIST_CASES.items()}
    cases["cosface"] = _cosface_case
    cases["total"] = _total_case
    cases["network"] = _network_case
    out = {}
    for name, case in cases.items():
        reports = [case(np.random.default_rng([int(seed), i])) for i, seed in enumerate(seeds)]
        out[name] = _merge(reports, tolerance)
    return out


def summary(reports: dict[str, GradReport]) -> str:
    lines = [f"{'case':<12}{'max rel':>12}  status"]
    for name, rep in reports.items():
        lines.append(f"{name:<12}{rep.worst:>12.3e}  {'ok' if rep.passed else 'FAIL'}")
    return "\n".join(lines)
