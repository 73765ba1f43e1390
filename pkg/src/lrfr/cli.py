"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage
error. ``LRFR_THREADS`` caps BLAS threads (default 1, fully deterministic).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config, parse_config
from .datagen import LabeledDataset, generate_dataset, load_dataset, make_pairs, save_dataset
from .imageops import classify_difficulty, degrade, read_png, ssim, write_png
from .model import Checkpoint
from .numerics import GraphError

log = logging.getLogger("lrfr")

COMMANDS = ("gen-data", "train", "eval", "sweep-accuracy", "sweep-gradnorm", "sim-hist", "dim-error", "pca",
            "augment", "grad-check")
NEEDS_CHECKPOINT = {"eval", "sweep-accuracy", "sweep-gradnorm", "sim-hist", "dim-error", "pca"}
DEFAULT_RESOLUTIONS = (7, 14, 20, 28, 56, 112)
PROBE_SIZE = 256


class UsageError(Exception):
    pass


@dataclass
class Command:
    name: str
    config: Path | None = None
    out: Path = Path(".")
    seed: int | None = None
    checkpoint: Path | None = None
    resolutions: tuple[int, ...] | None = None
    pairs: int = 600
    model_id: str | None = None
    images: tuple[Path, ...] = ()
    seeds: int = 100


def _resolution_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("resolutions must be positive integers")
    return values


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrfr", description="Multi-resolution face-embedding training and analysis.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    helps = {
        "gen-data": "write a synthetic identity dataset as PNGs plus a manifest",
        "train": "train a model; writes checkpoints and the training log",
        "eval": "verification accuracy at full resolution",
        "sweep-accuracy": "verification accuracy per degradation resolution",
        "sweep-gradnorm": "gradient-norm sum per degradation resolution",
        "sim-hist": "positive/negative cosine-similarity histograms per resolution",
        "dim-error": "per-dimension |f_HR - f_LR| statistics per resolution",
        "pca": "2-D PCA of embeddings across resolutions",
        "augment": "degrade image files and report SSIM and difficulty tier",
        "grad-check": "finite-difference check of every loss and the network",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, required=name == "train", help="run configuration file")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory (created if absent)")
        p.add_argument("--seed", type=int, help="override the data and training seed")
        if name in NEEDS_CHECKPOINT:
            p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint (.lrfr)")
            p.add_argument("--model-id", help="report tag; defaults to the checkpoint's directory name")
        if name in NEEDS_CHECKPOINT - {"eval"} or name == "augment":
            p.add_argument("--resolutions", type=_resolution_list, help="comma-separated pixel sizes")
        if name in {"eval", "sweep-accuracy", "sim-hist"}:
            p.add_argument("--pairs", type=_positive, default=600, help="number of verification pairs")
        if name == "augment":
            p.add_argument("images", type=Path, nargs="+", help="input image files")
        if name == "grad-check":
            p.add_argument("--seeds", type=_positive, default=100, help="random draws per case")
    return parser


def parse_args(argv=None) -> Command:
    ns = build_parser().parse_args(argv)
    return Command(
        name=ns.command, config=ns.config, out=ns.out, seed=ns.seed,
        checkpoint=getattr(ns, "checkpoint", None), resolutions=getattr(ns, "resolutions", None),
        pairs=getattr(ns, "pairs", 600), model_id=getattr(ns, "model_id", None),
        images=tuple(getattr(ns, "images", ())), seeds=getattr(ns, "seeds", 100),
    )


# --------------------------------------------------------------------------
# Command implementations
# --------------------------------------------------------------------------


def _run_config(cmd: Command) -> RunConfig:
    run = load_config(cmd.config) if cmd.config is not None else parse_config("")
    return run.with_seed(cmd.seed) if cmd.seed is not None else run


def _dataset(run: RunConfig) -> LabeledDataset:
    if run.data_path:
        return load_dataset(run.data_path, run.data.input_size, run.data.eval_fraction)
    return generate_dataset(run.data)


def _model_id(cmd: Command) -> str:
    return cmd.model_id or cmd.checkpoint.resolve().parent.name or "model"


def _resolutions(cmd: Command, input_size: int) -> list[int]:
    res = cmd.resolutions or tuple(r for r in DEFAULT_RESOLUTIONS if r <= input_size)
    bad = [r for r in res if r > input_size]
    if bad:
        raise ValueError(f"resolutions {bad} exceed the {input_size} px input size")
    return list(res)


def _probe(ds: LabeledDataset, seed: int) -> np.ndarray:
    idx = ds.split("eval")
    if len(idx) > PROBE_SIZE:
        idx = np.sort(np.random.default_rng([seed, 5]).choice(idx, PROBE_SIZE, replace=False))
    return ds.images[idx]


def _announce(paths) -> None:
    for p in paths:
        print(p)


def cmd_gen_data(cmd: Command) -> int:
    run = _run_config(cmd)
    ds = generate_dataset(run.data)
    root = save_dataset(ds, cmd.out)
    print(f"{len(ds)} images of {ds.n_identities} identities written to {root}")
    return 0


def cmd_train(cmd: Command) -> int:
    from .training import train

    run = _run_config(cmd)
    ds = _dataset(run)
    ckpt, tlog = train(run.train, ds, cmd.out)
    last = run.train.epochs - 1
    loss = f"{tlog.epoch_mean(last):.4f}" if len(tlog) else "n/a"
    print(f"trained {run.train.epochs} epochs, {len(tlog)} steps; final epoch loss {loss}")
    print(cmd.out / "final.lrfr")
    return 0


def _load(cmd: Command):
    run = _run_config(cmd)
    ckpt = Checkpoint.load(cmd.checkpoint)
    if ckpt.params.config.input_size != run.data.input_size:
        raise ValueError(f"checkpoint expects {ckpt.params.config.input_size} px input, "
                         f"config [data] input_size is {run.data.input_size}")
    return run, ckpt, _dataset(run)


def cmd_eval(cmd: Command) -> int:
    from .analysis import resolution_accuracy_sweep, write_report

    run, ckpt, ds = _load(cmd)
    pairs = make_pairs(ds, cmd.pairs, run.data.seed)
    rep = resolution_accuracy_sweep(ckpt, pairs, [run.data.input_size], _model_id(cmd), run.data.seed)
    print(f"verification accuracy {rep.values[0]:.4f} on {len(pairs)} pairs")
    _announce(write_report(rep, cmd.out))
    return 0


def cmd_sweep_accuracy(cmd: Command) -> int:
    from .analysis import resolution_accuracy_sweep, write_report

    run, ckpt, ds = _load(cmd)
    pairs = make_pairs(ds, cmd.pairs, run.data.seed)
    rep = resolution_accuracy_sweep(ckpt, pairs, _resolutions(cmd, run.data.input_size), _model_id(cmd),
                                    run.data.seed)
    for r, v in zip(rep.resolutions, rep.values):
        print(f"{r:>4} px  {v:.4f}")
    _announce(write_report(rep, cmd.out))
    return 0


def cmd_sweep_gradnorm(cmd: Command) -> int:
    from .analysis import gradient_norm_sweep, write_report

    run, ckpt, ds = _load(cmd)
    train_idx = ds.split("train")
    n = min(run.train.batch_size, len(train_idx))
    idx = np.sort(np.random.default_rng([run.data.seed, 6]).choice(train_idx, n, replace=False))
    rep = gradient_norm_sweep(ckpt, ds.images[idx], ds.labels[idx], _resolutions(cmd, run.data.input_size),
                              run.train.loss, _model_id(cmd), run.data.seed)
    for r, v in zip(rep.resolutions, rep.values):
        print(f"{r:>4} px  {v:.6g}")
    _announce(write_report(rep, cmd.out))
    return 0


def cmd_sim_hist(cmd: Command) -> int:
    from .analysis import similarity_distributions, write_report

    run, ckpt, ds = _load(cmd)
    pairs = make_pairs(ds, cmd.pairs, run.data.seed)
    for r in _resolutions(cmd, run.data.input_size):
        hist = similarity_distributions(ckpt, pairs, r, _model_id(cmd), run.data.seed)
        hist.name = f"simhist{r}"
        print(f"{r:>4} px  overlap {hist.overlap:.4f}")
        _announce(write_report(hist, cmd.out))
    return 0


def cmd_dim_error(cmd: Command) -> int:
    from .analysis import per_dim_error, write_report

    run, ckpt, ds = _load(cmd)
    probe = _probe(ds, run.data.seed)
    for r in _resolutions(cmd, run.data.input_size):
        rep = per_dim_error(ckpt, probe, r, model_id=_model_id(cmd), seed=run.data.seed)
        rep.name = f"dimerror{r}"
        print(f"{r:>4} px  mean per-dimension error {rep.mean:.6f}")
        _announce(write_report(rep, cmd.out))
    return 0


def cmd_pca(cmd: Command) -> int:
    from .analysis import embed_at, pca_project, write_report

    run, ckpt, ds = _load(cmd)
    probe = _probe(ds, run.data.seed)
    res = _resolutions(cmd, run.data.input_size)
    emb = np.concatenate([embed_at(ckpt.params, probe, r) for r in res])
    groups = np.repeat(res, len(probe))
    rep = pca_project(emb, 2, seed=run.data.seed, groups=groups)
    rep.model_id, rep.seed = _model_id(cmd), run.data.seed
    for r in res:
        c = rep.centroids[r]
        print(f"{r:>4} px  centroid ({c[0]:+.4f}, {c[1]:+.4f})")
    _announce(write_report(rep, cmd.out))
    return 0


def cmd_augment(cmd: Command) -> int:
    res = cmd.resolutions or (7, 14, 20)
    cmd.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in cmd.images:
        img = read_png(path)
        if img.shape[0] != img.shape[1]:
            raise ValueError(f"{path}: expected a square image, got {img.shape[1]}x{img.shape[0]}")
        for r in res:
            if r > img.shape[0]:
                raise ValueError(f"{path}: resolution {r} exceeds image size {img.shape[0]}")
            low = degrade(img, r)
            target = cmd.out / f"{path.stem}_{r}px.png"
            write_png(target, low)
            row = {"image": str(path), "resolution": r, "ssim": ssim(img, low),
                   "difficulty": classify_difficulty(r).value, "output": str(target)}
            rows.append(row)
            print(f"{path.name}  {r:>4} px  ssim {row['ssim']:.4f}  {row['difficulty']}")
    tmp = cmd.out / "augment.json.tmp"
    tmp.write_text(json.dumps(rows, indent=1) + "\n")
    os.replace(tmp, cmd.out / "augment.json")
    return 0


def cmd_grad_check(cmd: Command) -> int:
    from .gradcheck import run_suite, summary

    seed = cmd.seed or 0
    reports = run_suite(range(seed, seed + cmd.seeds))
    for name, rep in reports.items():
        print(f"[{name}]")
        print(rep.table())
    print(summary(reports))
    return 0 if all(r.passed for r in reports.values()) else 1


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep-accuracy": cmd_sweep_accuracy,
    "sweep-gradnorm": cmd_sweep_gradnorm, "sim-hist": cmd_sim_hist, "dim-error": cmd_dim_error, "pca": cmd_pca,
    "augment": cmd_augment, "grad-check": cmd_grad_check,
}


def _threads() -> int:
    raw = os.environ.get("LRFR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LRFR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LRFR_THREADS must be a positive integer, got {raw!r}")
    return n


def dispatch(cmd: Command) -> int:
    """Run one command; returns the process exit code."""
    from .training import TrainingError

    try:
        threads = _threads()
    except UsageError as exc:
        print(f"lrfr: error: {exc}", file=sys.stderr)
        return 2
    try:
        cmd.out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=threads):
            return HANDLERS[cmd.name](cmd)
    except (ConfigError, TrainingError, GraphError, FloatingPointError, OSError, ValueError) as exc:
        print(f"lrfr: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cmd = parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    return dispatch(cmd)
