"""Command-line entry point: generate, train, solve, eval.

Every command writes into an output directory (``--out``, falling back to
``$POISSONGNN_OUT`` and then ``./runs``).  Exit codes: 0 success, 2 bad flags,
3 I/O or file-format errors, 4 numerical divergence during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import persistence as io
from .evaluation import evaluate, summarize
from .geometry import graph_diameter
from .model import ModelParams, param_count
from .training import AdamState, DatasetSpec, TrainConfig, TrainingDiverged, TrainState, sample_dataset, train

OUT_ENV = "POISSONGNN_OUT"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

DATASET_FILE = "dataset.json"
CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
FIELDS_FILE = "fields.csv"
RESIDUALS_FILE = "residuals.csv"

HISTORY_COLUMNS = ["epoch", "loss", "elapsed_s"]
METRIC_COLUMNS = ["sample", "n_nodes", "residual_l2", "error_l2", "relative_error", "gnn_time", "lu_time", "ratio"]

log = logging.getLogger("poissongnn")


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _input(args, attr: str, default_name: str) -> Path:
    value = getattr(args, attr, None)
    return Path(value) if value else _out_dir(args) / default_name


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.nodes_min > args.nodes_max:
        raise UsageError("--nodes-min must not exceed --nodes-max")
    lo, hi = args.coeff_range
    if lo > hi:
        raise UsageError("--coeff-range LO HI needs LO <= HI")
    if args.num < 0 or args.test_num < 0:
        raise UsageError("--num and --test-num must be non-negative")
    try:
        spec = DatasetSpec(num_samples=args.num + args.test_num, node_range=(args.nodes_min, args.nodes_max),
                           degree=args.degree, coeff_range=(lo, hi), seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    samples = sample_dataset(spec)
    splits = {"train": samples[:args.num], "test": samples[args.num:]}
    meta = {"seed": args.seed, "nodes_min": args.nodes_min, "nodes_max": args.nodes_max,
            "degree": args.degree, "coeff_range": [lo, hi]}
    path = _out_dir(args) / DATASET_FILE
    io.save_dataset(path, splits, meta)

    print(f"wrote {path}: {len(splits['train'])} train, {len(splits['test'])} test samples")
    if samples:
        sizes = np.array([s.mesh.n_nodes for s in samples])
        counts, edges = np.histogram(sizes, bins=min(5, len(np.unique(sizes))))
        print("node counts:")
        for c, a, b in zip(counts, edges[:-1], edges[1:]):
            print(f"  [{a:6.0f}, {b:6.0f}]  {c}")
        print(f"mean graph diameter: {np.mean([graph_diameter(s.mesh) for s in samples]):.2f}")
    return EXIT_OK


def _train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Flags override ``base``; on a fresh run --seed also seeds the initialization."""
    fresh = base is None
    base = base or TrainConfig()
    overrides = {"k": args.k, "epochs": args.epochs, "batch_size": args.batch, "learning_rate": args.lr,
                 "recon_weight": args.recon_weight, "seed": args.seed, "lr_floor": args.lr_floor,
                 "clip_norm": args.clip_norm}
    d = base.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    if fresh and args.seed is not None:
        d["model"]["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    dataset = io.load_dataset(_input(args, "dataset", DATASET_FILE), "train")
    out = _out_dir(args)
    ckpt_path = out / CHECKPOINT_FILE
    state = None
    if args.resume:
        params, saved, state = io.load_checkpoint(args.resume)
        if state is None:
            raise UsageError(f"{args.resume} holds no resume state")
        config = _train_config(args, saved)
        if config.model != saved.model:
            raise UsageError("cannot change the model configuration when resuming")
    else:
        config = _train_config(args)
    if not dataset:
        raise UsageError("the dataset has no training samples")

    # wall-clock seconds at the end of each epoch, carried over on resume
    elapsed = _previous_elapsed(out / HISTORY_FILE, state.epoch) if state is not None else []
    start = time.perf_counter() - (elapsed[-1] if elapsed else 0.0)

    def save(st: TrainState) -> None:
        while len(elapsed) < len(st.history):
            elapsed.append(time.perf_counter() - start)
        io.save_checkpoint(ckpt_path, st.best_params, config, st)
        io.write_rows(out / HISTORY_FILE, HISTORY_COLUMNS,
                      ([i, loss, t] for i, (loss, t) in enumerate(zip(st.history, elapsed))))

    if state is None:
        init = ModelParams.init(config.model)
        state = TrainState(init, AdamState(), best_params=init.copy())
    log.info("training %d parameters on %d samples", param_count(state.params), len(dataset))
    try:
        train(dataset, config, state, on_epoch=save)
    except TrainingDiverged as exc:
        state.best_params = exc.params
        save(state)
        print(f"training diverged: {exc}; best parameters kept in {ckpt_path}", file=sys.stderr)
        return EXIT_DIVERGED
    save(state)
    best = state.best_loss if state.history else float("nan")
    print(f"wrote {ckpt_path} (epoch {state.epoch}, best loss {best:.6e})")
    return EXIT_OK


def _previous_elapsed(path: Path, epochs: int) -> list[float]:
    """Elapsed column of an earlier history file, padded with zeros if absent."""
    try:
        header, rows = io.read_rows(path)
    except OSError:
        rows, header = [], HISTORY_COLUMNS
    times = [float(r[2]) for r in rows[:epochs]] if header == HISTORY_COLUMNS else []
    return times + [0.0] * (epochs - len(times))


def _load_eval_inputs(args):
    params, config, _ = io.load_checkpoint(_input(args, "checkpoint", CHECKPOINT_FILE))
    dataset = io.load_dataset(_input(args, "dataset", DATASET_FILE), args.split)
    k = args.k if args.k is not None else config.k
    if k < 1:
        raise UsageError("--k must be >= 1")
    return params, dataset, k


def cmd_solve(args) -> int:
    from .baseline import rollout_states, timed_compare

    params, dataset, k = _load_eval_inputs(args)
    if not 0 <= args.sample < len(dataset):
        raise UsageError(f"--sample {args.sample} out of range for {len(dataset)} {args.split} samples")
    sample = dataset[args.sample]
    states = rollout_states(sample.graph, params, k)
    cmp = timed_compare(sample.graph, sample.system, params, k, solver=lambda g, p, kk: states)
    out = _out_dir(args)
    coords = sample.mesh.coords
    header = ["x", "y", "kind"] + [f"u_{t}" for t in range(k + 1)] + ["u_lu"]
    rows = ([coords[i, 0], coords[i, 1], int(sample.mesh.node_kind[i])] + [float(u[i]) for u in states]
            + [float(cmp.U_lu[i])] for i in range(len(coords)))
    io.write_rows(out / FIELDS_FILE, header, rows)
    io.write_rows(out / RESIDUALS_FILE, ["iteration", "residual_l2"], enumerate(cmp.residuals))
    print(f"wrote {out / FIELDS_FILE} and {out / RESIDUALS_FILE}")
    print(f"residual_l2 {cmp.residuals[-1]:.6e} error_l2 {cmp.error:.6e} relative_error {cmp.relative_error:.6e}")
    return EXIT_OK


def metric_rows(metrics, timing: bool = True) -> list[list]:
    def times(*vals):
        return list(vals) if timing else [""] * len(vals)

    rows = [[m.index, m.n_nodes, m.residual_l2, m.error_l2, m.relative_error]
            + times(m.gnn_time, m.lu_time, m.ratio) for m in metrics]
    for name, agg in summarize(metrics).items():
        rows.append([name, agg["n_nodes"], agg["residual_l2"], agg["error_l2"], agg["relative_error"]]
                    + times(agg["gnn_time"], agg["lu_time"], agg["ratio"]))
    return rows


def cmd_eval(args) -> int:
    params, dataset, k = _load_eval_inputs(args)
    metrics = evaluate(params, dataset, k)
    path = _out_dir(args) / METRICS_FILE
    io.write_rows(path, METRIC_COLUMNS, metric_rows(metrics, timing=not args.no_timing))
    agg = summarize(metrics)
    print(f"wrote {path} ({len(metrics)} samples)")
    if agg:
        med = agg["median"]
        print(f"median residual_l2 {med['residual_l2']:.3e} relative_error {med['relative_error']:.3e}")
        if not args.no_timing:
            print(f"median gnn {med['gnn_time']:.4f}s lu {med['lu_time']:.4f}s ratio {med['ratio']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="poissongnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample a dataset of meshed problems")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num", type=int, default=200, help="training samples")
    g.add_argument("--test-num", type=int, default=50, help="held-out samples")
    g.add_argument("--nodes-min", type=int, default=300)
    g.add_argument("--nodes-max", type=int, default=600)
    g.add_argument("--degree", type=int, default=2, help="degree of the f and g polynomials")
    g.add_argument("--coeff-range", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train on the dataset's training split")
    t.add_argument("--dataset", help="dataset file (default OUT/dataset.json)")
    t.add_argument("--seed", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-floor", type=float, help="cosine-decay the rate down to lr * this factor")
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--recon-weight", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("solve", cmd_solve, "export the per-iteration fields of one sample"),
                                 ("eval", cmd_eval, "per-sample metrics against the LU reference")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", help="checkpoint file (default OUT/checkpoint.json)")
        s.add_argument("--dataset", help="dataset file (default OUT/dataset.json)")
        s.add_argument("--split", default="test")
        s.add_argument("--k", type=int, help="iterations (default: the checkpoint's)")
        s.set_defaults(func=func)
        if name == "solve":
            s.add_argument("--sample", type=int, default=0)
        else:
            s.add_argument("--no-timing", action="store_true", help="leave wall-time columns empty")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"poissongnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"poissongnn {args.command}: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, io.SchemaError) as exc:
        print(f"poissongnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
