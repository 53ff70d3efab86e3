"""Command-line front end: generate, train, infer, evaluate, benchmark.

Every command is a pure function of its flags, config, input files, and
seed: reruns produce bit-identical artifacts except timestamps and timing
fields.  Exit codes: 0 success, 2 usage problems, 3 data or shape errors,
4 numeric failures.

Thread control happens before any numeric import: the --threads flag (or
the WFR_THREADS environment variable as fallback) caps the linear-algebra
thread pools for the whole process, which keeps timing benchmarks fair.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    """Bad flag combinations or refusal to overwrite a run directory."""


def _apply_thread_cap(argv) -> None:
    """Set thread-pool env vars before numpy is first imported."""
    n = os.environ.get("WFR_THREADS")
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


@dataclass
class RunManifest:
    """Provenance record written into every run directory, exactly once."""

    command: str
    argv: List[str]
    config: dict
    seed: int
    git_describe: str
    started: str
    finished: str = ""
    artifacts: List[str] = field(default_factory=list)

    def write(self, run_dir: Path) -> None:
        with open(run_dir / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
            cwd=Path(__file__).resolve().parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _prepare_run_dir(path: str, force: bool, resume: bool = False) -> Path:
    """Create the run directory; refuse to clobber an existing run.

    Run directories are append-only: a directory that already holds a
    manifest is only reused with --force (or --resume for training).
    """
    run_dir = Path(path)
    manifest = run_dir / "manifest.json"
    if manifest.exists() and not force and not resume:
        raise UsageError(
            f"{run_dir} already contains a run; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _start_manifest(args, config: dict, seed: int) -> RunManifest:
    return RunManifest(command=args.command, argv=sys.argv[1:], config=config,
                       seed=seed, git_describe=_git_describe(),
                       started=_now())


# ---------------------------------------------------------------- gen ----

def cmd_gen(args) -> int:
    from . import datasets
    from .data import save_snapshots

    run_dir = _prepare_run_dir(args.out, args.force)
    if args.dataset == "gene":
        gen_cfg = datasets.GeneCircuitConfig()
        config = {"dataset": "gene", "n0": args.n0, **asdict(gen_cfg)}
        manifest = _start_manifest(args, config, args.seed)
        ds = datasets.gen_gene_dataset(n0=args.n0, seed=args.seed,
                                       config=gen_cfg)
        out = run_dir / "snapshots.csv"
        save_snapshots(ds, out)
        manifest.artifacts = [str(out)]
    elif args.dataset == "gaussian":
        gen_cfg = datasets.GaussianMixtureConfig()
        config = {"dataset": "gaussian", "dim": args.dim, **asdict(gen_cfg)}
        manifest = _start_manifest(args, config, args.seed)
        ds = datasets.gen_gaussian_mixture(d=args.dim, seed=args.seed,
                                           config=gen_cfg)
        out = run_dir / "snapshots.csv"
        save_snapshots(ds, out)
        manifest.artifacts = [str(out)]
    else:  # perturb
        gen_cfg = datasets.PerturbationConfig()
        config = {"dataset": "perturb", "conditions": args.conditions,
                  "train_split": args.train_split, "cells": args.cells,
                  **asdict(gen_cfg)}
        manifest = _start_manifest(args, config, args.seed)
        train, test = datasets.gen_perturbation_benchmark(
            n_conditions=args.conditions, n_train=args.train_split,
            seed=args.seed, n_cells=args.cells, config=gen_cfg)
        cond_dir = run_dir / "conditions"
        cond_dir.mkdir(exist_ok=True)
        artifacts = []
        all_pairs = sorted(train + test, key=lambda p: p[0].condition_id)
        for spec, ds in all_pairs:
            out = cond_dir / f"cond_{spec.condition_id:04d}.csv"
            save_snapshots(ds, out)
            artifacts.append(str(out))
        table = datasets.condition_embeddings(
            [s for s, _ in train], [s for s, _ in all_pairs])
        emb_path = run_dir / "embeddings.csv"
        with open(emb_path, "w") as fh:
            fh.write("cond," + ",".join(
                f"e{i}" for i in range(table.shape[1])) + "\n")
            for cid in range(table.shape[0]):
                fh.write(f"{cid}," + ",".join(
                    repr(float(v)) for v in table[cid]) + "\n")
        split_path = run_dir / "split.json"
        with open(split_path, "w") as fh:
            json.dump({
                "train_ids": sorted(s.condition_id for s, _ in train),
                "test_ids": sorted(s.condition_id for s, _ in test),
                "specs": [asdict(s) for s, _ in all_pairs],
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.artifacts = artifacts + [str(emb_path), str(split_path)]

    manifest.finished = _now()
    manifest.write(run_dir)
    print(f"wrote {len(manifest.artifacts)} file(s) under {run_dir}")
    return EXIT_OK


# -------------------------------------------------------------- train ----

def _resolve_train_config(args):
    """Merge preset, config file, and explicit flags (flags win)."""
    from . import training

    if args.preset and args.config:
        raise UsageError("--preset and --config are mutually exclusive; "
                         "put a \"preset\" key in the config file instead")
    base: dict = {}
    if args.preset:
        if args.preset not in training.PRESETS:
            raise UsageError(
                f"unknown preset {args.preset!r}; "
                f"have {sorted(training.PRESETS)}")
        base.update(training.PRESETS[args.preset])
    if args.config:
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: bad JSON ({exc})")
        if not isinstance(doc, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        preset_name = doc.pop("preset", None)
        if preset_name is not None:
            if preset_name not in training.PRESETS:
                raise UsageError(f"{args.config}: unknown preset "
                                 f"{preset_name!r}")
            base.update(training.PRESETS[preset_name])
        base.update(doc)
    overrides = {
        "steps": args.steps, "seed": args.seed, "delta": args.delta,
        "p_diff": args.p_diff, "growth_weight": args.growth_weight,
        "batch_size": args.batch_size, "lr": args.lr, "sigma": args.sigma,
        "epsilon": args.epsilon, "oet_batch": args.oet_batch,
        "cond_batch": args.cond_batch, "segment_mode": args.segment_mode,
        "weight_mode": args.weight_mode, "depth": args.depth,
        "width": args.width, "checkpoint_every": args.checkpoint_every,
    }
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    if args.condition_mode:
        base["condition_mode"] = True
    return training.TrainConfig.from_dict(base)


def _load_condition_run(data_path: Path):
    """Read a perturbation run directory: per-condition files + metadata."""
    from .data import load_snapshots

    cond_dir = data_path / "conditions"
    split_path = data_path / "split.json"
    emb_path = data_path / "embeddings.csv"
    for p in (cond_dir, split_path, emb_path):
        if not p.exists():
            raise UsageError(
                f"{data_path} is not a perturbation run directory "
                f"(missing {p.name})")
    with open(split_path) as fh:
        split = json.load(fh)
    import numpy as np
    rows = {}
    with open(emb_path) as fh:
        header = fh.readline()
        if not header.startswith("cond,"):
            raise UsageError(f"{emb_path}: bad header")
        for line in fh:
            parts = line.strip().split(",")
            rows[int(parts[0])] = [float(v) for v in parts[1:]]
    table = np.zeros((max(rows) + 1, len(next(iter(rows.values())))))
    for cid, vec in rows.items():
        table[cid] = vec
    conditions = []
    for cid in split["train_ids"]:
        ds = load_snapshots(cond_dir / f"cond_{cid:04d}.csv")
        conditions.append((cid, ds))
    return conditions, table, split


def cmd_train(args) -> int:
    from . import net, training
    from .data import load_snapshots

    cfg = _resolve_train_config(args)
    run_dir = _prepare_run_dir(args.out, args.force, resume=args.resume)
    data_path = Path(args.data)

    start_step = 0
    init_params = None
    old_log = None
    if args.resume:
        ckpts = sorted(run_dir.glob("ckpt_step_*.bin"))
        if not ckpts:
            raise UsageError(f"--resume: no periodic checkpoints in {run_dir}")
        latest = ckpts[-1]
        start_step = int(latest.stem.rsplit("_", 1)[1])
        init_params = net.load_checkpoint(latest)
        log_path = run_dir / "log.csv"
        if log_path.exists():
            old_log = training.TrainLog.read_csv(log_path)
            old_log.records = [r for r in old_log.records
                               if r[0] < start_step]
        print(f"resuming from step {start_step}")

    manifest = _start_manifest(args, json.loads(cfg.to_json()), cfg.seed)

    def checkpoint_writer(step, params):
        net.save_checkpoint(params, run_dir / f"ckpt_step_{step:07d}.bin")

    t0 = time.perf_counter()
    if cfg.condition_mode:
        conditions, table, _split = _load_condition_run(data_path)
        params, log = training.train_conditional(
            conditions, cfg, table, init_params=init_params,
            start_step=start_step, on_checkpoint=checkpoint_writer)
    else:
        if data_path.is_dir():
            raise UsageError(
                f"{data_path} is a directory; pass --condition-mode for "
                f"perturbation runs")
        ds = load_snapshots(data_path)
        params, log = training.train(
            ds, cfg, init_params=init_params, start_step=start_step,
            on_checkpoint=checkpoint_writer)
    elapsed = time.perf_counter() - t0

    if old_log is not None:
        old_log.records.extend(log.records)
        log = old_log
    ckpt_path = run_dir / "ckpt.bin"
    net.save_checkpoint(params, ckpt_path)
    log_path = run_dir / "log.csv"
    log.write_csv(log_path)
    cfg_path = run_dir / "config.json"
    with open(cfg_path, "w") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")
    manifest.artifacts = [str(ckpt_path), str(log_path), str(cfg_path)]
    manifest.finished = _now()
    manifest.write(run_dir)
    last = log.records[-1] if log.records else (0, float("nan"))
    print(f"trained {cfg.steps} steps in {elapsed:.1f}s; "
          f"final loss {last[1]:.6f}; checkpoint at {ckpt_path}")
    return EXIT_OK


# -------------------------------------------------------------- infer ----

def _check_dims(params, dataset) -> None:
    if params.d != dataset.dim:
        from .config import DataError
        raise DataError(
            f"checkpoint expects dimension {params.d} but the data has "
            f"dimension {dataset.dim}")


def _condition_for(params, args):
    if params.e > 0:
        if args.condition is None:
            raise UsageError("conditional checkpoint: pass --condition ID")
        if not 0 <= args.condition < params.embedding.shape[0]:
            raise UsageError(
                f"--condition {args.condition} out of range "
                f"[0, {params.embedding.shape[0]})")
        return args.condition
    if args.condition is not None:
        raise UsageError("--condition given but the checkpoint is "
                         "unconditional")
    return None


def cmd_infer(args) -> int:
    import numpy as np

    from . import inference, metrics, net
    from .data import SnapshotDataset, WeightedCloud, load_snapshots, save_snapshots

    params = net.load_checkpoint(args.ckpt)
    ds = load_snapshots(args.data)
    _check_dims(params, ds)
    cond = _condition_for(params, args)
    run_dir = _prepare_run_dir(args.out, args.force)
    manifest = _start_manifest(
        args, {"ckpt": args.ckpt, "data": args.data, "steps": args.steps,
               "partition": args.partition, "condition": args.condition},
        seed=0)

    if args.partition is not None and args.steps is not None:
        raise UsageError("--steps and --partition are mutually exclusive")
    grid = ds.normalized_times()
    per_window = 1 if args.partition == "data" else (args.steps or 1)
    source = ds.snapshots[0]
    n0 = source.n
    src = WeightedCloud(source.points.copy(), np.full(n0, 1.0 / n0),
                        time=source.time, condition_id=cond)

    clouds = [src]
    total_ns = 0
    for k in range(1, len(grid)):
        partition = metrics.subdivided_partition(grid[:k + 1], per_window)
        result = inference.multi_step(params, src, partition, cond=cond)
        total_ns += result.wall_ns
        clouds.append(WeightedCloud(result.points, result.masses,
                                    time=float(ds.time_grid[k]),
                                    condition_id=cond))
    pred = SnapshotDataset(clouds, time_grid=ds.time_grid.copy())
    out = run_dir / "predicted.csv"
    save_snapshots(pred, out)
    manifest.artifacts = [str(out)]
    manifest.finished = _now()
    manifest.write(run_dir)
    print(f"propagated {n0} points over {len(grid) - 1} snapshot time(s) "
          f"in {total_ns / 1e6:.2f} ms of solver time; wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------- eval ----

def cmd_eval(args) -> int:
    import numpy as np

    from . import metrics
    from .config import DataError
    from .data import load_snapshots

    pred = load_snapshots(args.pred)
    ref = load_snapshots(args.ref)
    if pred.time_grid.shape != ref.time_grid.shape or not np.allclose(
            pred.time_grid, ref.time_grid, rtol=1e-9, atol=1e-12):
        raise DataError(
            f"time grids differ: predicted {pred.time_grid.tolist()} vs "
            f"reference {ref.time_grid.tolist()}")
    run_dir = _prepare_run_dir(args.out, args.force)
    manifest = _start_manifest(
        args, {"pred": args.pred, "ref": args.ref}, seed=0)

    pred0 = pred.snapshots[0].total_mass()
    ref0 = ref.snapshots[0].total_mass()
    times, w1s, rmes = [], [], []
    for k in range(len(ref.snapshots)):
        p, r = pred.snapshots[k], ref.snapshots[k]
        times.append(float(ref.time_grid[k]))
        w1s.append(metrics.wasserstein1(p, r))
        rmes.append(metrics.rme(p.masses / pred0, r.total_mass(), ref0))
    report = metrics.EvalReport(
        times=times, w1=w1s, rme=rmes,
        mean_w1=float(np.mean(w1s)), mean_rme=float(np.mean(rmes)),
        hardware=metrics._hardware_string())

    json_path = run_dir / "eval.json"
    csv_path = run_dir / "eval.csv"
    report.write_json(json_path)
    report.write_csv(csv_path)
    manifest.artifacts = [str(json_path), str(csv_path)]
    manifest.finished = _now()
    manifest.write(run_dir)
    for t, a, b in zip(times, w1s, rmes):
        print(f"t={t:g}  W1={a:.6f}  RME={b:.6f}")
    print(f"mean W1={report.mean_w1:.6f}  mean RME={report.mean_rme:.6f}")
    return EXIT_OK


# -------------------------------------------------------------- bench ----

def cmd_bench(args) -> int:
    from . import metrics, net
    from .data import load_snapshots

    params = net.load_checkpoint(args.ckpt)
    ds = load_snapshots(args.data)
    _check_dims(params, ds)
    cond = _condition_for(params, args)
    try:
        k_list = [int(v) for v in args.k_list.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, "
                         f"got {args.k_list!r}")
    run_dir = _prepare_run_dir(args.out, args.force)
    manifest = _start_manifest(
        args, {"ckpt": args.ckpt, "data": args.data, "k_list": k_list,
               "repeats": args.repeats, "euler_repeats": args.euler_repeats},
        seed=0)

    report = metrics.bench(
        params, ds.snapshots[0], ds.snapshots[-1], k_list=k_list,
        repeats=args.repeats, euler_repeats=args.euler_repeats,
        grid=ds.normalized_times(), cond=cond)

    json_path = run_dir / "bench.json"
    csv_path = run_dir / "bench.csv"
    report.write_json(json_path)
    report.write_csv(csv_path)
    manifest.artifacts = [str(json_path), str(csv_path)]
    manifest.finished = _now()
    manifest.write(run_dir)
    for k, a, b in zip(report.sweep_steps, report.sweep_w1, report.sweep_rme):
        print(f"K={k:<4d} W1={a:.6f}  RME={b:.6f}")
    for t in report.timing:
        print(f"{t.method}-{t.steps}: median {t.median_ns / 1e6:.3f} ms "
              f"(sd {t.sd_ns / 1e6:.3f})")
    print(f"hardware: {report.hardware}")
    return EXIT_OK


# --------------------------------------------------------------- main ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wfrmfm",
        description="Population mean-field matching: data generation, "
                    "training, one-step inference, evaluation, benchmarks.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap linear-algebra threads (env WFR_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    p.add_argument("--dataset", required=True,
                   choices=["gene", "gaussian", "perturb"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n0", type=int, default=400,
                   help="initial cells (gene)")
    p.add_argument("--dim", type=int, default=1000,
                   help="ambient dimension (gaussian)")
    p.add_argument("--conditions", type=int, default=50,
                   help="number of conditions (perturb)")
    p.add_argument("--train-split", type=int, default=20,
                   help="training conditions out of --conditions (perturb)")
    p.add_argument("--cells", type=int, default=200,
                   help="cells per condition (perturb)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit mean fields to snapshot data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--condition-mode", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--p-diff", type=float, default=None)
    p.add_argument("--growth-weight", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--oet-batch", type=int, default=None)
    p.add_argument("--cond-batch", type=int, default=None)
    p.add_argument("--segment-mode", default=None,
                   choices=["duration", "per-segment"])
    p.add_argument("--weight-mode", default=None,
                   choices=["mass", "mass-over-prob"])
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="propagate a snapshot file forward")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None,
                   help="windows per snapshot segment (default 1)")
    p.add_argument("--partition", choices=["data"], default=None,
                   help="'data': one window per snapshot segment")
    p.add_argument("--condition", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="speed-accuracy sweep for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-list", default="1,2,5,10,20,50,100")
    p.add_argument("--repeats", type=int, default=1000)
    p.add_argument("--euler-repeats", type=int, default=100)
    p.add_argument("--condition", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    from .config import DataError, NumericError
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
