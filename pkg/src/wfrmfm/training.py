"""Training orchestration: configs, couplings, the optimizer, and the loops.

The trainer precomputes one transport coupling per consecutive snapshot pair
(or per condition), then repeatedly samples tuple batches, computes targets
with the current parameters, and applies an adaptive-moment update.  Runs
are bit-reproducible: identical config and seed give identical checkpoints.

Named presets carry the per-dataset hyperparameters used by the benchmark
runs; everything is overridable through :class:`TrainConfig`.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import net, sampler
from .config import DataError, NumericError
from .data import SnapshotDataset

__all__ = [
    "TrainConfig",
    "TrainLog",
    "OptState",
    "PRESETS",
    "preset",
    "precompute_couplings",
    "train",
    "train_conditional",
    "adam_update",
]


@dataclass
class TrainConfig:
    """Everything a training run depends on, JSON-serializable.

    ``epsilon`` and ``sigma`` default to ``None``, meaning "derive from the
    data" (a fraction of the median finite transport cost, and of the
    source cloud's median nearest-neighbor distance, respectively).

    ``segment_mode`` decides how a batch spreads over the K snapshot
    segments: ``"duration"`` draws each tuple's segment with probability
    proportional to its time span (total batch_size tuples per step);
    ``"per-segment"`` draws batch_size tuples from every segment and
    concatenates.  ``weight_mode`` picks the tuple loss weight: ``"mass"``
    (path mass, the default) or ``"mass-over-prob"`` (literal density
    ratio).
    """

    delta: float = 1.5
    delta_rule: str = "fixed"          # "fixed" | "mass-ratio" (conditional)
    epsilon: Optional[float] = None
    sigma: Optional[float] = None
    p_diff: float = 0.5
    growth_weight: float = 1.0
    batch_size: int = 512
    oet_batch: int = 0                 # 0 = solve on the full clouds
    cond_batch: int = 8                # conditions per step (conditional)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    steps: int = 20000
    seed: int = 0
    condition_mode: bool = False
    checkpoint_every: int = 1000
    segment_mode: str = "duration"     # "duration" | "per-segment"
    weight_mode: str = "mass"          # "mass" | "mass-over-prob"
    depth: int = 5
    width: int = 256

    def validate(self) -> "TrainConfig":
        if self.delta_rule not in ("fixed", "mass-ratio"):
            raise DataError(f"unknown delta_rule {self.delta_rule!r}")
        if self.segment_mode not in ("duration", "per-segment"):
            raise DataError(f"unknown segment_mode {self.segment_mode!r}")
        if self.weight_mode not in ("mass", "mass-over-prob"):
            raise DataError(f"unknown weight_mode {self.weight_mode!r}")
        if not 0.0 <= self.p_diff <= 1.0:
            raise DataError("p_diff must be in [0, 1]")
        for name in ("delta", "lr", "beta1", "beta2", "eps_opt"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        for name in ("batch_size", "depth", "width", "cond_batch",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be at least 1")
        for name in ("steps", "oet_batch"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")
        if self.growth_weight < 0:
            raise DataError("growth_weight must be nonnegative")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"bad config JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise DataError("config JSON must be an object")
        return cls.from_dict(d)


PRESETS = {
    # 2-D gene-regulation benchmark: strong growth, mild growth-loss weight.
    # The transport coupling needs to be sharp here: a mean-field model can
    # only land each point on its coupled targets' barycenter, and at the
    # data-derived epsilon that barycenter blur alone costs more transport
    # error than the benchmark budget allows.
    "gene": dict(delta=1.5, p_diff=0.6, growth_weight=0.05, steps=20000,
                 epsilon=1e-3),
    # dyngen-style trees: heavier growth-loss weight
    "dyngen": dict(delta=1.5, p_diff=0.5, growth_weight=5.0, steps=20000),
    # 1000-D Gaussian mixture: almost-always equal time pairs, desk-scale steps
    "gaussian": dict(delta=1.4, p_diff=0.05, growth_weight=1.0, steps=2000),
    # conditional perturbation benchmark: per-condition mass-ratio scale.
    # A smaller batch holds accuracy on this benchmark while keeping a
    # full conditional run inside a desk-scale time budget.
    "perturb": dict(delta=1.0, delta_rule="mass-ratio", p_diff=0.5,
                    growth_weight=0.1, condition_mode=True, steps=8000,
                    batch_size=128),
}


def preset(name: str, **overrides) -> TrainConfig:
    """Named default config, optionally with field overrides."""
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    merged = dict(PRESETS[name])
    merged.update(overrides)
    return TrainConfig.from_dict(merged)


@dataclass
class TrainLog:
    """Per-step scalar training records."""

    records: List[tuple] = field(default_factory=list)

    COLUMNS = ("step", "loss_total", "loss_v", "loss_h", "wall_ms")

    def append(self, step: int, loss_total: float, loss_v: float,
               loss_h: float, wall_ms: float) -> None:
        self.records.append((step, loss_total, loss_v, loss_h, wall_ms))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for rec in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in rec])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise DataError(f"{path}: not a training log")
        for row in rows[1:]:
            log.records.append((int(row[0]), float(row[1]), float(row[2]),
                                float(row[3]), float(row[4])))
        return log


@dataclass
class OptState:
    """Adaptive-moment optimizer state aligned with the parameter arrays."""

    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: net.MeanFieldParams) -> "OptState":
        arrs = params.arrays()
        return cls(step=0, m=[np.zeros_like(a) for a in arrs],
                   v=[np.zeros_like(a) for a in arrs])


def adam_update(params: net.MeanFieldParams, state: OptState,
                grads: net.MeanFieldParams, lr: float, beta1: float,
                beta2: float, eps: float) -> Tuple[net.MeanFieldParams, OptState]:
    """One bias-corrected adaptive-moment step, applied in place.

    Arrays inside ``params`` and ``state`` are updated destructively (and
    returned for convenience).  Zero gradients leave the parameters exactly
    unchanged.
    """
    state.step += 1
    c1 = 1.0 / (1.0 - beta1 ** state.step)
    c2 = 1.0 / (1.0 - beta2 ** state.step)
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.size == 0:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m * c1) / (np.sqrt(v * c2) + eps)
    return params, state


def precompute_couplings(dataset: SnapshotDataset, cfg: TrainConfig,
                         condition_id: Optional[int] = None,
                         delta: Optional[float] = None
                         ) -> List[sampler.SegmentCoupling]:
    """One segment coupling per consecutive snapshot pair."""
    cfg.validate()
    if dataset.n_segments < 1:
        raise DataError("dataset needs at least 2 snapshots to train on")
    times = dataset.normalized_times()
    out = []
    for k in range(dataset.n_segments):
        out.append(sampler.build_segment_coupling(
            dataset.snapshots[k], dataset.snapshots[k + 1],
            lo=times[k], hi=times[k + 1],
            delta=cfg.delta if delta is None else delta,
            epsilon=cfg.epsilon, sigma=cfg.sigma,
            oet_batch=cfg.oet_batch, seed=cfg.seed + k,
            condition_id=condition_id,
        ))
    return out


def _segment_counts(couplings, batch_size: int, mode: str, rng) -> np.ndarray:
    """Tuples per segment for one step; a single segment consumes no draws."""
    K = len(couplings)
    if K == 1:
        return np.array([batch_size])
    if mode == "per-segment":
        return np.full(K, batch_size)
    durations = np.array([c.hi - c.lo for c in couplings])
    draw = rng.choice(K, size=batch_size, p=durations / durations.sum())
    return np.bincount(draw, minlength=K)


def _run_steps(params, counts_fn, cfg: TrainConfig, rng, start_step: int = 0,
               on_checkpoint=None) -> Tuple[net.MeanFieldParams, TrainLog]:
    """Shared optimizer loop for both training entry points."""
    state = OptState.zeros_like(params)
    log = TrainLog()
    last_good = params.copy()
    for step in range(start_step, cfg.steps):
        t0 = time.perf_counter()
        chosen, counts = counts_fn(rng)
        batch = sampler.sample_batch(chosen, counts, params, cfg.p_diff,
                                     rng, cfg.weight_mode)
        loss, grads, (loss_v, loss_h) = net.loss_and_grads(
            params, batch, cfg.growth_weight, return_parts=True)
        if not np.isfinite(loss):
            err = NumericError(
                f"loss became non-finite at step {step}; aborting with the "
                f"parameters from the last checkpoint boundary")
            err.last_params = last_good
            err.failed_step = step
            raise err
        adam_update(params, state, grads, cfg.lr, cfg.beta1, cfg.beta2,
                    cfg.eps_opt)
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.append(step, float(loss), float(loss_v), float(loss_h), wall_ms)
        if (step + 1) % cfg.checkpoint_every == 0:
            last_good = params.copy()
            if on_checkpoint is not None:
                on_checkpoint(step + 1, params)
    return params, log


def train(dataset: SnapshotDataset, cfg: TrainConfig,
          init_params: Optional[net.MeanFieldParams] = None,
          start_step: int = 0, on_checkpoint=None
          ) -> Tuple[net.MeanFieldParams, TrainLog]:
    """Fit mean velocity and growth fields to a snapshot sequence.

    Returns the trained parameters and the per-step log.  ``cfg.steps = 0``
    returns the freshly initialized parameters unchanged.  A non-finite
    loss aborts with a ``NumericError`` carrying ``last_params`` (the
    parameters at the last checkpoint boundary) and ``failed_step``.

    ``init_params`` with ``start_step`` resumes an interrupted run from a
    saved checkpoint: the remaining steps run with a fresh optimizer state
    and a stream of randomness derived from (seed, start_step), so the
    resumed run is deterministic but not bit-identical to the uninterrupted
    one.  ``on_checkpoint(step, params)`` fires at every checkpoint
    boundary.
    """
    cfg.validate()
    couplings = precompute_couplings(dataset, cfg)
    if start_step == 0:
        rng = np.random.default_rng(cfg.seed)
    else:
        rng = np.random.default_rng((cfg.seed, start_step))
    if init_params is None:
        params = net.init(d=dataset.dim, e=0, depth=cfg.depth,
                          width=cfg.width, seed=cfg.seed)
    else:
        params = init_params

    def counts_fn(r):
        return couplings, _segment_counts(couplings, cfg.batch_size,
                                          cfg.segment_mode, r)

    return _run_steps(params, counts_fn, cfg, rng, start_step, on_checkpoint)


def train_conditional(conditions: Sequence[Tuple[int, SnapshotDataset]],
                      cfg: TrainConfig, embeddings: np.ndarray,
                      init_params: Optional[net.MeanFieldParams] = None,
                      start_step: int = 0, on_checkpoint=None
                      ) -> Tuple[net.MeanFieldParams, TrainLog]:
    """Fit conditional fields across perturbation conditions.

    ``conditions`` maps condition ids to their two-snapshot datasets
    (control then perturbed); ``embeddings`` is the frozen descriptor
    table, one row per condition id (ids index into it).  With
    ``delta_rule = "mass-ratio"`` each condition's transport scale is its
    perturbed-to-control mass ratio.  Each step draws ``cond_batch``
    conditions without replacement (all of them, with no randomness
    consumed, when ``cond_batch`` covers every condition), then
    ``batch_size`` tuples per drawn condition; the loss averages over the
    conditions.  With a single condition the whole procedure consumes
    randomness exactly like :func:`train` on that dataset.
    """
    cfg.validate()
    if not conditions:
        raise DataError("no conditions to train on")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise DataError("embeddings must be a 2-D table (one row per id)")

    couplings = []
    for cond_id, ds in conditions:
        if not 0 <= cond_id < embeddings.shape[0]:
            raise DataError(f"condition id {cond_id} has no embedding row")
        if ds.n_segments != 1:
            raise DataError(
                f"condition {cond_id}: expected a control and a perturbed "
                f"snapshot, got {ds.n_segments + 1} snapshots")
        if cfg.delta_rule == "mass-ratio":
            delta_c = (ds.snapshots[1].total_mass()
                       / ds.snapshots[0].total_mass())
        else:
            delta_c = cfg.delta
        cpl = precompute_couplings(ds, cfg, condition_id=cond_id,
                                   delta=delta_c)
        couplings.append(cpl[0])

    dim = conditions[0][1].dim
    if start_step == 0:
        rng = np.random.default_rng(cfg.seed)
    else:
        rng = np.random.default_rng((cfg.seed, start_step))
    if init_params is None:
        params = net.init(d=dim, e=embeddings.shape[1], depth=cfg.depth,
                          width=cfg.width, seed=cfg.seed,
                          n_conditions=embeddings.shape[0])
        params.embedding[...] = embeddings
    else:
        params = init_params

    n_cond = len(couplings)
    take = min(cfg.cond_batch, n_cond)

    def counts_fn(r):
        if take >= n_cond:
            chosen = couplings
        else:
            idx = r.choice(n_cond, size=take, replace=False)
            chosen = [couplings[i] for i in idx]
        return chosen, np.full(len(chosen), cfg.batch_size)

    return _run_steps(params, counts_fn, cfg, rng, start_step, on_checkpoint)
