"""Evaluation metrics and the benchmark harness.

Two metrics drive all evaluations:

* ``wasserstein1``: the exact 1-Wasserstein distance between two weighted
  clouds with Euclidean ground cost, solved as a sparse transportation
  linear program.  Masses are normalized to probabilities first, so the
  distance measures shape only; mass accuracy is scored separately.
* ``rme``: relative mass error of the predicted total weight against the
  observed count ratio.

``evaluate`` runs the snapshot protocol: propagate the first snapshot's
points forward with uniform initial weights and score every later
snapshot.  ``bench`` sweeps the number of inference windows and records
wall-clock medians against a many-step Euler reference.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from . import inference, net
from .config import DataError, NumericError
from .data import SnapshotDataset, WeightedCloud

__all__ = [
    "EXACT_SOLVE_LIMIT",
    "TimingEntry",
    "EvalReport",
    "wasserstein1",
    "rme",
    "evaluate",
    "bench",
    "linear_fit_r2",
]

# largest cloud solved exactly; bigger clouds are deterministically
# subsampled down to this size first
EXACT_SOLVE_LIMIT = 3000


@dataclass
class TimingEntry:
    """Wall-clock statistics for one inference configuration."""

    method: str
    steps: int
    median_ns: float
    sd_ns: float


@dataclass
class EvalReport:
    """Snapshot scores, window-sweep scores, and timing rows."""

    times: List[float] = field(default_factory=list)
    w1: List[float] = field(default_factory=list)
    rme: List[float] = field(default_factory=list)
    mean_w1: float = math.nan
    mean_rme: float = math.nan
    sweep_steps: List[int] = field(default_factory=list)
    sweep_w1: List[float] = field(default_factory=list)
    sweep_rme: List[float] = field(default_factory=list)
    timing: List[TimingEntry] = field(default_factory=list)
    hardware: str = ""

    def __post_init__(self):
        for v in list(self.w1) + list(self.rme) + list(self.sweep_w1) + list(self.sweep_rme):
            if v < -1e-12:
                raise DataError("metric values must be nonnegative")

    def to_json(self) -> str:
        payload = {
            "times": list(self.times),
            "w1": list(self.w1),
            "rme": list(self.rme),
            "mean_w1": self.mean_w1,
            "mean_rme": self.mean_rme,
            "sweep_steps": list(self.sweep_steps),
            "sweep_w1": list(self.sweep_w1),
            "sweep_rme": list(self.sweep_rme),
            "timing": [vars(t) for t in self.timing],
            "hardware": self.hardware,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        timing = [TimingEntry(**t) for t in raw.pop("timing", [])]
        return cls(timing=timing, **raw)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Flat table: one row per scored snapshot, sweep point, or timing."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["section", "label", "w1", "rme", "median_ns", "sd_ns"])
            for t, a, b in zip(self.times, self.w1, self.rme):
                w.writerow(["snapshot", repr(t), repr(a), repr(b), "", ""])
            if self.times:
                w.writerow(["mean", "", repr(self.mean_w1), repr(self.mean_rme), "", ""])
            for k, a, b in zip(self.sweep_steps, self.sweep_w1, self.sweep_rme):
                w.writerow(["sweep", k, repr(a), repr(b), "", ""])
            for t in self.timing:
                w.writerow(["timing", f"{t.method}-{t.steps}", "", "",
                            repr(t.median_ns), repr(t.sd_ns)])


def _stratified_subsample(points, weights, n_out):
    """Deterministic mass-stratified reduction to ``n_out`` equal-weight points.

    Points are picked at the midpoints of ``n_out`` equal mass strata along
    the cumulative weight profile, so heavy points are retained in
    proportion to their mass and reruns are bit-identical.
    """
    cum = np.cumsum(weights)
    cum /= cum[-1]
    targets = (np.arange(n_out) + 0.5) / n_out
    idx = np.searchsorted(cum, targets, side="left")
    idx = np.minimum(idx, len(weights) - 1)
    return points[idx], np.full(n_out, 1.0 / n_out)


def _prepare(cloud: WeightedCloud):
    pts = np.asarray(cloud.points, dtype=np.float64)
    w = np.asarray(cloud.masses, dtype=np.float64)
    if pts.shape[0] == 0:
        raise DataError("empty cloud")
    total = w.sum()
    if not total > 0:
        raise DataError("cloud mass must be positive")
    w = w / total
    if pts.shape[0] > EXACT_SOLVE_LIMIT:
        warnings.warn(
            f"cloud of {pts.shape[0]} points subsampled to {EXACT_SOLVE_LIMIT} "
            "for the exact transport solve", RuntimeWarning)
        pts, w = _stratified_subsample(pts, w, EXACT_SOLVE_LIMIT)
    return pts, w


def wasserstein1(a: WeightedCloud, b: WeightedCloud) -> float:
    """Exact 1-Wasserstein distance between mass-normalized clouds.

    Solves the discrete transportation linear program with Euclidean
    ground cost.  Both mass vectors are normalized to probabilities, so
    the result is invariant to rescaling either cloud's masses.
    """
    xa, wa = _prepare(a)
    xb, wb = _prepare(b)
    if xa.shape[1] != xb.shape[1]:
        raise DataError(
            f"dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    n, m = len(wa), len(wb)
    cost = cdist(xa, xb).ravel()
    cols = np.arange(n * m)
    row_of = np.repeat(np.arange(n), m)
    col_of = np.tile(np.arange(m), n)
    # row-sum constraints plus all but one column constraint (the dropped
    # one is implied, keeping the system full rank)
    blocks = [sparse.coo_matrix((np.ones(n * m), (row_of, cols)),
                                shape=(n, n * m))]
    rhs = [wa]
    if m > 1:
        keep = col_of < m - 1
        blocks.append(sparse.coo_matrix(
            (np.ones(keep.sum()), (col_of[keep], cols[keep])),
            shape=(m - 1, n * m)))
        rhs.append(wb[:-1])
    A = sparse.vstack(blocks).tocsr()
    res = linprog(cost, A_eq=A, b_eq=np.concatenate(rhs),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericError(f"transport solve failed: {res.message}")
    return float(res.fun)


def rme(predicted_masses: np.ndarray, n_k: float, n_0: float) -> float:
    """Relative error of total predicted weight against the count ratio.

    The protocol starts every source point at weight 1/n_0, so the
    predicted total should land on n_k/n_0.
    """
    if n_0 <= 0 or n_k <= 0:
        raise DataError("counts must be positive")
    ratio = n_k / n_0
    total = float(np.sum(predicted_masses))
    return abs(total - ratio) / ratio


def _uniform_weight_copy(cloud: WeightedCloud) -> WeightedCloud:
    n = cloud.points.shape[0]
    return WeightedCloud(np.asarray(cloud.points, dtype=np.float64).copy(),
                         np.full(n, 1.0 / n), time=cloud.time,
                         condition_id=cloud.condition_id)


def _normalized_grid(dataset: SnapshotDataset) -> np.ndarray:
    grid = np.asarray(dataset.time_grid, dtype=np.float64)
    span = grid[-1] - grid[0]
    if span <= 0:
        raise DataError("time grid must span a positive interval")
    return (grid - grid[0]) / span


def subdivided_partition(knots: np.ndarray, per_segment: int) -> np.ndarray:
    """Partition through every knot, each gap split into uniform windows."""
    parts = [np.asarray([knots[0]])]
    for lo, hi in zip(knots[:-1], knots[1:]):
        parts.append(np.linspace(lo, hi, per_segment + 1)[1:])
    return np.concatenate(parts)


def evaluate(params: net.MeanFieldParams, dataset: SnapshotDataset,
             n_steps: int = 1, cond: Optional[int] = None) -> EvalReport:
    """Score every later snapshot from forward propagation of the first.

    The first snapshot's points start with uniform weights 1/n_0.  The
    prediction for snapshot k steps through every intermediate snapshot
    time (the model is trained within those windows, never across them),
    with each window further split into ``n_steps`` uniform pieces.
    """
    if len(dataset.snapshots) < 2:
        raise DataError("need at least two snapshots to evaluate")
    if n_steps < 1:
        raise DataError("n_steps must be at least 1")
    grid = _normalized_grid(dataset)
    source = _uniform_weight_copy(dataset.snapshots[0])
    n0 = float(np.sum(dataset.snapshots[0].masses))

    times, w1s, rmes = [], [], []
    for k in range(1, len(dataset.snapshots)):
        observed = dataset.snapshots[k]
        partition = subdivided_partition(grid[:k + 1], n_steps)
        result = inference.multi_step(params, source, partition, cond=cond)
        pred = WeightedCloud(result.points, result.masses, time=observed.time)
        times.append(float(dataset.time_grid[k]))
        w1s.append(wasserstein1(pred, observed))
        rmes.append(rme(result.masses, float(np.sum(observed.masses)), n0))

    return EvalReport(times=times, w1=w1s, rme=rmes,
                      mean_w1=float(np.mean(w1s)),
                      mean_rme=float(np.mean(rmes)),
                      hardware=_hardware_string())


def _hardware_string() -> str:
    desc = f"{platform.machine()} python{platform.python_version()} numpy{np.__version__}"
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    desc = line.split(":", 1)[1].strip() + " | " + desc
                    break
    except OSError:
        pass
    return desc


def bench(params: net.MeanFieldParams, source: WeightedCloud,
          target: WeightedCloud, k_list: Sequence[int] = (1, 2, 5, 10, 20, 50, 100),
          repeats: int = 1000, euler_repeats: int = 100,
          euler_steps: int = 100, grid: Optional[Sequence[float]] = None,
          cond: Optional[int] = None) -> EvalReport:
    """Sweep window counts: accuracy per K plus wall-clock medians.

    ``grid`` holds the normalized snapshot times the model was trained
    between (default a single [0, 1] window); each K splits every grid
    window into K uniform pieces.  The reference row integrates the
    instantaneous fields with ``euler_steps`` Euler steps, timed over
    fewer repeats because each run is slow.
    """
    if not k_list:
        raise DataError("k_list must be nonempty")
    knots = np.asarray((0.0, 1.0) if grid is None else grid, dtype=np.float64)
    if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
        raise DataError("grid must be strictly increasing")
    src = _uniform_weight_copy(source)
    n0 = float(np.sum(source.masses))
    nk = float(np.sum(target.masses))

    sweep_steps, sweep_w1, sweep_rme, timing = [], [], [], []
    for k in k_list:
        if k < 1:
            raise DataError("window counts must be positive")
        partition = subdivided_partition(knots, int(k))
        samples = np.empty(repeats)
        result = None
        for r in range(repeats):
            result = inference.multi_step(params, src, partition, cond=cond)
            samples[r] = result.wall_ns
        pred = WeightedCloud(result.points, result.masses, time=target.time)
        sweep_steps.append(int(k))
        sweep_w1.append(wasserstein1(pred, target))
        sweep_rme.append(rme(result.masses, nk, n0))
        timing.append(TimingEntry("mean-flow", int(k),
                                  float(np.median(samples)),
                                  float(np.std(samples))))

    samples = np.empty(euler_repeats)
    for r in range(euler_repeats):
        res = inference.euler_rollout(params, src, euler_steps, cond=cond)
        samples[r] = res.wall_ns
    timing.append(TimingEntry("euler", int(euler_steps),
                              float(np.median(samples)),
                              float(np.std(samples))))

    return EvalReport(sweep_steps=sweep_steps, sweep_w1=sweep_w1,
                      sweep_rme=sweep_rme, timing=timing,
                      hardware=_hardware_string())


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares line through (x, y); returns (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise DataError("need at least two points to fit a line")
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2
