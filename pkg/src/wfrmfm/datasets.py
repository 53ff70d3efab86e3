"""Synthetic benchmark generators: branching gene circuits and mixtures.

Three generators cover the benchmark suite:

* a three-gene mutual-inhibition circuit with cell division, recorded as
  2-D snapshots at five times (population grows severalfold),
* a perturbation benchmark: many conditions of the same circuit with
  condition-specific basal rates and probabilistic cell death, each giving
  a control / perturbed cloud pair plus a descriptor triple,
* a high-dimensional two-cluster Gaussian mixture whose upper component
  grows and whose lower component splits in two.

Every numeric constant lives in an explicit config dataclass so a run's
manifest can record the exact generating process.  All generators are
bit-deterministic under their seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import DataError
from .data import SnapshotDataset, WeightedCloud, load_snapshots, save_snapshots

__all__ = [
    "GeneCircuitConfig",
    "PerturbationConfig",
    "GaussianMixtureConfig",
    "PerturbationSpec",
    "gen_gene_dataset",
    "gen_perturbation_benchmark",
    "gen_gaussian_mixture",
    "condition_embeddings",
    "load_snapshots",
]


@dataclass(frozen=True)
class GeneCircuitConfig:
    """Constants of the division benchmark's gene circuit.

    Genes 1 and 2 activate themselves and inhibit each other (a toggle
    switch with basal expression); gene 3 is self-activating with no basal
    term and stays near zero.  Division probability per unit time follows
    gene 2's expression, so the gene-2-high branch drives the population
    growth.
    """

    self_activation: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    basal: float = 0.25
    cross_inhibition: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    decay: Tuple[float, float, float] = (0.4, 0.4, 0.4)
    noise: Tuple[float, float, float] = (0.08, 0.08, 0.02)
    division_amplitude: float = 0.06
    dt: float = 0.01
    division_jitter: float = 0.03
    snapshot_times: Tuple[float, ...] = (0.0, 8.0, 16.0, 24.0, 32.0)
    # two starting subpopulations: undecided cells near the saddle and
    # cells already settled on the gene-1-high branch
    undecided_fraction: float = 0.5
    undecided_center: Tuple[float, float, float] = (0.6, 0.6, 0.05)
    settled_center: Tuple[float, float, float] = (2.3, 0.1, 0.05)
    init_spread: float = 0.1
    recorded_dims: int = 2


@dataclass(frozen=True)
class PerturbationConfig:
    """Constants of the conditional death benchmark.

    Each condition adds its own basal rates to genes 1 and 2 and scales the
    death probability, which follows gene 3's expression.  Gene 3 has a
    fixed basal rate so it settles at a nonzero level and the death signal
    is visible in the recorded state.
    """

    self_activation: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    cross_inhibition: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    decay: Tuple[float, float, float] = (0.4, 0.4, 0.4)
    noise: Tuple[float, float, float] = (0.08, 0.08, 0.05)
    basal3: float = 0.3
    rate_max: float = 2.0        # conditions draw basal rates from [0, rate_max]
    death_max: float = 1.0       # and death amplitudes from [0, death_max]
    dt: float = 0.01
    horizon: float = 1.0
    init_center: Tuple[float, float, float] = (0.6, 0.6, 0.3)
    init_spread: float = 0.15


@dataclass(frozen=True)
class GaussianMixtureConfig:
    """Constants of the high-dimensional mixture benchmark.

    Structure lives in the first two coordinates; the rest are isotropic
    noise.  The upper component grows tenfold in count; the lower
    component's mass splits into two symmetric locations.
    """

    component_std: float = 0.05
    upper_center: Tuple[float, float] = (0.0, 4.0)
    lower_center: Tuple[float, float] = (0.0, -4.0)
    lower_split_left: Tuple[float, float] = (-3.0, -4.0)
    lower_split_right: Tuple[float, float] = (3.0, -4.0)
    source_counts: Tuple[int, int] = (100, 400)        # upper, lower
    target_counts: Tuple[int, int, int] = (1000, 200, 200)  # upper, left, right


@dataclass
class PerturbationSpec:
    """Descriptor of one perturbation condition."""

    condition_id: int
    rate1: float
    rate2: float
    death_amplitude: float
    n_cells: int

    def triple(self) -> np.ndarray:
        return np.array([self.rate1, self.rate2, self.death_amplitude])


def _circuit_drift(X, self_act, basal_vec, cross, decay):
    """Shared drift of the three-gene circuit.

    ``basal_vec`` holds the additive numerator terms (basal expression or
    condition rates) per gene.  Gene 1 is inhibited by genes 2 and 3,
    gene 2 by genes 1 and 3; gene 3 only activates itself.  The basal term
    of genes 1 and 2 also enters their denominators (saturating form).
    """
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    a1, a2, a3 = self_act
    g1, g2, g3 = cross
    s1 = a1 * x1 * x1
    s2 = a2 * x2 * x2
    s3 = a3 * x3 * x3
    d1 = (basal_vec[0] + s1) / (1.0 + s1 + g2 * x2 * x2 + g3 * x3 * x3 + basal_vec[0]) - decay[0] * x1
    d2 = (basal_vec[1] + s2) / (1.0 + g1 * x1 * x1 + s2 + g3 * x3 * x3 + basal_vec[1]) - decay[1] * x2
    d3 = (basal_vec[2] + s3) / (1.0 + s3 + basal_vec[2]) - decay[2] * x3
    return np.stack([d1, d2, d3], axis=1)


def gen_gene_dataset(n0: int = 400, seed: int = 0,
                     config: Optional[GeneCircuitConfig] = None
                     ) -> SnapshotDataset:
    """Simulate the dividing gene circuit and record five 2-D snapshots.

    The population starts as ``n0`` cells split between an undecided
    subpopulation (which bifurcates onto both branches) and one already on
    the gene-1-high branch.  Cells divide with probability proportional to
    gene 2's saturated expression; daughters copy the parent plus a small
    jitter.  Snapshots record the first two genes with unit masses.
    """
    if n0 < 10:
        raise DataError("need at least 10 initial cells")
    cfg = config or GeneCircuitConfig()
    rng = np.random.default_rng(seed)

    n_und = int(round(cfg.undecided_fraction * n0))
    centers = np.vstack([
        np.tile(cfg.undecided_center, (n_und, 1)),
        np.tile(cfg.settled_center, (n0 - n_und, 1)),
    ])
    X = np.abs(centers + cfg.init_spread * rng.standard_normal((n0, 3)))

    noise = np.asarray(cfg.noise)
    basal_vec = (cfg.basal, cfg.basal, 0.0)
    sq_dt = np.sqrt(cfg.dt)
    times = cfg.snapshot_times
    snaps: List[WeightedCloud] = []
    step_marks = [int(round(t / cfg.dt)) for t in times]
    total_steps = step_marks[-1]

    mark = 0
    for step in range(total_steps + 1):
        if mark < len(step_marks) and step == step_marks[mark]:
            pts = X[:, :cfg.recorded_dims].copy()
            snaps.append(WeightedCloud(pts, np.ones(X.shape[0]),
                                       time=times[mark]))
            mark += 1
        if step == total_steps:
            break
        drift = _circuit_drift(X, cfg.self_activation, basal_vec,
                               cfg.cross_inhibition, cfg.decay)
        X = np.abs(X + drift * cfg.dt
                   + noise * sq_dt * rng.standard_normal(X.shape))
        x2 = X[:, 1]
        rate = cfg.division_amplitude * x2 * x2 / (1.0 + x2 * x2)
        dividing = rng.random(X.shape[0]) < rate * cfg.dt
        k = int(np.count_nonzero(dividing))
        if k:
            daughters = (X[dividing]
                         + cfg.division_jitter * rng.standard_normal((k, 3)))
            X = np.vstack([X, np.abs(daughters)])

    return SnapshotDataset(snaps, time_grid=list(times))


def _simulate_condition(spec: PerturbationSpec, cfg: PerturbationConfig,
                        rng) -> SnapshotDataset:
    """Control cloud at time 0, perturbed-and-culled cloud at the horizon."""
    X = np.abs(np.asarray(cfg.init_center)
               + cfg.init_spread * rng.standard_normal((spec.n_cells, 3)))
    control = WeightedCloud(X.copy(), np.ones(spec.n_cells), time=0.0,
                            condition_id=spec.condition_id)

    noise = np.asarray(cfg.noise)
    basal_vec = (spec.rate1, spec.rate2, cfg.basal3)
    sq_dt = np.sqrt(cfg.dt)
    n_steps = int(round(cfg.horizon / cfg.dt))
    for _ in range(n_steps):
        drift = _circuit_drift(X, cfg.self_activation, basal_vec,
                               cfg.cross_inhibition, cfg.decay)
        X = np.abs(X + drift * cfg.dt
                   + noise * sq_dt * rng.standard_normal(X.shape))
        x3 = X[:, 2]
        rate = spec.death_amplitude * x3 * x3 / (1.0 + x3 * x3)
        X = X[rng.random(X.shape[0]) >= rate * cfg.dt]
        if X.shape[0] == 0:
            raise DataError(
                f"condition {spec.condition_id}: the whole population died")

    perturbed = WeightedCloud(X, np.ones(X.shape[0]), time=1.0,
                              condition_id=spec.condition_id)
    return SnapshotDataset([control, perturbed], time_grid=[0.0, 1.0])


def gen_perturbation_benchmark(n_conditions: int, n_train: int, seed: int = 0,
                               n_cells: int = 200,
                               config: Optional[PerturbationConfig] = None
                               ) -> Tuple[List[Tuple[PerturbationSpec, SnapshotDataset]],
                                          List[Tuple[PerturbationSpec, SnapshotDataset]]]:
    """Sample conditions, simulate each, and split train / held-out.

    Condition descriptors (two basal rates and a death amplitude) are drawn
    uniformly from their ranges.  Condition ids are global: 0..n-1, the
    first ``n_train`` of the shuffled order forming the training split.
    """
    if not 0 < n_train < n_conditions:
        raise DataError("need 0 < n_train < n_conditions")
    cfg = config or PerturbationConfig()
    rng = np.random.default_rng(seed)

    specs = []
    for cid in range(n_conditions):
        specs.append(PerturbationSpec(
            condition_id=cid,
            rate1=float(cfg.rate_max * rng.random()),
            rate2=float(cfg.rate_max * rng.random()),
            death_amplitude=float(cfg.death_max * rng.random()),
            n_cells=n_cells,
        ))

    pairs = [(spec, _simulate_condition(spec, cfg, rng)) for spec in specs]
    order = rng.permutation(n_conditions)
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train:]]
    return train, test


def condition_embeddings(train_specs: Sequence[PerturbationSpec],
                         all_specs: Sequence[PerturbationSpec]) -> np.ndarray:
    """Descriptor table standardized by the training conditions.

    Returns one row per condition id (rows of conditions absent from
    ``all_specs`` are zero).  Standardization statistics come from the
    training split only, so held-out conditions leak nothing.
    """
    if not train_specs:
        raise DataError("no training conditions to standardize over")
    train_mat = np.stack([s.triple() for s in train_specs])
    mean = train_mat.mean(axis=0)
    std = train_mat.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    n_rows = max(s.condition_id for s in all_specs) + 1
    table = np.zeros((n_rows, train_mat.shape[1]))
    for s in all_specs:
        table[s.condition_id] = (s.triple() - mean) / std
    return table


def gen_gaussian_mixture(d: int = 1000, seed: int = 0,
                         config: Optional[GaussianMixtureConfig] = None
                         ) -> SnapshotDataset:
    """Two-snapshot high-dimensional mixture with growth and splitting."""
    if d < 2:
        raise DataError("dimension must be at least 2")
    cfg = config or GaussianMixtureConfig()
    rng = np.random.default_rng(seed)

    def component(center2, n):
        mean = np.zeros(d)
        mean[0], mean[1] = center2
        return mean + cfg.component_std * rng.standard_normal((n, d))

    nu, nl = cfg.source_counts
    src = np.vstack([component(cfg.upper_center, nu),
                     component(cfg.lower_center, nl)])
    tu, tl, tr = cfg.target_counts
    tgt = np.vstack([component(cfg.upper_center, tu),
                     component(cfg.lower_split_left, tl),
                     component(cfg.lower_split_right, tr)])

    snaps = [WeightedCloud(src, np.ones(src.shape[0]), time=0.0),
             WeightedCloud(tgt, np.ones(tgt.shape[0]), time=1.0)]
    return SnapshotDataset(snaps, time_grid=[0.0, 1.0])
