"""Entropy-relaxed unbalanced transport between weighted clouds.

The solver minimizes

    <C, plan> + KL(plan @ 1 || mu0) + KL(plan.T @ 1 || mu1) + eps * KL(plan || mu0 x mu1)

over nonnegative plans, where ``C`` is the cone-metric cost
``-2 log cos_plus(dist / (2 delta))`` and both marginal KL terms carry unit
weight (the objective is the squared cone distance divided by
``2 delta^2``).  Iterations run entirely in the log domain so that the
divergent costs near the cutoff distance stay harmless.

From the optimal plan two derived objects feed the training pipeline: the
row-normalized semi-coupling (how each source point spreads over targets)
and the per-pair terminal masses (how much relative mass each matched pair
gains or loses).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .config import COST_INF, NumericError
from .data import WeightedCloud

__all__ = [
    "TransportPlan",
    "SemiCoupling",
    "wfr_cost_matrix",
    "solve_oet",
    "brute_force_oet",
    "oet_objective",
    "semi_coupling",
    "pair_masses",
    "minibatch_semi_coupling",
    "write_plan",
    "read_plan",
]


@dataclass
class TransportPlan:
    """Dense nonnegative plan between two clouds, plus solver bookkeeping."""

    entries: np.ndarray
    epsilon: float
    converged: bool
    iterations: int
    objective: float
    source_index: np.ndarray
    target_index: np.ndarray


@dataclass
class SemiCoupling:
    """Row-normalized plan scaled by the source masses.

    Nonzero rows sum to the corresponding source mass; rows whose plan mass
    vanished entirely are flagged ``death_rows`` and stay identically zero.
    When built on a subsample, ``src_indices`` / ``tgt_indices`` map the
    subset back into the full clouds.
    """

    entries: np.ndarray
    death_rows: np.ndarray
    src_indices: Optional[np.ndarray] = None
    tgt_indices: Optional[np.ndarray] = None


def wfr_cost_matrix(src: WeightedCloud, tgt: WeightedCloud, delta: float) -> np.ndarray:
    """Pairwise cone-metric transport cost between two clouds.

    Entries are ``-2 log cos(dist / (2 delta))`` for pairs closer than
    ``pi * delta`` and the finite sentinel ``COST_INF`` for pairs at or
    beyond that cutoff, where transport is impossible.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    dist = cdist(src.points, tgt.points)
    scaled = dist / (2.0 * delta)
    inside = scaled < np.pi / 2.0
    cost = np.full(dist.shape, COST_INF, dtype=np.float64)
    # cos is strictly positive strictly inside the cutoff, so the log is finite
    cost[inside] = -2.0 * np.log(np.cos(scaled[inside]))
    return cost


def _logsumexp_rows(M: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp that tolerates -inf entries and empty rows."""
    mx = np.max(M, axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    s = np.sum(np.exp(M - safe[:, None]), axis=1)
    with np.errstate(divide="ignore"):
        out = np.log(s) + safe
    out[~np.isfinite(mx)] = -np.inf
    return out


def oet_objective(plan: np.ndarray, cost: np.ndarray,
                  m: np.ndarray, n: np.ndarray) -> float:
    """Unregularized objective value of a plan (0 * infinite-cost := 0)."""
    pos = plan > 0
    transport = float(np.sum(plan[pos] * cost[pos]))
    r = plan.sum(axis=1)
    c = plan.sum(axis=0)

    def kl(a, b):
        val = np.sum(b - a)
        live = a > 0
        # pairs with a > 0 but b = 0 have infinite divergence; the solver
        # never produces them because the plan inherits zeros from b
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(live, a / np.where(b > 0, b, 1.0), 1.0)
        if np.any(live & (b <= 0)):
            return np.inf
        return float(val + np.sum(a[live] * np.log(ratio[live])))

    return transport + kl(r, m) + kl(c, n)


def solve_oet(mu0: WeightedCloud, mu1: WeightedCloud, delta: float,
              epsilon: float, max_iter: int = 20000, tol: float = 1e-9) -> TransportPlan:
    """Run log-domain scaling iterations for the entropy-relaxed problem.

    Parameters
    ----------
    mu0, mu1 : WeightedCloud
        Source and target measures.
    delta : float
        Cone length scale defining the cost.
    epsilon : float
        Entropic regularization strength (> 0).
    max_iter : int
        Iteration budget; one iteration updates both potentials.
    tol : float
        Convergence threshold on the sup-norm change of the potentials.

    Returns
    -------
    TransportPlan
        ``converged`` reports whether the threshold was met in budget.
        Infinite-cost pairs carry exactly zero plan mass.  Points with no
        finite-cost partner at all are handled as pure creation or
        destruction (their row / column is zero).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cost = wfr_cost_matrix(mu0, mu1, delta)
    m = mu0.masses
    n = mu1.masses
    finite = cost < COST_INF
    live_row = finite.any(axis=1) & (m > 0)
    live_col = finite.any(axis=0) & (n > 0)
    plan = np.zeros_like(cost)
    n_iter = 0
    converged = True
    if np.any(live_row) and np.any(live_col):
        C = cost[np.ix_(live_row, live_col)]
        lm = np.log(m[live_row])
        ln = np.log(n[live_col])
        M = -C / epsilon
        f = np.zeros(C.shape[0])
        g = np.zeros(C.shape[1])
        shrink = epsilon / (1.0 + epsilon)
        converged = False
        for n_iter in range(1, max_iter + 1):
            f_new = -shrink * _logsumexp_rows(M + (g / epsilon + ln)[None, :])
            g_new = -shrink * _logsumexp_rows((M + (f_new / epsilon + lm)[:, None]).T)
            delta_pot = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
            f, g = f_new, g_new
            if delta_pot < tol:
                converged = True
                break
        live = np.exp((f[:, None] + g[None, :] - C) / epsilon
                      + lm[:, None] + ln[None, :])
        plan[np.ix_(live_row, live_col)] = live
    plan[~finite] = 0.0
    obj = oet_objective(plan, cost, m, n)
    return TransportPlan(entries=plan, epsilon=float(epsilon), converged=converged,
                         iterations=n_iter, objective=obj,
                         source_index=np.arange(mu0.n), target_index=np.arange(mu1.n))


def brute_force_oet(mu0: WeightedCloud, mu1: WeightedCloud, delta: float,
                    n_restarts: int = 4, max_sweeps: int = 20000,
                    tol: float = 1e-13, seed: int = 0):
    """Reference solver for tiny instances (coordinate descent, no entropy).

    Fixing every plan entry except one reduces the objective to a smooth
    convex function of that entry whose minimizer solves
    ``(r + x) (c + x) = m_i n_j exp(-C_ij)``, a quadratic with a single
    nonnegative root.  Sweeping entries to convergence from several starts
    gives the exact unregularized optimum (the problem is jointly convex).

    Returns ``(plan, objective)``.
    """
    if mu0.n > 4 or mu1.n > 4:
        raise ValueError("brute-force reference is restricted to 4x4 instances")
    cost = wfr_cost_matrix(mu0, mu1, delta)
    m, n = mu0.masses, mu1.masses
    K = np.where(cost < COST_INF, np.outer(m, n) * np.exp(-np.minimum(cost, 700.0)), 0.0)
    rng = np.random.default_rng(seed)
    starts = [np.zeros_like(K), K.copy(), np.full_like(K, K.mean() if K.size else 0.0)]
    while len(starts) < max(3, n_restarts):
        starts.append(rng.random(K.shape) * (1.0 + K))
    best_plan, best_obj = None, np.inf
    n0, n1 = K.shape
    for plan in starts[:max(3, n_restarts)]:
        plan = plan.copy()
        rows = plan.sum(axis=1)
        cols = plan.sum(axis=0)
        for _ in range(max_sweeps):
            biggest = 0.0
            for i in range(n0):
                for j in range(n1):
                    old = plan[i, j]
                    r0 = rows[i] - old
                    c0 = cols[j] - old
                    disc = (r0 - c0) ** 2 + 4.0 * K[i, j]
                    x = 0.5 * (-(r0 + c0) + np.sqrt(disc))
                    if x < 0.0:
                        x = 0.0
                    if x != old:
                        plan[i, j] = x
                        rows[i] = r0 + x
                        cols[j] = c0 + x
                        change = abs(x - old)
                        if change > biggest:
                            biggest = change
            if biggest < tol:
                break
        obj = oet_objective(plan, cost, m, n)
        if obj < best_obj:
            best_obj, best_plan = obj, plan
    return best_plan, float(best_obj)


def semi_coupling(plan: TransportPlan, mu0: WeightedCloud) -> SemiCoupling:
    """Rescale each plan row to carry exactly its source mass.

    Rows with zero plan mass represent points the transport destroys
    outright; they stay zero and are flagged.
    """
    entries = plan.entries
    rowsum = entries.sum(axis=1)
    death = rowsum <= 0
    scale = np.where(death, 0.0, mu0.masses / np.where(death, 1.0, rowsum))
    return SemiCoupling(entries=entries * scale[:, None], death_rows=death,
                        src_indices=plan.source_index, tgt_indices=plan.target_index)


def pair_masses(plan: TransportPlan, sc: SemiCoupling, mu1: WeightedCloud) -> np.ndarray:
    """Terminal relative mass of each matched pair (source side starts at 1).

    For a pair (i, j) with positive coupling the terminal mass is the ratio
    of the column-normalized plan (scaled by the target masses) to the
    row-normalized plan (scaled by the source masses).  Entries that carry
    no coupling are returned as 0 and must not be used.
    """
    entries = plan.entries
    rowsum = entries.sum(axis=1)
    colsum = entries.sum(axis=0)
    # m1(i,j) = (mu1_j * rowsum_i) / (mu0_i * colsum_j) wherever plan > 0;
    # the plan entry itself cancels between gamma1 and gamma0
    mu0_masses = sc.entries.sum(axis=1)  # equals mu0 masses on live rows
    with np.errstate(divide="ignore", invalid="ignore"):
        row_fac = np.where(mu0_masses > 0, rowsum / np.where(mu0_masses > 0, mu0_masses, 1.0), 0.0)
        col_fac = np.where(colsum > 0, mu1.masses / np.where(colsum > 0, colsum, 1.0), 0.0)
    out = np.outer(row_fac, col_fac)
    out[entries <= 0] = 0.0
    return out


def minibatch_semi_coupling(mu0: WeightedCloud, mu1: WeightedCloud, batch: int,
                            delta: float, epsilon: float, seed: int,
                            max_iter: int = 20000, tol: float = 1e-9) -> SemiCoupling:
    """Solve on a mass-proportional subsample and map indices back.

    Draws ``batch`` points from each cloud without replacement with
    probability proportional to mass (each kept point then carries an equal
    share of the cloud's total mass), solves the subset problem, and
    returns its semi-coupling with ``src_indices`` / ``tgt_indices`` set.
    A batch of at least the cloud size degenerates to the full solve.
    """
    rng = np.random.default_rng(seed)
    sub0, idx0 = _mass_proportional_subset(mu0, batch, rng)
    sub1, idx1 = _mass_proportional_subset(mu1, batch, rng)
    plan = solve_oet(sub0, sub1, delta, epsilon, max_iter=max_iter, tol=tol)
    sc = semi_coupling(plan, sub0)
    sc.src_indices = idx0
    sc.tgt_indices = idx1
    return sc


def _mass_proportional_subset(cloud: WeightedCloud, batch: int, rng):
    if batch >= cloud.n:
        return cloud, np.arange(cloud.n)
    p = cloud.masses / cloud.total_mass()
    idx = rng.choice(cloud.n, size=batch, replace=False, p=p)
    masses = np.full(batch, cloud.total_mass() / batch)
    sub = WeightedCloud(cloud.points[idx], masses, time=cloud.time,
                        condition_id=cloud.condition_id)
    return sub, idx


def write_plan(plan: TransportPlan, path) -> None:
    """Dump a plan as little-endian binary: magic, n0, n1, epsilon, entries."""
    entries = np.ascontiguousarray(plan.entries, dtype="<f8")
    n0, n1 = entries.shape
    with open(path, "wb") as fh:
        fh.write(b"WFRP")
        fh.write(struct.pack("<IId", n0, n1, plan.epsilon))
        fh.write(entries.tobytes())


def read_plan(path) -> TransportPlan:
    """Read a plan written by :func:`write_plan`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"WFRP":
            raise NumericError(f"{path}: bad magic {magic!r}")
        n0, n1, eps = struct.unpack("<IId", fh.read(16))
        raw = fh.read(8 * n0 * n1)
        if len(raw) != 8 * n0 * n1:
            raise NumericError(f"{path}: truncated plan file")
    entries = np.frombuffer(raw, dtype="<f8").reshape(n0, n1).copy()
    return TransportPlan(entries=entries, epsilon=eps, converged=True,
                         iterations=0, objective=float("nan"),
                         source_index=np.arange(n0), target_index=np.arange(n1))
