"""Training-tuple generation along closed-form transport paths.

A training tuple is a point on (or near) the traveling-Dirac path between a
coupled source/target pair, together with a time pair (t, T), the
instantaneous velocity and growth fields at t, and regression targets built
from a directional derivative of the current network.  This module covers
the whole chain:

* time-pair sampling with a controllable fraction of t < T pairs,
* single-tuple sampling given precomputed path constants,
* the per-segment coupling structure (which pairs exist, how likely each is,
  and what its terminal relative mass is), built from an entropic transport
  solve,
* fully vectorized batch assembly used by the trainer.

Times handed to the network are always global (the data time grid min-max
normalized to [0, 1]); path geometry is computed in per-segment local time
and the fields are rescaled by the segment duration.

Targets are evaluated with the current parameters and returned as plain
arrays: nothing downstream can differentiate through them, which is exactly
the stop-gradient contract the loss requires.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import geometry, net, oet
from .config import (COST_INF, DataError, EPSILON_COST_FRACTION, MASS_FLOOR,
                     NumericError, SIGMA_NN_FRACTION)
from .data import WeightedCloud

__all__ = [
    "TrainingTuple",
    "SegmentCoupling",
    "sample_time_pair",
    "sample_tuple",
    "tuple_weight",
    "assemble_targets",
    "build_segment_coupling",
    "sample_batch",
]

# Plan entries below this fraction of the largest entry carry no usable
# signal; dropping them keeps the pair arrays compact.
_PRUNE_REL = 1e-12


@dataclass
class TrainingTuple:
    """One fully assembled training sample.

    ``u`` and ``g`` are the instantaneous velocity and relative growth of
    the conditional path at time ``t`` (already rescaled to global time);
    ``v_target`` / ``h_target`` are the detached regression targets.
    """

    x: np.ndarray
    t: float
    T: float
    u: np.ndarray
    g: float
    weight: float
    v_target: np.ndarray
    h_target: float
    condition_id: Optional[int] = None


def sample_time_pair(p_diff: float, lo: float, hi: float, rng) -> tuple:
    """Draw a time pair (t, T) with t <= T inside [lo, hi].

    With probability ``1 - p_diff`` the pair is degenerate (t = T, one
    uniform draw); otherwise t and T are the min and max of two independent
    uniforms.
    """
    if not 0.0 <= p_diff <= 1.0:
        raise ValueError(f"p_diff must be a probability, got {p_diff}")
    if not lo < hi:
        raise ValueError(f"empty time interval [{lo}, {hi}]")
    span = hi - lo
    if rng.random() < p_diff:
        a = lo + span * rng.random()
        b = lo + span * rng.random()
        return min(a, b), max(a, b)
    t = lo + span * rng.random()
    return t, t


def _cap_local_time(A, B, m0, s):
    """Largest time <= s at which the mass curve still exceeds MASS_FLOOR.

    The curve is m(s) = A s^2 - 2 B s + m0.  When m(s) has already fallen
    below the floor the first downward crossing replaces s; otherwise s is
    returned unchanged.  Works on scalars and aligned arrays.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    m0 = np.asarray(m0, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    m_s = A * s * s - 2.0 * B * s + m0
    needs = (m_s < MASS_FLOOR) & (m0 >= MASS_FLOOR)
    if not np.any(needs):
        return s if s.ndim else float(s)
    # first root of m(s) = MASS_FLOOR; the linear (A ~ 0) case separately
    head = m0 - MASS_FLOOR
    disc = np.clip(B * B - A * head, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = (B - np.sqrt(disc)) / np.where(A == 0.0, 1.0, A)
        lin = head / np.where(B == 0.0, 1.0, 2.0 * B)
    cross = np.where(A == 0.0, lin, quad)
    capped = np.where(needs, np.clip(cross, 0.0, s), s)
    return capped if capped.ndim else float(capped)


def sample_tuple(gc: geometry.GeodesicConstants, segment, sigma: float,
                 p_diff: float, rng):
    """Sample one raw tuple (x, t, T, u, g) on a single path.

    ``segment`` is the (lo, hi) global-time window of the snapshot pair the
    path belongs to.  The point is drawn from an isotropic Gaussian of
    width ``sigma`` around the path position at t; with ``sigma = 0`` it
    lies on the path exactly.  The returned fields are global-time: the
    local path fields divided by the segment duration.
    """
    lo, hi = float(segment[0]), float(segment[1])
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    t, T = sample_time_pair(p_diff, lo, hi, rng)
    span = hi - lo
    s = (t - lo) / span
    s_c = _cap_local_time(gc.A, gc.B, gc.m0, s)
    if s_c != s:
        tied = t == T
        t = lo + s_c * span
        if tied:
            T = t
        s = s_c
    pos, _, u_loc, g_loc = geometry.dirac_path_state(gc, s)
    x = pos + sigma * rng.standard_normal(size=pos.shape)
    return x, t, T, u_loc / span, g_loc / span


def tuple_weight(gc: geometry.GeodesicConstants, s, sampling_prob=None):
    """Loss weight of a tuple sampled at local time ``s``.

    The default weight is the path mass m(s); pairs are drawn with
    probability proportional to their coupling entry, which together
    realizes the mass-weighted expectation the loss wants.  Passing the
    pair's actual ``sampling_prob`` switches to the literal density-ratio
    weight m(s) / sampling_prob instead.
    """
    w = geometry.mass_at(gc, s)
    if sampling_prob is None:
        return w
    prob = np.asarray(sampling_prob, dtype=np.float64)
    if np.any(prob <= 0):
        raise ValueError("requested a pair with zero sampling probability")
    return w / prob


def assemble_targets(params: net.MeanFieldParams, x, t, T, u, g, cond=None):
    """Regression targets from the derivative identity, detached.

    Evaluates the directional derivative of both heads along direction
    (dx, dt, dT) = (u, 1, 0) and returns

        v_target = u + (T - t) * dv,    h_target = g + (T - t) * dh

    as plain arrays computed with the *current* parameters; no gradient can
    flow through them.  At t = T both targets reduce to the instantaneous
    fields exactly.
    """
    rv, rh = net.jvp(params, x, t, T, u, 1.0, 0.0, cond)
    single = np.asarray(x).ndim == 1
    if single:
        gap = float(T) - float(t)
        v_target = np.asarray(u, dtype=np.float64) + gap * rv.directional_derivative
        h_target = float(g) + gap * rh.directional_derivative
        return v_target, float(h_target)
    gap = (np.asarray(T, dtype=np.float64) - np.asarray(t, dtype=np.float64))
    v_target = np.asarray(u, dtype=np.float64) + gap[:, None] * rv.directional_derivative
    h_target = np.asarray(g, dtype=np.float64) + gap * rh.directional_derivative
    return v_target, h_target


@dataclass
class SegmentCoupling:
    """Sampling-ready coupling between two consecutive snapshots.

    Masses of both clouds are normalized by the source total, so the source
    is a probability vector and target masses carry the relative growth.
    ``pair_src`` / ``pair_tgt`` index the retained positive-coupling pairs;
    destroyed source points appear as self-pairs with ``pair_tgt == -1``
    and terminal mass 0.  ``pair_prob`` sums to 1 and is the sampling law.
    """

    source: WeightedCloud
    target: WeightedCloud
    lo: float
    hi: float
    delta: float
    epsilon: float
    sigma: float
    pair_src: np.ndarray
    pair_tgt: np.ndarray
    pair_prob: np.ndarray
    pair_cum: np.ndarray
    pair_end_mass: np.ndarray
    n_out_of_cone: int
    condition_id: Optional[int] = None

    @property
    def n_pairs(self) -> int:
        return int(self.pair_src.shape[0])


def _median_nn_distance(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return 0.0
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


def build_segment_coupling(source: WeightedCloud, target: WeightedCloud,
                           lo: float, hi: float, delta: float,
                           epsilon: Optional[float] = None,
                           sigma: Optional[float] = None,
                           oet_batch: int = 0, seed: int = 0,
                           condition_id: Optional[int] = None,
                           max_iter: int = 20000,
                           tol: float = 1e-9) -> SegmentCoupling:
    """Solve the segment's transport problem and index its usable pairs.

    ``epsilon = None`` picks the default fraction of the median finite
    transport cost; ``sigma = None`` picks the default fraction of the
    source cloud's median nearest-neighbor distance.  ``oet_batch > 0``
    solves on a mass-proportional subsample of that size per side instead
    of the full clouds (the resulting pair set indexes the subsample's
    points, which is all the sampler needs).
    """
    if not lo < hi:
        raise DataError(f"segment window [{lo}, {hi}] is empty")
    total0 = source.total_mass()
    mu0 = source.scaled(1.0 / total0)
    mu1 = target.scaled(1.0 / total0)

    rng = np.random.default_rng(seed)
    if oet_batch > 0 and (oet_batch < mu0.n or oet_batch < mu1.n):
        sub0, _ = oet._mass_proportional_subset(mu0, oet_batch, rng)
        sub1, _ = oet._mass_proportional_subset(mu1, oet_batch, rng)
    else:
        sub0, sub1 = mu0, mu1

    cost = oet.wfr_cost_matrix(sub0, sub1, delta)
    finite = cost[cost < COST_INF]
    if finite.size == 0:
        raise NumericError(
            f"no source/target pair is within the transport cone at "
            f"delta={delta}; increase delta or check the data scale"
        )
    if epsilon is None:
        scale = float(np.median(finite))
        epsilon = EPSILON_COST_FRACTION * (scale if scale > 0 else 1.0)
    if sigma is None:
        sigma = SIGMA_NN_FRACTION * _median_nn_distance(sub0.points)

    plan = oet.solve_oet(sub0, sub1, delta, epsilon, max_iter=max_iter, tol=tol)
    sc = oet.semi_coupling(plan, sub0)
    end_mass = oet.pair_masses(plan, sc, sub1)

    entries = sc.entries
    keep = entries > _PRUNE_REL * entries.max()
    # a coupled pair beyond the cone cutoff can only be numerical noise;
    # drop it (counted) rather than train on an impossible path
    dist = cdist(sub0.points, sub1.points)
    in_cone = dist < np.pi * delta
    n_out = int(np.count_nonzero(keep & ~in_cone))
    keep &= in_cone

    src_idx, tgt_idx = np.nonzero(keep)
    probs = entries[src_idx, tgt_idx]
    ends = end_mass[src_idx, tgt_idx]

    # rows whose whole coupling vanished: the mass dies in place
    dead = np.flatnonzero(sc.death_rows)
    if dead.size:
        src_idx = np.concatenate([src_idx, dead])
        tgt_idx = np.concatenate([tgt_idx, np.full(dead.size, -1)])
        probs = np.concatenate([probs, sub0.masses[dead]])
        ends = np.concatenate([ends, np.zeros(dead.size)])

    if probs.size == 0:
        raise DataError("segment coupling has no usable pairs")
    probs = probs / probs.sum()
    cum = np.cumsum(probs)

    return SegmentCoupling(
        source=sub0, target=sub1, lo=float(lo), hi=float(hi),
        delta=float(delta), epsilon=float(epsilon), sigma=float(sigma),
        pair_src=src_idx.astype(np.int64), pair_tgt=tgt_idx.astype(np.int64),
        pair_prob=probs, pair_cum=cum, pair_end_mass=ends,
        n_out_of_cone=n_out, condition_id=condition_id,
    )


def sample_batch(couplings: Sequence[SegmentCoupling], counts: Sequence[int],
                 params: net.MeanFieldParams, p_diff: float, rng,
                 weight_mode: str = "mass") -> net.Batch:
    """Assemble one training batch across couplings, fully vectorized.

    ``counts[k]`` tuples are drawn from ``couplings[k]``; the batch is laid
    out coupling by coupling.  The stream consumes randomness in a fixed
    order (pair picks per coupling, then one time block, then one noise
    block), so a single-coupling call is bit-identical no matter how the
    caller decided on the counts.

    ``weight_mode`` is ``"mass"`` (weight = path mass at t, the default) or
    ``"mass-over-prob"`` (the literal density-ratio weight).
    """
    if weight_mode not in ("mass", "mass-over-prob"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    if len(counts) != len(couplings):
        raise ValueError("counts and couplings must align")
    total = int(np.sum(counts))
    if total <= 0:
        raise DataError("empty batch requested")

    picks = []
    for cpl, cnt in zip(couplings, counts):
        cnt = int(cnt)
        if cnt == 0:
            picks.append(None)
            continue
        r = rng.random(cnt)
        pos = np.minimum(np.searchsorted(cpl.pair_cum, r, side="right"),
                         cpl.n_pairs - 1)
        picks.append(pos)

    r_time = rng.random((total, 3))
    d = couplings[0].source.dim
    noise = rng.standard_normal(size=(total, d))

    conditional = any(c.condition_id is not None for c in couplings)
    xs, ts, Ts, us, gs, ws, conds = [], [], [], [], [], [], []
    offset = 0
    for cpl, pos in zip(couplings, picks):
        if pos is None:
            continue
        cnt = pos.shape[0]
        rt = r_time[offset:offset + cnt]
        nz = noise[offset:offset + cnt]
        offset += cnt

        src = cpl.pair_src[pos]
        tgt = cpl.pair_tgt[pos]
        x0 = cpl.source.points[src]
        x1 = np.where((tgt >= 0)[:, None], cpl.target.points[np.maximum(tgt, 0)], x0)
        m1 = cpl.pair_end_mass[pos]
        gc = geometry.geodesic_constants_batch(x0, x1, np.ones(cnt), m1, cpl.delta)

        span = cpl.hi - cpl.lo
        different = rt[:, 0] < p_diff
        a = cpl.lo + span * rt[:, 1]
        b = cpl.lo + span * rt[:, 2]
        t = np.where(different, np.minimum(a, b), a)
        T = np.where(different, np.maximum(a, b), a)
        s = (t - cpl.lo) / span
        s_c = _cap_local_time(gc.A, gc.B, gc.m0, s)
        moved = s_c != s
        if np.any(moved):
            t = np.where(moved, cpl.lo + s_c * span, t)
            T = np.where(moved & ~different, t, T)
            s = s_c

        pos_x, mass, u_loc, g_loc = geometry.dirac_path_state(gc, s)
        xs.append(pos_x + cpl.sigma * nz)
        ts.append(t)
        Ts.append(T)
        us.append(u_loc / span)
        gs.append(g_loc / span)
        if weight_mode == "mass":
            ws.append(mass)
        else:
            ws.append(mass / cpl.pair_prob[pos])
        if conditional:
            if cpl.condition_id is None:
                raise DataError("mixing conditional and unconditional couplings")
            conds.append(np.full(cnt, cpl.condition_id, dtype=np.int64))

    x = np.concatenate(xs, axis=0)
    t = np.concatenate(ts)
    T = np.concatenate(Ts)
    u = np.concatenate(us, axis=0)
    g = np.concatenate(gs)
    w = np.concatenate(ws)
    cond = np.concatenate(conds) if conditional else None

    v_target, h_target = assemble_targets(params, x, t, T, u, g, cond)
    return net.Batch(x=x, t=t, T=T, v_target=v_target, h_target=h_target,
                     weight=w, cond=cond)
