"""Simulation-free propagation of weighted point clouds.

A trained model propagates states and masses directly: over a window
[t, T] the position moves by (T - t) times the mean velocity and the mass
scales by exp((T - t) times the mean growth).  One network evaluation per
point per window; no trajectory integration.  The classic Euler rollout of
the instantaneous fields (t = T diagonal) is included as the reference a
trajectory method would need, used for speed comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import net
from .config import DataError
from .data import WeightedCloud

__all__ = [
    "InferenceResult",
    "one_step",
    "multi_step",
    "euler_rollout",
    "resample_by_weight",
]


@dataclass
class InferenceResult:
    """Final positions and masses, with optional intermediate states.

    ``trail`` (when requested) holds (time, points, masses) after every
    update, starting with the input state.  ``wall_ns`` measures the pure
    propagation loop on a monotonic clock.
    """

    points: np.ndarray
    masses: np.ndarray
    wall_ns: int
    trail: Optional[List[Tuple[float, np.ndarray, np.ndarray]]] = None


def _validated_partition(partition) -> np.ndarray:
    part = np.asarray(partition, dtype=np.float64)
    if part.ndim != 1 or part.size < 2:
        raise DataError("partition needs at least two time points")
    if np.any(np.diff(part) <= 0):
        raise DataError("partition must be strictly increasing")
    if part[0] < 0.0 or part[-1] > 1.0:
        raise DataError("partition must lie within [0, 1]")
    return part


def multi_step(params: net.MeanFieldParams, cloud: WeightedCloud,
               partition, cond=None, keep_trail: bool = False
               ) -> InferenceResult:
    """Propagate through the windows of a strictly increasing partition.

    Per window [t_k, t_{k+1}]: the position update uses the mean velocity
    over the window; the mass update uses the mean growth evaluated at the
    pre-update position.  One network evaluation per point per window.
    """
    part = _validated_partition(partition)
    x = np.array(cloud.points, dtype=np.float64)
    m = np.array(cloud.masses, dtype=np.float64)
    trail = [(float(part[0]), x.copy(), m.copy())] if keep_trail else None
    t0 = time.perf_counter_ns()
    for k in range(part.size - 1):
        lo, hi = float(part[k]), float(part[k + 1])
        span = hi - lo
        v, h = net.forward(params, x, lo, hi, cond)
        m = m * np.exp(span * h)
        x = x + span * v
        if keep_trail:
            trail.append((hi, x.copy(), m.copy()))
    wall = time.perf_counter_ns() - t0
    return InferenceResult(points=x, masses=m, wall_ns=wall, trail=trail)


def one_step(params: net.MeanFieldParams, cloud: WeightedCloud,
             cond=None) -> InferenceResult:
    """Jump the whole horizon in a single evaluation per point.

    Identical (bitwise) to :func:`multi_step` with the trivial partition
    {0, 1}, which is exactly how it is computed.
    """
    return multi_step(params, cloud, (0.0, 1.0), cond)


def euler_rollout(params: net.MeanFieldParams, cloud: WeightedCloud,
                  n_steps: int, cond=None, keep_trail: bool = False
                  ) -> InferenceResult:
    """Fixed-step Euler integration of the instantaneous (t = T) fields.

    This is what a trajectory-based method must do and serves as the
    timing reference; it needs ``n_steps`` network evaluations per point.
    """
    if n_steps < 1:
        raise DataError("n_steps must be at least 1")
    x = np.array(cloud.points, dtype=np.float64)
    m = np.array(cloud.masses, dtype=np.float64)
    dt = 1.0 / n_steps
    trail = [(0.0, x.copy(), m.copy())] if keep_trail else None
    t0 = time.perf_counter_ns()
    for k in range(n_steps):
        t = k * dt
        v, h = net.forward(params, x, t, t, cond)
        m = m * np.exp(dt * h)
        x = x + dt * v
        if keep_trail:
            trail.append(((k + 1) * dt, x.copy(), m.copy()))
    wall = time.perf_counter_ns() - t0
    return InferenceResult(points=x, masses=m, wall_ns=wall, trail=trail)


def resample_by_weight(points: np.ndarray, masses: np.ndarray, n_out: int,
                       rng) -> np.ndarray:
    """Draw ``n_out`` points i.i.d. with probability proportional to mass."""
    points = np.asarray(points, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    if points.shape[0] != masses.shape[0]:
        raise DataError("points and masses must align")
    if np.any(masses < 0):
        raise DataError("masses must be nonnegative")
    total = masses.sum()
    if total <= 0:
        raise DataError("cannot resample: total mass is zero")
    idx = rng.choice(points.shape[0], size=n_out, p=masses / total)
    return points[idx]
