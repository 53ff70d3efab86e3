"""Closed-form geometry of unbalanced mass transport between weighted points.

Two weighted points (a source with mass ``m0`` at ``x0`` and a target with
mass ``m1`` at ``x1``) are joined by a "traveling Dirac": a point that moves
along the segment from ``x0`` to ``x1`` while its mass follows a quadratic
curve.  Everything about that path has a closed form, which this module
exposes: the squared distance, the path constants, the mass curve, the time
reparameterization, and the instantaneous velocity / growth fields.

The geometry carries a length scale ``delta``: beyond distance
``pi * delta`` transport is impossible and mass must be created or destroyed
instead.  Functions that build a path refuse such pairs loudly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import NumericError, TOL_DENOM, TOL_MASS

__all__ = [
    "GeodesicConstants",
    "cos_plus",
    "wfr_dd_sq",
    "geodesic_constants",
    "geodesic_constants_batch",
    "mass_at",
    "lambda_at",
    "dirac_path_state",
]


def cos_plus(x):
    """Cosine clipped at the quarter period: ``cos(min(x, pi/2))``.

    Nonincreasing on ``x >= 0`` and identically zero for ``x >= pi/2``.
    Accepts scalars or arrays; negative entries raise ``ValueError``.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("cos_plus is only defined for nonnegative arguments")
    out = np.cos(np.minimum(x, np.pi / 2.0))
    return out if out.ndim else float(out)


def wfr_dd_sq(m0, x0, m1, x1, delta):
    """Squared cone-metric distance between two weighted points.

    Parameters
    ----------
    m0, m1 : float
        Nonnegative masses of the two points.
    x0, x1 : array-like
        Positions in R^d.
    delta : float
        Positive length scale of the metric.

    Returns
    -------
    float
        ``2 * delta**2 * (m0 + m1 - 2*sqrt(m0*m1) * cos_plus(dist / (2*delta)))``.

    The value is symmetric in the two points and zero exactly when they
    coincide in both position and mass.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if m0 < 0 or m1 < 0:
        raise ValueError("masses must be nonnegative")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    dist = float(np.linalg.norm(x1 - x0))
    c = cos_plus(dist / (2.0 * delta))
    return 2.0 * delta * delta * (m0 + m1 - 2.0 * np.sqrt(m0 * m1) * c)


@dataclass
class GeodesicConstants:
    """Constants of one traveling-Dirac path.

    The mass curve is ``m(t) = A t^2 - 2 B t + m0`` on local time ``t`` in
    [0, 1], and the momentum ``omega0`` satisfies ``u(t) * m(t) = omega0``
    for the instantaneous velocity ``u``.  Fields may be scalars (one pair)
    or aligned arrays (a batch of pairs); all formulas broadcast.
    """

    A: np.ndarray
    B: np.ndarray
    omega0: np.ndarray
    tau: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    l: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    delta: float


def geodesic_constants(x0, x1, m0, m1, delta) -> GeodesicConstants:
    """Build the traveling-Dirac constants for a single pair of points.

    Requires ``m0 > 0``, ``m1 >= 0`` and ``norm(x1 - x0) < pi * delta``
    (strict: equality is already outside the cone and raises).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 must have the same shape")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if m0 <= TOL_MASS:
        raise ValueError(f"source mass must be positive, got {m0}")
    if m1 < 0:
        raise ValueError(f"target mass must be nonnegative, got {m1}")
    dist = float(np.linalg.norm(x1 - x0))
    if dist >= np.pi * delta:
        raise NumericError(
            f"pair at distance {dist:.6g} is outside the transport cone "
            f"(limit {np.pi * delta:.6g}); route it to creation/destruction"
        )
    if dist > 0:
        l = (x1 - x0) / dist
    else:
        l = np.zeros_like(x0)
    tau = np.tan(dist / (2.0 * delta))
    s = np.sqrt(m0 * m1 / (1.0 + tau * tau))
    A = m0 + m1 - 2.0 * s
    B = m0 - s
    omega0 = 2.0 * delta * tau * s * l
    return GeodesicConstants(
        A=float(A), B=float(B), omega0=omega0, tau=float(tau),
        m0=float(m0), m1=float(m1), l=l, x0=x0, x1=x1, delta=float(delta),
    )


def geodesic_constants_batch(x0, x1, m0, m1, delta) -> GeodesicConstants:
    """Vectorized :func:`geodesic_constants` over aligned arrays of pairs.

    ``x0``/``x1`` have shape (n, d), ``m0``/``m1`` shape (n,).  Any pair at
    or beyond the cone cutoff raises, exactly like the scalar version.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    m0 = np.asarray(m0, dtype=np.float64)
    m1 = np.asarray(m1, dtype=np.float64)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if np.any(m0 <= TOL_MASS):
        raise ValueError("all source masses must be positive")
    if np.any(m1 < 0):
        raise ValueError("target masses must be nonnegative")
    diff = x1 - x0
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist >= np.pi * delta):
        bad = int(np.argmax(dist >= np.pi * delta))
        raise NumericError(
            f"pair {bad} at distance {dist[bad]:.6g} is outside the "
            f"transport cone (limit {np.pi * delta:.6g})"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        l = np.where(dist[:, None] > 0, diff / np.where(dist == 0, 1.0, dist)[:, None], 0.0)
    tau = np.tan(dist / (2.0 * delta))
    s = np.sqrt(m0 * m1 / (1.0 + tau * tau))
    A = m0 + m1 - 2.0 * s
    B = m0 - s
    omega0 = (2.0 * delta * tau * s)[:, None] * l
    return GeodesicConstants(A=A, B=B, omega0=omega0, tau=tau, m0=m0, m1=m1,
                             l=l, x0=x0, x1=x1, delta=float(delta))


def mass_at(gc: GeodesicConstants, t):
    """Mass of the traveling Dirac at local time ``t``: ``A t^2 - 2 B t + m0``."""
    t = np.asarray(t, dtype=np.float64)
    return gc.A * t * t - 2.0 * gc.B * t + gc.m0


def lambda_at(gc: GeodesicConstants, t):
    """Time reparameterization ``Lambda(t) = integral_0^t ds / m(s)`` in closed form.

    Only defined when transport actually occurs: the discriminant
    ``m0 * A - B^2`` must exceed the degeneracy guard.  When ``omega0``
    vanishes the caller must skip Lambda entirely (the position is frozen),
    so a degenerate discriminant raises instead of returning garbage.
    """
    disc = gc.m0 * gc.A - gc.B * gc.B
    if np.any(np.asarray(disc) <= TOL_DENOM):
        raise NumericError(
            "lambda_at called on a pair with (numerically) no transport; "
            "position is constant there and Lambda is undefined"
        )
    root = np.sqrt(disc)
    t = np.asarray(t, dtype=np.float64)
    return (np.arctan((gc.A * t - gc.B) / root) - np.arctan(-gc.B / root)) / root


def dirac_path_state(gc: GeodesicConstants, t):
    """State of the traveling Dirac at local time ``t``.

    Returns
    -------
    (position, mass, u, g)
        ``position`` is ``x0 + omega0 * Lambda(t)`` (just ``x0`` when there
        is no transport), ``mass`` the quadratic mass curve, ``u`` the
        instantaneous velocity ``omega0 / m(t)`` and ``g`` the instantaneous
        relative growth ``d/dt log m(t) = (2 A t - 2 B) / m(t)``.
    """
    m = mass_at(gc, t)
    scalar = np.ndim(gc.A) == 0
    omega_norm = np.linalg.norm(np.atleast_2d(gc.omega0), axis=1)
    moving = omega_norm >= TOL_DENOM
    if np.any(np.atleast_1d(m) <= TOL_MASS):
        raise NumericError("mass curve reached zero; path fields are undefined there")
    if scalar:
        if moving[0]:
            pos = gc.x0 + gc.omega0 * lambda_at(gc, t)
        else:
            pos = gc.x0.copy()
        u = gc.omega0 / m
        g = (2.0 * gc.A * t - 2.0 * gc.B) / m
        return pos, float(m), u, float(g)
    # batched: bypass Lambda on the non-moving rows
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(gc.A)).copy()
    lam = np.zeros_like(t)
    if np.any(moving):
        sub = GeodesicConstants(
            A=gc.A[moving], B=gc.B[moving], omega0=gc.omega0[moving],
            tau=gc.tau[moving], m0=gc.m0[moving], m1=gc.m1[moving],
            l=gc.l[moving], x0=gc.x0[moving], x1=gc.x1[moving], delta=gc.delta,
        )
        lam[moving] = lambda_at(sub, t[moving])
    pos = gc.x0 + gc.omega0 * lam[:, None]
    u = gc.omega0 / m[:, None]
    g = (2.0 * gc.A * t - 2.0 * gc.B) / m
    return pos, m, u, g
