"""Shared numeric guards, default heuristics, and error types.

Every hand-tuned tolerance used by the numerical core lives here so that the
values are set in exactly one place.
"""

# Masses below this are treated as vanished (used for positivity guards).
TOL_MASS = 1e-9

# Denominators below this are treated as degenerate (no transport happening).
TOL_DENOM = 1e-12

# Sentinel stored in cost matrices for pairs beyond the cone-metric cutoff.
# Large enough that exp(-COST_INF / epsilon) underflows to zero for any
# reasonable epsilon, small enough to stay finite in double precision.
COST_INF = 1e9

# Default entropic regularization: this fraction of the median finite cost.
EPSILON_COST_FRACTION = 0.05

# Default sampling bandwidth: this fraction of the median nearest-neighbor
# distance in the source cloud.
SIGMA_NN_FRACTION = 0.05

# Training tuples never sample the mass curve below this value; local times
# are capped just before the curve crosses it, keeping the velocity and
# growth fields finite on nearly-dying paths.
MASS_FLOOR = 1e-6


class DataError(ValueError):
    """Malformed or inconsistent input data (bad shapes, bad files, bad ids)."""


class NumericError(ArithmeticError):
    """Numeric failure: non-convergence, NaN loss, degenerate geometry."""
