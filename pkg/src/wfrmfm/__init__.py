"""Mean velocity and mass-growth field matching for population snapshots.

The package learns two fields from unpaired population snapshots: a mean
velocity that moves points and a mean growth rate that scales their
masses, both averaged over a time window so inference can jump a whole
window in a single network call.  Submodules:

* ``geometry``: closed-form cone-metric geodesics between weighted points
* ``oet``: entropic unbalanced coupling solver between snapshots
* ``net``: two-head multilayer perceptron with forward-mode derivatives
* ``sampler``: training tuples along geodesics of a coupled snapshot pair
* ``training``: optimizer loop, presets, checkpoints
* ``inference``: one-step and multi-window state/mass propagation
* ``datasets``: synthetic benchmark generators
* ``metrics``: exact 1-Wasserstein distance, mass-error, benchmark sweeps
* ``cli``: command-line pipeline (gen/train/infer/eval/bench)

Submodules load lazily so the command line can cap thread pools before
any numeric library is imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "cli", "config", "data", "datasets", "geometry", "inference",
    "metrics", "net", "oet", "sampler", "training",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
