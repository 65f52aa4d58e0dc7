"""Quantum filtering by repeated indirect measurement and its fractional limits.

Modules
-------
qstate
    Density matrices, probe lifting, Lindblad flows.
chain
    Scaled measurement chains (exact and small-step kernels), trajectories.
generators
    Limit generators, test-function polynomials, convergence references.
sde
    Counting and homodyne filter SDEs, ensembles.
ctrw
    Waiting-time laws, stable subordinators, Caputo derivatives,
    subordinated filtering.
control
    Dynamic programming for controlled chains and games.
experiments, cli
    Named experiments and the command-line runner.
"""

from ._validation import (
    DegenerateStateError,
    FilteringError,
    NumericalError,
    RangeError,
    ShapeError,
    SizingError,
    StepSizeError,
    ValidationError,
)
from .chain import ChannelSpec, HamiltonianSpec, step_asymptotic, step_exact
from .generators import GeneratorSpec, ObservablePolynomial, eval_count, eval_dif, eval_mix
from .qstate import DensityMatrix, PureState, projector_pair
from .sde import SdeConfig, run_ensemble

__version__ = "0.1.0"

__all__ = [
    "ChannelSpec",
    "DegenerateStateError",
    "DensityMatrix",
    "FilteringError",
    "GeneratorSpec",
    "HamiltonianSpec",
    "NumericalError",
    "ObservablePolynomial",
    "PureState",
    "RangeError",
    "SdeConfig",
    "ShapeError",
    "SizingError",
    "StepSizeError",
    "ValidationError",
    "eval_count",
    "eval_dif",
    "eval_mix",
    "projector_pair",
    "run_ensemble",
    "step_asymptotic",
    "step_exact",
]
