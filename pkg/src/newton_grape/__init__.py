"""Newton-Raphson GRAPE optimal control for small spin systems."""

from .spin_model import (
    SpinSystem,
    ChannelSpec,
    StateSpec,
    StateVector,
    build_single_spin_operators,
    build_drift,
    build_controls,
    build_state,
)
from .prop_derivs import expm, slice_propagator_with_derivs, SlicePropagators
from .expm_cache import ExpmCache, CacheKey, CacheStats, matrix_digest, cached_expm
from .grape_core import (
    ControlProblem,
    ControlSequence,
    FidelityReport,
    PenaltySpec,
    fidelity,
    fidelity_gradient,
    fidelity_hessian,
    penalty_eval,
    diff_matrix,
)
from .optimizer import (
    RegularizerSettings,
    LineSearchSettings,
    OptimSettings,
    OptimLog,
    try_cholesky,
    trm_regularize,
    rfo_step,
    line_search,
    optimize,
)

__version__ = "0.1.0"
