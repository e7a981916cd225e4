"""Control barrier functions for high-dimensional systems built from reduced-order models."""

from .core import (
    CascadeTwoLayer,
    ClassKInf,
    ConstraintFunction,
    ControlAffineSystem,
    EulerLagrangeSystem,
    MixedCascadeTwoLayer,
    MultiLayerCascade,
    el_to_affine,
    lie_derivatives,
    lift_cascade,
    lift_mixed,
    lift_multi,
)
from .filters import (
    CbfCandidate,
    IssfParams,
    MultiplierFormula,
    SafetyFilter,
    ab_terms,
    filter_input,
    issf_filter_input,
    issf_inflation,
    multiplier,
    validity_scan,
)
from .backstepping import RomController, backstep, extended_cbf, mixed_backstep, recursive_backstep
from .sim import Scenario, Trajectory, hdot_check, integrate, monitor, sweep
from .scenarios import build, list_scenarios

__version__ = "0.1.0"

__all__ = [
    "CascadeTwoLayer",
    "ClassKInf",
    "ConstraintFunction",
    "ControlAffineSystem",
    "EulerLagrangeSystem",
    "MixedCascadeTwoLayer",
    "MultiLayerCascade",
    "el_to_affine",
    "lie_derivatives",
    "lift_cascade",
    "lift_mixed",
    "lift_multi",
    "CbfCandidate",
    "IssfParams",
    "MultiplierFormula",
    "SafetyFilter",
    "ab_terms",
    "filter_input",
    "issf_filter_input",
    "issf_inflation",
    "multiplier",
    "validity_scan",
    "RomController",
    "backstep",
    "extended_cbf",
    "mixed_backstep",
    "recursive_backstep",
    "Scenario",
    "Trajectory",
    "hdot_check",
    "integrate",
    "monitor",
    "sweep",
    "build",
    "list_scenarios",
]
