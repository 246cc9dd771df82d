"""sfrkit: frequency-nadir prediction from modal decomposition plus a
permutation-equivariant estimator of modal coefficients, validated against a
built-in nonlinear time-domain simulator."""

__version__ = "0.1.0"

from .errors import SfrkitError
from .grid import (GridCase, OperatingPoint, StateLayout, apply_unit_commitment,
                   bundled_case_path, commitment_key, init_dynamic_equilibrium,
                   load_case, solve_power_flow)
from .dynamics import (DisturbanceEvent, Trajectory, coi_frequency,
                       dae_residual, measure_nadir, simulate)

__all__ = [
    "SfrkitError", "GridCase", "OperatingPoint", "StateLayout",
    "apply_unit_commitment", "bundled_case_path", "commitment_key",
    "init_dynamic_equilibrium", "load_case", "solve_power_flow",
    "DisturbanceEvent", "Trajectory", "coi_frequency", "dae_residual",
    "measure_nadir", "simulate", "__version__",
]
