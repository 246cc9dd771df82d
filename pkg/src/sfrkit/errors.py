"""Exception hierarchy for sfrkit.

Every failure raised on purpose by the library derives from SfrkitError so
callers (and the CLI) can distinguish domain errors from bugs.
"""


class SfrkitError(Exception):
    """Base class for all sfrkit domain errors."""


class CaseError(SfrkitError):
    """Case file failed parsing or semantic validation."""


class CommitmentError(SfrkitError):
    """Invalid unit-commitment vector for the case at hand."""


class PowerFlowError(SfrkitError):
    """Newton power flow failed to converge or the network is infeasible."""


class EquilibriumError(SfrkitError):
    """Dynamic equilibrium initialization failed its residual tolerance."""


class SimulationError(SfrkitError):
    """Time-domain integration failed (Newton divergence at a step)."""


class LinearizationError(SfrkitError):
    """Jacobian assembly failed (singular or ill-conditioned algebraic block)."""


class EigenError(SfrkitError):
    """Eigendecomposition failed or the matrix is numerically defective."""


class ModalError(SfrkitError):
    """Invalid modal structure, coefficient set, or disturbance for Eq.-based ops."""


class ModelError(SfrkitError):
    """Estimator construction, shape, or training failure."""


class ModelIntegrityError(ModelError):
    """Model file is corrupt: truncated, checksum mismatch, or version mismatch."""


class BankError(SfrkitError):
    """Eigenvalue-bank build, persistence, or lookup failure."""


class DatasetError(SfrkitError):
    """Dataset generation or self-consistency check failure."""
