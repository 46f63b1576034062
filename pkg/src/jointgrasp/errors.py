"""Exception types shared across the package."""


class JointGraspError(Exception):
    """Base class for all package errors."""


class DimensionError(JointGraspError, ValueError):
    """Raised when tensor or config shapes are inconsistent."""


class ContractError(JointGraspError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class ConfigError(JointGraspError, ValueError):
    """Raised for invalid configuration values or unknown keys."""


class OracleError(JointGraspError, ArithmeticError):
    """Raised by the finite-difference oracle when the objective is not finite."""


class TrainingAborted(JointGraspError, RuntimeError):
    """Raised when training produces a non-finite loss."""
