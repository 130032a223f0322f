"""Exception hierarchy shared by every module.

CLI exit codes map onto these classes: ``ConfigError`` -> 2,
``NumericError`` -> 3, ``InvariantError`` -> 4.
"""


class SidFlowError(Exception):
    """Base class for all package errors."""


class ConfigError(SidFlowError, ValueError):
    """Malformed or inconsistent configuration / architecture."""


class DomainError(SidFlowError, ValueError):
    """An argument lies outside the operation's domain."""


class SingularityError(DomainError):
    """Evaluation too close to t = 1 where (1 - t) appears in a denominator."""


class NumericError(SidFlowError, ArithmeticError):
    """Non-finite inputs, gradients or losses."""


class UsageError(SidFlowError, RuntimeError):
    """API misuse, e.g. requesting a gradient for an unrecorded tensor."""


class InvariantError(SidFlowError, AssertionError):
    """A runtime invariant check failed."""
