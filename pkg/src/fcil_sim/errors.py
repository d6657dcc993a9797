"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see ``fcil_sim.cli``).
"""


class SimError(Exception):
    """Base class for all simulator errors."""


class ContractViolation(SimError, ValueError):
    """Shape or structural precondition broken by the caller."""


class InputError(SimError, ValueError):
    """Argument value outside the accepted domain."""


class FormatError(InputError):
    """Malformed feature file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(InputError):
    pass


class PartitionInfeasible(SimError):
    """No Dirichlet draw satisfied the per-client minimum within the retry budget."""


class NumericalError(SimError, FloatingPointError):
    """Non-finite values reached model state."""


class OracleError(SimError):
    """A test oracle could not be evaluated (e.g. non-finite loss)."""


class UndefinedMetric(SimError):
    """The metric has no value for this input (e.g. no shared classes)."""
