"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should produce when it escapes a command.
"""


class NbpError(Exception):
    exit_code = 2


class DimensionError(NbpError, ValueError):
    """Operand shapes are incompatible."""


class AggregationError(NbpError, ValueError):
    """A reduction was asked to aggregate nothing."""


class ConstructionError(NbpError, ValueError):
    """A graph, scene or parameter set violates its structural invariants."""


class ValidationError(NbpError, ValueError):
    """An input value is outside its documented domain."""


class UnsupportedOperationError(NbpError, TypeError):
    """The operation needs data the object does not carry (e.g. a factor table)."""


class CapacityError(NbpError, RuntimeError):
    """A configured size guard was exceeded.

    ``guard`` names the limit so callers can report which one tripped.
    """

    exit_code = 3

    def __init__(self, guard: str, message: str):
        super().__init__(f"[{guard}] {message}")
        self.guard = guard


class ConfigurationError(NbpError, ValueError):
    """A model or run configuration is inconsistent with its inputs."""


class CheckpointMismatchError(ConfigurationError):
    exit_code = 4


class DivergenceError(NbpError, FloatingPointError):
    """Training produced a non-finite loss."""
