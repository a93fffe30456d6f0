"""Exception types shared across the package."""


class AdvFuseError(Exception):
    """Base class for package errors."""


class ShapeMismatchError(AdvFuseError):
    """Operands do not conform to an op's shape rule."""


class NumericDomainError(AdvFuseError):
    """Non-finite values where finite ones are required."""


class ContractError(AdvFuseError):
    """A caller violated an operation's precondition."""


class DivergenceError(AdvFuseError):
    """Training produced a non-finite loss.

    Carries the adversarial iteration index (0 for the standard path) so the
    harness can report where the step blew up.
    """

    def __init__(self, message, iteration=0):
        super().__init__(message)
        self.iteration = iteration


class CheckpointError(AdvFuseError):
    """Checkpoint file is malformed or incompatible with the config."""
