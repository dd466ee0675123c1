"""Exception types shared across the package."""


class StormsegError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(StormsegError, ValueError):
    """Operand shapes (or axes) are incompatible with the requested operation."""


class DomainError(StormsegError, ValueError):
    """A value lies outside the mathematical domain of the operation (e.g. log of <= 0)."""


class ParameterError(StormsegError, ValueError):
    """A configuration parameter is outside its allowed range."""


class ContractError(StormsegError, RuntimeError):
    """A caller violated a documented precondition."""


class FormatError(StormsegError, ValueError):
    """A serialized file is malformed. The message carries the byte offset when known."""


class TrainingDiverged(StormsegError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(
            f"training diverged: loss became {value!r} at epoch {epoch}, batch {batch}"
        )
