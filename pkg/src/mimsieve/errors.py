"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class StateError(RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""


class ParseError(ValueError):
    """Malformed input file.

    ``offset`` is the byte position at which parsing failed (for truncated
    payloads, the position of the first missing byte).
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CapabilityError(RuntimeError):
    """A feature-gated capability is not available in this install."""


class ConfigError(ValueError):
    """Invalid configuration key or value."""


class DivergenceError(RuntimeError):
    """Training diverged (non-finite loss or repeated gradient explosion)."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
