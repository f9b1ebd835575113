"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyperparameters or experiment configuration."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, ranges)."""


class ParseError(ValueError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StateError(RuntimeError):
    """An object was used before it reached the required state."""
