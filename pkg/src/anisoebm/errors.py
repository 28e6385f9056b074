"""Exception types shared across the package."""


class AnisoError(Exception):
    """Base class for package errors."""


class ConfigError(AnisoError):
    """Invalid configuration value or malformed config file."""


class DimensionMismatchError(AnisoError):
    """Input vector width does not match the model dimension."""

    def __init__(self, expected: int, actual: int, what: str = "point"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} has {actual} entries, model expects {expected}")


class DivergenceError(AnisoError):
    """A chain state or gradient became non-finite.

    Carries enough context to locate the failure: the chain index, the
    transition index within the current run, and (when raised from the
    training loop) the last checkpointed outer iteration.
    """

    def __init__(self, message: str, chain: int | None = None,
                 step: int | None = None, last_checkpoint: int | None = None):
        self.chain = chain
        self.step = step
        self.last_checkpoint = last_checkpoint
        parts = [message]
        if chain is not None:
            parts.append(f"chain={chain}")
        if step is not None:
            parts.append(f"step={step}")
        if last_checkpoint is not None:
            parts.append(f"last_checkpoint={last_checkpoint}")
        super().__init__(" ".join(parts))


class UnsupportedOperationError(AnisoError):
    """Operation requires data the model does not carry (e.g. log_norm)."""


class ParseError(AnisoError):
    """Malformed serialized payload; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class UndersampledError(AnisoError):
    """A Monte Carlo probe needs more samples to produce a defined estimate."""


class WindowTooLongError(AnisoError):
    """All distance estimates fell below the Monte Carlo noise floor."""
