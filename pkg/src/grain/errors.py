"""Exception types shared across the package."""


class GrainError(Exception):
    """Base class for all package-specific errors."""


class ClientFailure(GrainError):
    """A generation/detection client could not produce a reply."""


class DegenerateBox(GrainError):
    """A pixel box with zero or negative extent."""


class ShapeError(GrainError):
    """An array/sequence had an incompatible shape or size."""


class NormalizationError(GrainError):
    """A vector with (near-)zero norm cannot be L2-normalized."""


class TokenizationError(GrainError):
    """Text does not fit the tokenizer's context window in strict mode."""


class ConfigError(GrainError):
    """Invalid or unknown configuration."""


class SchemaError(GrainError):
    """A shard line violates the record schema."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CorruptImage(GrainError):
    """An image file could not be decoded."""


class NonFiniteLoss(GrainError):
    """Training produced a NaN/inf loss."""
