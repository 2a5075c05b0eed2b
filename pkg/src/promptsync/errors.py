"""Exception types raised across the package."""


class PromptSyncError(Exception):
    """Base class for every error raised by promptsync."""


class NumericDomainError(PromptSyncError, ValueError):
    """A value fell outside the domain of a numeric operation (log of ~0, NaN input, ...)."""


class ShapeError(PromptSyncError, ValueError):
    """Tensor shapes do not match what an operation requires."""


class InputError(PromptSyncError, ValueError):
    """An argument is structurally valid but semantically wrong."""


class ConfigError(PromptSyncError, ValueError):
    """A configuration value or table is missing or inconsistent."""


class FormatError(PromptSyncError, ValueError):
    """A persisted file is not in the expected binary format."""


class StalenessError(PromptSyncError, RuntimeError):
    """A persisted artifact was produced from different inputs than the current ones."""


class EpisodeError(PromptSyncError, RuntimeError):
    """An adaptation episode failed inside a benchmark run; the message names the sample."""
