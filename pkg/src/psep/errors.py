"""Shared exception types; the CLI maps these onto exit codes."""


class PsepError(Exception):
    """Base for all package errors."""


class ConfigError(PsepError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class MissingArtifactError(PsepError):
    """A required dataset/checkpoint/file is absent or unreadable (exit code 3)."""


class NumericalError(PsepError):
    """A computation left its numerical domain or diverged (exit code 4)."""


class ShapeError(PsepError, ValueError):
    """Incompatible array shapes or malformed structural arguments."""


class DataFormatError(MissingArtifactError):
    """An on-disk artifact exists but does not parse (bad magic, truncation, ...)."""


class NotDifferentiableError(PsepError, TypeError):
    """A density model without input gradients was used where gradients are required."""
