"""Exception types shared across the package."""


class GbiPpcError(Exception):
    """Base class for package errors."""


class ConfigError(GbiPpcError, ValueError):
    """Invalid configuration value (CLI exit code 2)."""


class CorpusError(GbiPpcError, ValueError):
    """Corpus data violates its schema or invariants (CLI exit code 3)."""


class NumericalError(GbiPpcError, RuntimeError):
    """Non-finite quantity where a finite one is required (CLI exit code 4)."""
