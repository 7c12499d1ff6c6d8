"""Custom exception hierarchy for carbseg."""


class CarbSegError(Exception):
    """Base exception for all carbseg errors."""


class ValidationError(CarbSegError):
    """Invalid data (out-of-range label, dimension mismatch, empty class set)."""


class ConfigError(ValidationError):
    """Unknown, duplicated or ill-typed configuration key."""


class DataImportError(CarbSegError):
    """Failed to read an input artifact."""


class FormatError(DataImportError):
    """Malformed file contents (bad magic, truncated payload, bad CSV row)."""


class MissingViewError(DataImportError):
    """A feature provider has no data for the requested (scene, view)."""


class ProviderError(CarbSegError):
    """A feature provider failed during training or evaluation."""


class ExportError(CarbSegError):
    """Failed to write an output artifact."""


class EmptyHistoryError(CarbSegError):
    """Adaptive weight requested before both loss queues hold an entry."""
