from __future__ import annotations

class ConfigError(ValueError):
    """Invalid configuration or dataset request; raised before any work starts.

    ``field`` names the offending config key when known, so file loaders can point at its line.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class UndefinedMetricError(ValueError):
    """The metric has no defined value for the given inputs (e.g. a single class for AUC)."""
