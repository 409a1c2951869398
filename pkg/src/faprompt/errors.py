"""Exception hierarchy shared by every faprompt module."""


class FAPromptError(Exception):
    pass


class ValidationError(FAPromptError, ValueError):
    """Input violates a documented precondition."""


class ConfigError(FAPromptError, ValueError):
    """Configuration is inconsistent with the backbone or itself."""


class IngestionError(FAPromptError):
    """A dataset on disk is malformed or unreadable."""


class TrainingError(FAPromptError, RuntimeError):
    """Optimization produced a non-finite quantity."""


class UndefinedMetricError(FAPromptError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
