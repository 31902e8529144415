"""Exception hierarchy.

Validation problems (bad inputs, infeasible configs, schema violations) derive
from :class:`ValidationError` and map to CLI exit code 1; anything else that
goes wrong at runtime maps to exit code 2.
"""


class DebiasLabError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(DebiasLabError):
    """Caller-supplied input violates a documented precondition."""


class SchemaError(ValidationError):
    """A manifest or config file does not conform to its schema."""


class IntegrityError(ValidationError):
    """Cross-reference failure: duplicate ids, unknown ids, mismatched keys."""


class FeasibilityError(ValidationError):
    """A (correlation, marginal, prevalence) triple admits no valid 2x2 table."""


class UndefinedCorrelationError(ValidationError):
    """Correlation requested for a constant sequence."""


class UndefinedMetricError(ValidationError):
    """Metric undefined, e.g. ROC AUC with a single class."""


class EmptyMaskError(ValidationError):
    """A segmentation mask with no foreground pixels."""


class ConfigError(ValidationError):
    """An invalid hyperparameter or configuration value."""


class TrainingDivergedError(DebiasLabError):
    """Non-finite loss encountered; the run is aborted with diagnostics."""
