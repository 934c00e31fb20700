"""Exception hierarchy for mlsurv."""


class MlsurvError(Exception):
    """Base class for all mlsurv errors."""


class SchemaError(MlsurvError):
    """A declared column is missing or has the wrong role."""


class ParseError(MlsurvError):
    """A cell could not be parsed; carries the offending row number."""


class ValidationError(MlsurvError):
    """Row-level data violates outcome semantics (times, events, rates)."""


class NestingError(MlsurvError):
    """A child cluster id appears under two distinct parents."""


class ModelSpecError(MlsurvError):
    """Invalid model configuration (df range, dimensions, unknown names)."""


class PredictionError(MlsurvError):
    """Invalid prediction request."""


class ModelFileError(MlsurvError):
    """Unreadable, corrupt, or newer-version model file."""


class ConvergenceError(MlsurvError):
    """Maximization could not proceed from the given starting values."""


class ResourceError(MlsurvError):
    """A request would exceed a hard resource bound."""
