class MSPError(Exception):
    """Base class for all package errors."""

    code = "error"


class SchemaError(MSPError, ValueError):
    code = "schema_error"


class ConfigurationError(MSPError, ValueError):
    code = "configuration_error"


class DataError(MSPError, ValueError):
    code = "data_error"


class FormatError(MSPError, ValueError):
    code = "format_error"


class NumericError(MSPError, ArithmeticError):
    code = "numeric_error"


class EvaluationError(MSPError, RuntimeError):
    code = "evaluation_error"


class ProbeError(MSPError, ValueError):
    code = "probe_error"


class CheckpointError(MSPError, RuntimeError):
    code = "checkpoint_error"


class TrainingError(MSPError, RuntimeError):
    code = "training_error"
