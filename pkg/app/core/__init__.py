from .errors import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    NumericError,
    TrainingError,
    UsageError,
)
from .experiment import Experiment, RunRecord
