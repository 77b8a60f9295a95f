"""
Exception hierarchy shared by the engine, the service layer and the CLI.

Each exception carries a short ``code`` so the CLI can print one
machine-parsable diagnostic line and pick the exit status.
"""


class PowerPriorError(Exception):
    """Base class for every error raised by this package."""

    code = "error"
    exit_code = 3


class UsageError(PowerPriorError):
    code = "usage"
    exit_code = 1


# 데이터 검증 오류 (exit 2)
class DataValidationError(PowerPriorError):
    code = "data_validation"
    exit_code = 2


class SchemaError(DataValidationError):
    code = "schema"


class MissingColumnError(DataValidationError):
    code = "missing_column"


class MissingWeightsError(DataValidationError):
    code = "missing_weights"


class NonNumericCellError(DataValidationError):
    code = "non_numeric_cell"


class NonPositiveWeightError(DataValidationError):
    code = "nonpositive_weight"


class InsufficientRowsError(DataValidationError):
    code = "insufficient_rows"


# 수치 계산 오류 (exit 3)
class NumericalError(PowerPriorError):
    code = "numerical"
    exit_code = 3


class RankDeficiencyError(NumericalError):
    code = "rank_deficiency"


class ConvergenceError(NumericalError):
    code = "non_convergence"


class SaturatedModelError(NumericalError):
    code = "saturated_model"


class SeparationError(NumericalError):
    code = "separation"


class InfeasibleCalibrationError(NumericalError):
    code = "infeasible_calibration"


class ResamplingError(NumericalError):
    code = "resampling_exhausted"


class StudyAbortedError(NumericalError):
    code = "aborted"
