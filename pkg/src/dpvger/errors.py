"""Structured errors with stable codes for programmatic handling."""

from __future__ import annotations

from enum import StrEnum


class NumericErrorCode(StrEnum):
    NUMERIC_ERROR = "numeric_error"
    DIMENSION_MISMATCH = "dimension_mismatch"
    STALE_CACHE = "stale_cache"
    INVALID_LABEL = "invalid_label"
    INVALID_ARGUMENT = "invalid_argument"
    NEGATIVE_KL = "negative_kl"


class DataErrorCode(StrEnum):
    DATA_ERROR = "data_error"
    BAD_MAGIC = "bad_magic"
    TRUNCATED = "truncated"
    COUNT_MISMATCH = "count_mismatch"
    MISSING_FILE = "missing_file"
    OVERLAPPING_PAIRS = "overlapping_pairs"
    INDIVISIBLE_SIDE = "indivisible_side"
    DOUBLE_CONSUME = "double_consume"
    ACCESS_AFTER_RETIRE = "access_after_retire"
    EMPTY_DATA = "empty_data"
    BAD_SUMMARY = "bad_summary"


class PrivacyErrorCode(StrEnum):
    PRIVACY_ERROR = "privacy_error"
    INVALID_ORDER = "invalid_order"
    INVALID_NOISE = "invalid_noise"
    EMPTY_CURVE = "empty_curve"
    DOMAIN_CONFLICT = "domain_conflict"
    BUDGET_EXHAUSTED = "budget_exhausted"
    BUDGET_INFEASIBLE = "budget_infeasible"


class ExperimentErrorCode(StrEnum):
    EXPERIMENT_ERROR = "experiment_error"
    EXPERIMENT_CANCELLED = "experiment_cancelled"
    EXPERIMENT_ABORTED = "experiment_aborted"


class CheckpointErrorCode(StrEnum):
    CHECKPOINT_ERROR = "checkpoint_error"
    BAD_HEADER = "bad_header"
    UNSUPPORTED_VERSION = "unsupported_version"
    TRUNCATED_PAYLOAD = "truncated_payload"
    WRONG_KIND = "wrong_kind"


class DpVgerError(Exception):
    """Base exception with a stable machine-readable code."""

    default_code: str = "dpvger_error"

    def __init__(self, message: str, code: str | None = None) -> None:
        self.message = message
        self.code = code or self.default_code
        super().__init__(message)

    def __str__(self) -> str:
        return self.message


class NumericError(DpVgerError):
    default_code = NumericErrorCode.NUMERIC_ERROR


class DataError(DpVgerError):
    default_code = DataErrorCode.DATA_ERROR


class PrivacyError(DpVgerError):
    default_code = PrivacyErrorCode.PRIVACY_ERROR


class BudgetExhaustedError(PrivacyError):
    default_code = PrivacyErrorCode.BUDGET_EXHAUSTED

    def __init__(
        self,
        message: str,
        code: str | None = None,
        domain: str | None = None,
        epsilon: float | None = None,
    ) -> None:
        super().__init__(message, code=code)
        self.domain = domain
        self.epsilon = epsilon


class BudgetInfeasibleError(PrivacyError):
    default_code = PrivacyErrorCode.BUDGET_INFEASIBLE


class ExperimentError(DpVgerError):
    default_code = ExperimentErrorCode.EXPERIMENT_ERROR


class CheckpointError(DpVgerError):
    default_code = CheckpointErrorCode.CHECKPOINT_ERROR
