"""Tests for structured error types."""

import pytest

from dpvger.env import ConfigurationError
from dpvger.errors import (
    BudgetExhaustedError,
    BudgetInfeasibleError,
    CheckpointError,
    CheckpointErrorCode,
    DataError,
    DataErrorCode,
    DpVgerError,
    ExperimentError,
    ExperimentErrorCode,
    NumericError,
    NumericErrorCode,
    PrivacyError,
    PrivacyErrorCode,
)


def test_data_error_default_code() -> None:
    err = DataError("file missing")
    assert err.message == "file missing"
    assert err.code == DataErrorCode.DATA_ERROR
    assert str(err) == "file missing"


def test_data_error_explicit_code() -> None:
    err = DataError("bad header", code=DataErrorCode.BAD_MAGIC)
    assert err.code == DataErrorCode.BAD_MAGIC


def test_numeric_error_default_code() -> None:
    assert NumericError("nan").code == NumericErrorCode.NUMERIC_ERROR


def test_checkpoint_error_default_code() -> None:
    assert CheckpointError("x").code == CheckpointErrorCode.CHECKPOINT_ERROR


def test_experiment_error_default_code() -> None:
    assert ExperimentError("x").code == ExperimentErrorCode.EXPERIMENT_ERROR


def test_budget_errors_are_privacy_errors() -> None:
    exhausted = BudgetExhaustedError("spent", domain="task0/class1", epsilon=1.2)
    assert exhausted.code == PrivacyErrorCode.BUDGET_EXHAUSTED
    assert exhausted.domain == "task0/class1"
    assert exhausted.epsilon == 1.2
    assert isinstance(exhausted, PrivacyError)
    assert BudgetInfeasibleError("no").code == PrivacyErrorCode.BUDGET_INFEASIBLE


def test_codes_are_plain_strings() -> None:
    assert DataErrorCode.ACCESS_AFTER_RETIRE == "access_after_retire"


def test_errors_are_catchable_as_base() -> None:
    with pytest.raises(DpVgerError):
        raise PrivacyError("boom")

    with pytest.raises(Exception):
        raise ConfigurationError("boom")
