"""Execution options, progress events and failure classification for runs."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from enum import StrEnum
from typing import Callable, Dict

from dpvger.env import ConfigurationError
from dpvger.errors import (
    BudgetExhaustedError,
    BudgetInfeasibleError,
    DataError,
    DpVgerError,
    ExperimentError,
    ExperimentErrorCode,
    PrivacyError,
)


class RunStatus(StrEnum):
    COMPLETED = "completed"
    CONFIG_ERROR = "config_error"
    DATA_ERROR = "data_error"
    BUDGET_ERROR = "budget_error"
    CANCELLED = "cancelled"
    FAILED = "failed"


EXIT_CODES: Dict[RunStatus, int] = {
    RunStatus.COMPLETED: 0,
    RunStatus.CONFIG_ERROR: 1,
    RunStatus.DATA_ERROR: 2,
    RunStatus.BUDGET_ERROR: 3,
    RunStatus.CANCELLED: 4,
    RunStatus.FAILED: 4,
}


class ProgressEventType(StrEnum):
    TASK_STARTED = "task_started"
    GAN_STARTED = "gan_started"
    GAN_COMPLETED = "gan_completed"
    BNN_EPOCH_COMPLETED = "bnn_epoch_completed"
    TASK_EVALUATED = "task_evaluated"
    TASK_RETIRED = "task_retired"


@dataclass
class ProgressEvent:
    type: ProgressEventType
    task_id: int | None = None
    label: int | None = None
    epoch: int | None = None
    value: float | None = None
    timestamp_ms: float | None = None


@dataclass
class ExecutionOptions:
    max_gan_workers: int = 1
    cancel_event: threading.Event | None = None
    on_progress: Callable[[ProgressEvent], None] | None = None

    def check_cancelled(self) -> None:
        """Raise ExperimentError if a cancellation event has been set."""
        if self.cancel_event is not None and self.cancel_event.is_set():
            raise ExperimentError(
                "Experiment cancelled",
                code=ExperimentErrorCode.EXPERIMENT_CANCELLED,
            )

    def emit(
        self,
        event_type: ProgressEventType,
        *,
        task_id: int | None = None,
        label: int | None = None,
        epoch: int | None = None,
        value: float | None = None,
    ) -> None:
        if self.on_progress is None:
            return
        self.on_progress(
            ProgressEvent(
                type=event_type,
                task_id=task_id,
                label=label,
                epoch=epoch,
                value=value,
                timestamp_ms=time.time() * 1000.0,
            )
        )


def classify_run_error(exc: BaseException) -> tuple[RunStatus, str]:
    """Map a run failure to a status and its stable error code."""
    code = str(getattr(exc, "code", None) or ExperimentErrorCode.EXPERIMENT_ERROR)

    if isinstance(exc, ConfigurationError):
        return RunStatus.CONFIG_ERROR, "configuration_error"
    if isinstance(exc, (BudgetExhaustedError, BudgetInfeasibleError)):
        return RunStatus.BUDGET_ERROR, code
    if isinstance(exc, DataError):
        return RunStatus.DATA_ERROR, code
    if isinstance(exc, PrivacyError):
        return RunStatus.CONFIG_ERROR, code
    if isinstance(exc, ExperimentError):
        if exc.code == ExperimentErrorCode.EXPERIMENT_CANCELLED:
            return RunStatus.CANCELLED, code
        cause = exc.__cause__
        if cause is not None and cause is not exc:
            return classify_run_error(cause)
        return RunStatus.FAILED, code
    if isinstance(exc, DpVgerError):
        return RunStatus.FAILED, code

    return RunStatus.FAILED, ExperimentErrorCode.EXPERIMENT_ERROR.value
