"""Evaluation matrix, run summaries and the files a run leaves behind."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from dpvger.config import NUM_CLASSES, ExperimentConfig
from dpvger.errors import (
    DataError,
    DataErrorCode,
    ExperimentError,
    NumericError,
    NumericErrorCode,
)
from dpvger.privacy import PrivacyReportEntry, format_privacy_report

ACCURACY_HEADER = ["method", "seed", "trained_task", "eval_task", "accuracy"]
SUMMARY_HEADER = ["method", "seed", "trained_task", "mean_accuracy"]

ACCURACY_FILE = "accuracy.csv"
SUMMARY_FILE = "summary.csv"
PRIVACY_FILE = "privacy_report.txt"
CONFIG_FILE = "config.txt"
SUMMARY_JSON = "summary.json"


def confusion_matrix(predicted: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Counts ``[true, predicted]`` over the 10 digits."""
    matrix = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(matrix, (labels.astype(np.int64), predicted.astype(np.int64)), 1)
    return matrix


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """10-way argmax accuracy; the model never sees a task identity."""
    if probs.ndim != 2 or probs.shape != (labels.shape[0], NUM_CLASSES):
        raise NumericError(
            f"probabilities of shape {probs.shape} for {labels.shape[0]} labels",
            code=NumericErrorCode.DIMENSION_MISMATCH,
        )
    if labels.shape[0] == 0:
        raise DataError("cannot score an empty test set")
    predicted = np.argmax(probs, axis=1)
    return int(np.sum(predicted == labels)) / int(labels.shape[0])


@dataclass
class EvalMatrix:
    """Lower-triangular accuracies: ``rows[i][j]`` is task j after training task i."""

    rows: List[List[float]] = field(default_factory=list)

    def add_row(self, row: Sequence[float]) -> None:
        if len(row) != len(self.rows) + 1:
            raise ExperimentError(
                f"row after task {len(self.rows)} needs {len(self.rows) + 1} "
                f"accuracies, got {len(row)}"
            )
        if any(not 0.0 <= value <= 1.0 for value in row):
            raise ExperimentError(f"accuracies must lie in [0, 1], got {list(row)}")
        self.rows.append([float(value) for value in row])

    @property
    def num_tasks(self) -> int:
        return len(self.rows)

    def acc(self, trained: int, evaluated: int) -> float:
        return self.rows[trained][evaluated]

    def mean(self, trained: int) -> float:
        row = self.rows[trained]
        return sum(row) / len(row)

    def means(self) -> List[float]:
        return [self.mean(i) for i in range(self.num_tasks)]


class RunSummary(BaseModel):
    method: str
    seed: int
    status: str = "completed"
    tasks_completed: int
    final_mean_accuracy: Optional[float] = None
    final_accuracies: List[float] = Field(default_factory=list)
    mean_accuracy_per_task: List[float] = Field(default_factory=list)
    average_forgetting: Optional[float] = Field(
        default=None,
        description="Mean over earlier tasks of best accuracy minus final accuracy",
    )
    backward_transfer: Optional[float] = Field(
        default=None,
        description="Mean over earlier tasks of final accuracy minus just-trained accuracy",
    )
    error_code: Optional[str] = None
    error_message: Optional[str] = None


def summarize_run(
    matrix: EvalMatrix,
    method: str,
    seed: int,
    status: str = "completed",
    error_code: Optional[str] = None,
    error_message: Optional[str] = None,
) -> RunSummary:
    summary = RunSummary(
        method=method,
        seed=seed,
        status=status,
        tasks_completed=matrix.num_tasks,
        mean_accuracy_per_task=matrix.means(),
        error_code=error_code,
        error_message=error_message,
    )
    if matrix.num_tasks == 0:
        return summary
    last = matrix.num_tasks - 1
    summary.final_mean_accuracy = matrix.mean(last)
    summary.final_accuracies = list(matrix.rows[last])
    if last == 0:
        summary.average_forgetting = 0.0
        summary.backward_transfer = 0.0
        return summary
    forgetting = []
    transfer = []
    for j in range(last):
        best = max(matrix.acc(i, j) for i in range(j, last))
        forgetting.append(best - matrix.acc(last, j))
        transfer.append(matrix.acc(last, j) - matrix.acc(j, j))
    summary.average_forgetting = statistics.mean(forgetting)
    summary.backward_transfer = statistics.mean(transfer)
    return summary


def write_accuracy_csv(path: Path, matrix: EvalMatrix, method: str, seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(ACCURACY_HEADER)
        for i, row in enumerate(matrix.rows):
            for j, value in enumerate(row):
                writer.writerow([method, seed, i, j, repr(value)])


def write_summary_csv(path: Path, matrix: EvalMatrix, method: str, seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for i in range(matrix.num_tasks):
            writer.writerow([method, seed, i, repr(matrix.mean(i))])


def read_accuracy_csv(path: Path) -> Dict[Tuple[str, int], EvalMatrix]:
    """Rebuild every (method, seed) matrix stored in an accuracy CSV."""
    cells: Dict[Tuple[str, int], Dict[Tuple[int, int], float]] = {}
    with open(path, newline="", encoding="utf-8") as csvfile:
        reader = csv.DictReader(csvfile)
        if reader.fieldnames != ACCURACY_HEADER:
            raise DataError(f"{path} does not start with {','.join(ACCURACY_HEADER)}")
        for record in reader:
            key = (record["method"], int(record["seed"]))
            position = (int(record["trained_task"]), int(record["eval_task"]))
            cells.setdefault(key, {})[position] = float(record["accuracy"])
    matrices: Dict[Tuple[str, int], EvalMatrix] = {}
    for key, values in cells.items():
        matrix = EvalMatrix()
        trained = 1 + max(i for i, _ in values)
        for i in range(trained):
            try:
                matrix.add_row([values[(i, j)] for j in range(i + 1)])
            except KeyError as e:
                raise DataError(f"{path}: missing accuracy cell {e}") from e
        matrices[key] = matrix
    return matrices


def emit_metrics(
    out_dir: Path,
    matrix: EvalMatrix,
    config: ExperimentConfig,
    privacy_entries: Sequence[PrivacyReportEntry],
    summary: RunSummary,
) -> List[Path]:
    """Write the accuracy and summary CSVs, privacy report, config echo and summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    method = config.method.value
    paths = [
        out_dir / ACCURACY_FILE,
        out_dir / SUMMARY_FILE,
        out_dir / PRIVACY_FILE,
        out_dir / CONFIG_FILE,
        out_dir / SUMMARY_JSON,
    ]
    try:
        write_accuracy_csv(paths[0], matrix, method, config.seed)
        write_summary_csv(paths[1], matrix, method, config.seed)
        paths[2].write_text(format_privacy_report(privacy_entries), encoding="utf-8")
        paths[3].write_text("\n".join(config.to_lines()) + "\n", encoding="utf-8")
        paths[4].write_text(
            json.dumps(summary.model_dump(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
    except OSError as e:
        raise ExperimentError(f"Error writing metrics to {out_dir}: {e}") from e
    return paths


class MethodComparison(BaseModel):
    method: str
    runs: int
    seeds: List[int]
    mean_final_accuracy: float
    std_final_accuracy: float


def load_run_summary(run_dir: Path) -> RunSummary:
    path = run_dir / SUMMARY_JSON
    try:
        return RunSummary.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"Error reading run summary {path}: {e}") from e
    except ValidationError as e:
        raise DataError(
            f"Run summary {path} is malformed: {e.error_count()} invalid field(s)",
            code=DataErrorCode.BAD_SUMMARY,
        ) from e


def compare_runs(run_dirs: Sequence[Path]) -> List[MethodComparison]:
    """Mean and sample std of the final mean accuracy per method over seeds."""
    finals: Dict[str, List[Tuple[int, float]]] = {}
    for run_dir in run_dirs:
        summary = load_run_summary(run_dir)
        if summary.final_mean_accuracy is None:
            continue
        finals.setdefault(summary.method, []).append(
            (summary.seed, summary.final_mean_accuracy)
        )
    rows = []
    for method, values in finals.items():
        accuracies = [value for _, value in values]
        rows.append(
            MethodComparison(
                method=method,
                runs=len(values),
                seeds=sorted(seed for seed, _ in values),
                mean_final_accuracy=statistics.mean(accuracies),
                std_final_accuracy=(
                    statistics.stdev(accuracies) if len(accuracies) > 1 else 0.0
                ),
            )
        )
    rows.sort(key=lambda row: row.mean_final_accuracy, reverse=True)
    return rows
