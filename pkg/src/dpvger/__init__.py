from typing import Any

from dpvger.bnn import (
    EpochStats,
    FreeEnergyTerms,
    MeanFieldPosterior,
    PriorSpec,
    TrainHyper,
    analytic_kl,
    free_energy,
    init_posterior,
    mc_log_likelihood,
    predict,
    sample_weights,
    train_epoch,
    vcl_prior_update,
)
from dpvger.checkpoint import (
    CheckpointHeader,
    CheckpointKind,
    load_classifier,
    load_gan_pair,
    load_posterior,
    read_header,
    save_classifier,
    save_gan_pair,
    save_posterior,
)
from dpvger.config import (
    BnnConfig,
    ClippingMode,
    DpConfig,
    ExperimentConfig,
    GanConfig,
    MethodKind,
    TaskConfig,
)
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
from dpvger.execution import (
    ExecutionOptions,
    ProgressEvent,
    ProgressEventType,
    RunStatus,
    classify_run_error,
)
from dpvger.gan import (
    GanLosses,
    GanPair,
    PrivacyStamp,
    ReplayStore,
    gan_losses,
    sample_replay,
    train_class_gan,
)
from dpvger.harness import (
    RunResult,
    RunState,
    evaluate,
    run,
    train_task_baseline,
    train_task_vger,
)
from dpvger.metrics import EvalMatrix, RunSummary, emit_metrics, summarize_run
from dpvger.nn import (
    AdamState,
    MlpParams,
    PerExampleGrads,
    adam_step,
    init_mlp,
    matmul,
    mlp_backward,
    mlp_forward,
    per_example_grads,
    softmax_xent,
)
from dpvger.privacy import (
    PrivacyLedger,
    RdpCurve,
    calibrate_sigma,
    clip,
    compose,
    privatize,
    rdp_subsampled_gaussian,
    to_delta,
    to_eps_delta,
)
from dpvger.rng import RngState, gaussian
from dpvger.tasks import (
    RawDataset,
    TaskDataset,
    TaskStream,
    build_task_stream,
    carve_public,
    downscale,
    load_idx,
    split_tasks,
)

__version__ = "0.1.0"
__all__ = [
    # Experiment
    "run",
    "train_task_vger",
    "train_task_baseline",
    "evaluate",
    "RunResult",
    "RunState",
    # Config models
    "ExperimentConfig",
    "TaskConfig",
    "BnnConfig",
    "GanConfig",
    "DpConfig",
    "MethodKind",
    "ClippingMode",
    # Errors
    "ConfigurationError",
    "DpVgerError",
    "NumericError",
    "NumericErrorCode",
    "DataError",
    "DataErrorCode",
    "PrivacyError",
    "PrivacyErrorCode",
    "BudgetExhaustedError",
    "BudgetInfeasibleError",
    "ExperimentError",
    "ExperimentErrorCode",
    "CheckpointError",
    "CheckpointErrorCode",
    # Execution
    "ExecutionOptions",
    "ProgressEvent",
    "ProgressEventType",
    "RunStatus",
    "classify_run_error",
    # Numeric core
    "RngState",
    "gaussian",
    "MlpParams",
    "AdamState",
    "PerExampleGrads",
    "matmul",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "per_example_grads",
    "softmax_xent",
    "adam_step",
    # Variational classifier
    "MeanFieldPosterior",
    "PriorSpec",
    "TrainHyper",
    "EpochStats",
    "FreeEnergyTerms",
    "init_posterior",
    "sample_weights",
    "analytic_kl",
    "mc_log_likelihood",
    "free_energy",
    "train_epoch",
    "predict",
    "vcl_prior_update",
    # Generative replay
    "GanLosses",
    "GanPair",
    "PrivacyStamp",
    "ReplayStore",
    "gan_losses",
    "train_class_gan",
    "sample_replay",
    # Privacy
    "PrivacyLedger",
    "RdpCurve",
    "clip",
    "privatize",
    "rdp_subsampled_gaussian",
    "compose",
    "to_eps_delta",
    "to_delta",
    "calibrate_sigma",
    # Tasks
    "RawDataset",
    "TaskDataset",
    "TaskStream",
    "load_idx",
    "build_task_stream",
    "split_tasks",
    "carve_public",
    "downscale",
    # Metrics
    "EvalMatrix",
    "RunSummary",
    "emit_metrics",
    "summarize_run",
    # Checkpoints
    "CheckpointHeader",
    "CheckpointKind",
    "save_posterior",
    "load_posterior",
    "save_classifier",
    "load_classifier",
    "save_gan_pair",
    "load_gan_pair",
    "read_header",
    # CLI (lazy)
    "cli_app",
]


def __getattr__(name: str) -> Any:
    if name == "cli_app":
        from dpvger.cli import cli_app as cli

        return cli
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
