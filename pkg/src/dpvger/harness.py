"""Continual-learning experiment loop over the Split-MNIST task stream."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dpvger.bnn import (
    MeanFieldPosterior,
    PriorSpec,
    TrainHyper,
    init_posterior,
    predict,
    train_epoch,
    vcl_prior_update,
)
from dpvger.checkpoint import (
    gan_checkpoint_name,
    save_classifier,
    save_gan_pair,
    save_posterior,
)
from dpvger.config import NUM_CLASSES, ExperimentConfig, MethodKind
from dpvger.errors import ExperimentError
from dpvger.execution import (
    ExecutionOptions,
    ProgressEventType,
    classify_run_error,
)
from dpvger.gan import GanPair, ReplayStore, sample_replay, train_class_gan
from dpvger.logger import attach_run_log, detach_run_log, logger
from dpvger.metrics import (
    EvalMatrix,
    RunSummary,
    accuracy,
    emit_metrics,
    summarize_run,
)
from dpvger.nn import (
    Activation,
    AdamState,
    MlpParams,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    softmax,
    softmax_xent,
)
from dpvger.privacy import (
    PrivacyLedger,
    PrivacyReportEntry,
    merge_segments,
    report_entry,
)
from dpvger.rng import RngState
from dpvger.tasks import (
    LabeledRows,
    RawDataset,
    TaskDataset,
    TaskStream,
    build_task_stream,
)

RUN_LOG = "run.log"
POSTERIOR_CHECKPOINT = "posterior.ckpt"
CLASSIFIER_CHECKPOINT = "classifier.ckpt"

Model = Callable[[np.ndarray], np.ndarray]


@dataclass
class RunState:
    """Everything a run carries from one task to the next."""

    config: ExperimentConfig
    out_dir: Path
    input_width: int
    model_rng: RngState
    posterior: Optional[MeanFieldPosterior] = None
    prior: Optional[PriorSpec] = None
    classifier: Optional[MlpParams] = None
    store: ReplayStore = field(default_factory=ReplayStore)
    ledgers: Dict[str, PrivacyLedger] = field(default_factory=dict)
    privacy_entries: List[PrivacyReportEntry] = field(default_factory=list)
    matrix: EvalMatrix = field(default_factory=EvalMatrix)
    tasks_seen: int = 0

    @property
    def method(self) -> MethodKind:
        return self.config.method

    def hyper(self) -> TrainHyper:
        bnn = self.config.bnn
        return TrainHyper(
            batch_size=bnn.batch_size,
            learning_rate=bnn.learning_rate,
            samples=bnn.train_samples,
        )


@dataclass
class RunResult:
    matrix: EvalMatrix
    summary: RunSummary
    privacy_entries: List[PrivacyReportEntry]
    out_dir: Path
    state: RunState


def ledger_domain(task_id: int, label: int) -> str:
    return f"task{task_id}/class{label}"


def _ensure_posterior(state: RunState) -> MeanFieldPosterior:
    if state.posterior is None:
        bnn = state.config.bnn
        state.posterior = init_posterior(
            state.input_width,
            bnn.hidden_widths,
            state.model_rng,
            init_mu_std=bnn.init_mu_std,
            init_sigma=bnn.init_sigma,
        )
    return state.posterior


def _train_posterior(
    state: RunState,
    task_id: int,
    x: np.ndarray,
    y: np.ndarray,
    prior: PriorSpec,
    *,
    dataset_size: int,
    tasks_seen: int,
    rng: RngState,
    options: ExecutionOptions,
) -> None:
    posterior = _ensure_posterior(state)
    adam: Optional[AdamState] = None
    for epoch in range(state.config.bnn.epochs):
        options.check_cancelled()
        stats = train_epoch(
            posterior,
            prior,
            x,
            y,
            state.hyper(),
            rng,
            tasks_seen=tasks_seen,
            dataset_size=dataset_size,
            adam_state=adam,
        )
        posterior, adam = stats.posterior, stats.adam_state
        logger.info(
            f"Task {task_id} epoch {epoch + 1}/{state.config.bnn.epochs}: "
            f"nll={stats.mean_nll:.4f} kl={stats.mean_kl:.2f} over {x.shape[0]} rows"
        )
        options.emit(
            ProgressEventType.BNN_EPOCH_COMPLETED,
            task_id=task_id,
            epoch=epoch,
            value=stats.mean_nll,
        )
    state.posterior = posterior


@dataclass
class _GanJob:
    label: int
    data: np.ndarray
    public: Optional[np.ndarray]
    ledger: Optional[PrivacyLedger]
    rng: RngState


def _train_gans(
    state: RunState, task: TaskDataset, rng: RngState, options: ExecutionOptions
) -> List[GanPair]:
    cfg = state.config
    labels = sorted(task.pair)
    jobs: List[_GanJob] = []
    for label in labels:
        data = task.rows_for_class(label)
        public = None
        if cfg.method.uses_public and task.public is not None:
            public = task.public.images[task.public.labels == label]
        ledger = (
            PrivacyLedger(domain=ledger_domain(task.task_id, label))
            if cfg.method.uses_dp
            else None
        )
        jobs.append(_GanJob(label, data, public, ledger, rng.split()))

    def _run(job: _GanJob) -> GanPair:
        label = job.label
        options.emit(ProgressEventType.GAN_STARTED, task_id=task.task_id, label=label)
        pair = train_class_gan(
            job.data,
            cfg.gan,
            job.rng,
            label=label,
            task_id=task.task_id,
            dp=cfg.dp if job.ledger is not None else None,
            ledger=job.ledger,
            public=job.public,
            check_cancelled=options.check_cancelled,
        )
        options.emit(
            ProgressEventType.GAN_COMPLETED,
            task_id=task.task_id,
            label=label,
            value=pair.privacy.epsilon if pair.privacy is not None else None,
        )
        return pair

    workers = max(1, min(options.max_gan_workers, len(jobs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pairs = list(pool.map(_run, jobs))

    ledgers = [job.ledger for job in jobs if job.ledger is not None]
    state.ledgers.update(merge_segments(ledgers))
    for pair, job in zip(pairs, jobs):
        if job.ledger is None or pair.privacy is None:
            continue
        state.privacy_entries.append(
            report_entry(
                job.ledger,
                task_id=task.task_id,
                label=pair.label,
                clip_norm=cfg.dp.clip_norm,
                delta=cfg.dp.delta,
                target_epsilon=cfg.dp.target_epsilon,
                clipping_mode=cfg.dp.clipping_mode,
                halted_at_budget=pair.privacy.halted_at_budget,
            )
        )
    return pairs


def train_task_vger(
    state: RunState, task: TaskDataset, rng: RngState, options: ExecutionOptions
) -> RunState:
    """GANs on this task, then the classifier on real data plus balanced replay."""
    if not state.method.is_vger:
        raise ExperimentError(f"{state.method.value} is not a generative replay method")
    classifier_rng = rng.split()
    pairs = _train_gans(state, task, rng.split(), options)
    real_x, real_y = task.real_rows()
    n_per_class = real_y.shape[0] // len(task.pair)
    replay_rng = rng.split()
    if len(state.store) > 0:
        replay_x, replay_y = sample_replay(state.store, n_per_class, replay_rng)
        mixed_x = np.concatenate([real_x, replay_x], axis=0)
        mixed_y = np.concatenate([real_y, replay_y])
    else:
        mixed_x, mixed_y = real_x, real_y
    logger.info(
        f"Task {task.task_id} mixed set: {real_y.shape[0]} real + "
        f"{mixed_y.shape[0] - real_y.shape[0]} replay rows "
        f"({len(state.store)} stored generators)"
    )
    _train_posterior(
        state,
        task.task_id,
        mixed_x,
        mixed_y,
        PriorSpec.standard(state.config.bnn.prior_std),
        dataset_size=mixed_y.shape[0],
        tasks_seen=state.tasks_seen,
        rng=classifier_rng,
        options=options,
    )
    for pair in pairs:
        state.store.add(pair)
        save_gan_pair(state.out_dir / gan_checkpoint_name(pair.task_id, pair.label), pair)
    return state


def train_plain_epoch(
    params: MlpParams,
    adam: AdamState,
    x: np.ndarray,
    y: np.ndarray,
    hyper: TrainHyper,
    rng: RngState,
) -> Tuple[MlpParams, AdamState, float]:
    """One shuffled cross-entropy pass of a deterministic classifier."""
    order = rng.permutation(x.shape[0])
    losses = []
    for start in range(0, x.shape[0], hyper.batch_size):
        idx = order[start : start + hyper.batch_size]
        logits, cache = mlp_forward(params, x[idx])
        loss, grad = softmax_xent(logits, y[idx])
        param_grad, _ = mlp_backward(params, cache, grad)
        flat, adam = adam_step(
            params.flatten(), param_grad.flatten(), adam, hyper.learning_rate
        )
        params = params.with_flat(flat)
        losses.append(loss)
    return params, adam, sum(losses) / len(losses)


def train_task_baseline(
    state: RunState,
    task: TaskDataset,
    stream: TaskStream,
    rng: RngState,
    options: ExecutionOptions,
) -> RunState:
    method = state.method
    classifier_rng = rng.split()
    real_x, real_y = task.real_rows()
    if method is MethodKind.CORESET_ONLY:
        past = [rows for rows in stream.public_sets() if rows is not task.public]
        mixed_x = np.concatenate([real_x, *(rows.images for rows in past)], axis=0)
        mixed_y = np.concatenate([real_y, *(rows.labels for rows in past)])
        logger.info(
            f"Task {task.task_id} coreset set: {real_y.shape[0]} real + "
            f"{mixed_y.shape[0] - real_y.shape[0]} retained public rows"
        )
        _train_posterior(
            state,
            task.task_id,
            mixed_x,
            mixed_y,
            PriorSpec.standard(state.config.bnn.prior_std),
            dataset_size=mixed_y.shape[0],
            tasks_seen=state.tasks_seen,
            rng=classifier_rng,
            options=options,
        )
    elif method is MethodKind.VCL:
        prior = state.prior or PriorSpec.standard(state.config.bnn.prior_std)
        _train_posterior(
            state,
            task.task_id,
            real_x,
            real_y,
            prior,
            dataset_size=real_y.shape[0],
            tasks_seen=1,
            rng=classifier_rng,
            options=options,
        )
        state.prior = vcl_prior_update(_ensure_posterior(state))
    elif method is MethodKind.PLAIN_SGD:
        if state.classifier is None:
            widths = [state.input_width, *state.config.bnn.hidden_widths, NUM_CLASSES]
            state.classifier = init_mlp(widths, state.model_rng, Activation.IDENTITY)
        params = state.classifier
        adam = AdamState.zeros(params.num_params)
        for epoch in range(state.config.bnn.epochs):
            options.check_cancelled()
            params, adam, loss = train_plain_epoch(
                params, adam, real_x, real_y, state.hyper(), classifier_rng
            )
            logger.info(
                f"Task {task.task_id} epoch {epoch + 1}/{state.config.bnn.epochs}: "
                f"xent={loss:.4f}"
            )
            options.emit(
                ProgressEventType.BNN_EPOCH_COMPLETED,
                task_id=task.task_id,
                epoch=epoch,
                value=loss,
            )
        state.classifier = params
    else:
        raise ExperimentError(f"{method.value} is not a baseline method")
    return state


def evaluate(model: Model, tests: Sequence[LabeledRows]) -> List[float]:
    """Accuracy per seen test set from the model's 10-way probabilities."""
    if not tests:
        raise ExperimentError("evaluate needs at least one seen task")
    return [accuracy(model(rows.images), rows.labels) for rows in tests]


def _model_for(state: RunState, rng: RngState) -> Model:
    if state.classifier is not None:
        classifier = state.classifier

        def _plain(x: np.ndarray) -> np.ndarray:
            logits, _ = mlp_forward(classifier, x)
            return softmax(logits)

        return _plain
    posterior = state.posterior
    if posterior is None:
        raise ExperimentError("no trained model to evaluate")
    samples = state.config.bnn.eval_samples

    def _bayes(x: np.ndarray) -> np.ndarray:
        return predict(posterior, x, rng, samples=samples)

    return _bayes


def _save_model(state: RunState, task_id: int) -> None:
    meta = {
        "method": state.method.value,
        "seed": state.config.seed,
        "task_id": task_id,
    }
    if state.classifier is not None:
        save_classifier(state.out_dir / CLASSIFIER_CHECKPOINT, state.classifier, meta)
    if state.posterior is not None:
        save_posterior(state.out_dir / POSTERIOR_CHECKPOINT, state.posterior, meta)


def _run_tasks(
    state: RunState, stream: TaskStream, root: RngState, options: ExecutionOptions
) -> None:
    for task in stream:
        options.check_cancelled()
        state.tasks_seen += 1
        task_rng = root.split()
        train_rng = task_rng.split()
        eval_rng = task_rng.split()
        logger.info(
            f"Training task {task.task_id} (digits {task.pair}) with "
            f"{state.method.value}"
        )
        options.emit(ProgressEventType.TASK_STARTED, task_id=task.task_id)
        if state.method.is_vger:
            train_task_vger(state, task, train_rng, options)
        else:
            train_task_baseline(state, task, stream, train_rng, options)
        _save_model(state, task.task_id)

        row = evaluate(_model_for(state, eval_rng), stream.seen_tests())
        state.matrix.add_row(row)
        mean = sum(row) / len(row)
        logger.info(
            f"Task {task.task_id} evaluated: "
            + ", ".join(f"{value:.4f}" for value in row)
            + f" (mean {mean:.4f})"
        )
        options.emit(ProgressEventType.TASK_EVALUATED, task_id=task.task_id, value=mean)

        stream.retire(task)
        options.emit(ProgressEventType.TASK_RETIRED, task_id=task.task_id)


def run(
    config: ExperimentConfig,
    options: Optional[ExecutionOptions] = None,
    *,
    train: Optional[RawDataset] = None,
    test: Optional[RawDataset] = None,
) -> RunResult:
    """Run one method and seed end to end and write its artifacts.

    ``train``/``test`` bypass loading from ``config.tasks.data_dir``. Any failure
    still writes the metrics collected so far and ``run.log`` before re-raising.
    """
    options = options or ExecutionOptions(max_gan_workers=config.max_gan_workers)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = attach_run_log(out_dir / RUN_LOG)
    root = RngState(config.seed)
    data_rng = root.split()
    model_rng = root.split()
    state: Optional[RunState] = None
    try:
        logger.info(
            f"Starting {config.method.value} run, seed {config.seed}, out {out_dir}"
        )
        stream = build_task_stream(
            config.tasks,
            data_rng,
            carve=config.method.uses_public,
            train=train,
            test=test,
        )
        state = RunState(
            config=config,
            out_dir=out_dir,
            input_width=stream.input_width,
            model_rng=model_rng,
        )
        _run_tasks(state, stream, root, options)
        summary = summarize_run(state.matrix, config.method.value, config.seed)
        emit_metrics(out_dir, state.matrix, config, state.privacy_entries, summary)
        logger.info(
            f"Finished {config.method.value} seed {config.seed}: final mean "
            f"accuracy {summary.final_mean_accuracy:.4f}"
        )
        return RunResult(
            matrix=state.matrix,
            summary=summary,
            privacy_entries=state.privacy_entries,
            out_dir=out_dir,
            state=state,
        )
    except Exception as e:
        status, code = classify_run_error(e)
        logger.error(f"Run aborted ({status.value}, {code}): {e}")
        matrix = state.matrix if state is not None else EvalMatrix()
        entries = state.privacy_entries if state is not None else []
        summary = summarize_run(
            matrix,
            config.method.value,
            config.seed,
            status=status.value,
            error_code=code,
            error_message=str(e),
        )
        try:
            emit_metrics(out_dir, matrix, config, entries, summary)
        except ExperimentError as write_error:
            logger.error(f"Could not write partial metrics: {write_error}")
        raise
    finally:
        detach_run_log(handler)
