"""Per-class GANs and the replay store that outlives the task data.

The discriminator emits raw logits. Private discriminator steps pair real row
``i`` of a batch with generated row ``i``; the pair's loss is the per-example
loss that gets clipped, so one clipped unit is one private example.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from dpvger.config import DpConfig, GanConfig
from dpvger.errors import (
    BudgetExhaustedError,
    DataError,
    DataErrorCode,
    PrivacyError,
    PrivacyErrorCode,
)
from dpvger.logger import logger
from dpvger.nn import (
    Activation,
    AdamState,
    MlpParams,
    PerExampleGrads,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    per_example_grads,
)
from dpvger.privacy import PrivacyLedger, calibrate_sigma, clip, privatize
from dpvger.rng import RngState

LOGIT_CLAMP = 30.0


@dataclass
class GanLosses:
    d_loss: float
    g_loss: float
    real_grad: np.ndarray
    fake_grad: np.ndarray
    g_fake_grad: np.ndarray


def _clamped(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    inside = np.abs(logits) <= LOGIT_CLAMP
    return np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP), inside


def _row_grads(
    real_logits: np.ndarray, fake_logits: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Unscaled discriminator-loss gradients per logit row."""
    real, real_inside = _clamped(real_logits)
    fake, fake_inside = _clamped(fake_logits)
    real_grad = (expit(real) - 1.0) * real_inside
    fake_grad = expit(fake) * fake_inside
    return real_grad, fake_grad


def gan_losses(real_logits: np.ndarray, fake_logits: np.ndarray) -> GanLosses:
    """Discriminator and non-saturating generator losses from logits.

    ``d_loss = -mean log D(x) - mean log(1 - D(G(z)))`` and
    ``g_loss = -mean log D(G(z))`` with ``D = sigmoid(clamp(logit, +-30))``.
    Gradients are with respect to the logits and vanish where the clamp is
    active.
    """
    real, _ = _clamped(real_logits)
    fake, fake_inside = _clamped(fake_logits)
    n_real = real.shape[0]
    n_fake = fake.shape[0]
    d_loss = float(np.mean(np.logaddexp(0.0, -real)) + np.mean(np.logaddexp(0.0, fake)))
    g_loss = float(np.mean(np.logaddexp(0.0, -fake)))
    real_grad, fake_grad = _row_grads(real_logits, fake_logits)
    g_fake_grad = (expit(fake) - 1.0) * fake_inside / n_fake
    return GanLosses(
        d_loss=d_loss,
        g_loss=g_loss,
        real_grad=real_grad / n_real,
        fake_grad=fake_grad / n_fake,
        g_fake_grad=g_fake_grad,
    )


@dataclass(frozen=True)
class PrivacyStamp:
    epsilon: float
    delta: float
    q: float
    sigma: float
    clip_norm: float
    steps: int
    halted_at_budget: bool = False


@dataclass
class GanPair:
    generator: MlpParams
    discriminator: MlpParams
    label: int
    task_id: int
    privacy: Optional[PrivacyStamp] = None

    def __post_init__(self) -> None:
        if not 0 <= self.label < 10:
            raise DataError(
                f"class label {self.label} outside 0-9",
                code=DataErrorCode.DATA_ERROR,
            )

    @property
    def latent_dim(self) -> int:
        return self.generator.widths[0]

    @property
    def image_width(self) -> int:
        return self.generator.widths[-1]


@dataclass
class ReplayStore:
    """Generators kept after their task data was deleted, one per (task, class)."""

    pairs: List[GanPair] = field(default_factory=list)
    _lock: threading.Lock = field(
        default_factory=threading.Lock, init=False, repr=False, compare=False
    )

    def add(self, pair: GanPair) -> None:
        with self._lock:
            for existing in self.pairs:
                if (existing.task_id, existing.label) == (pair.task_id, pair.label):
                    raise DataError(
                        f"replay store already holds task {pair.task_id} "
                        f"class {pair.label}"
                    )
            self.pairs.append(pair)

    def ordered(self) -> List[GanPair]:
        with self._lock:
            return sorted(self.pairs, key=lambda pair: (pair.task_id, pair.label))

    def classes(self) -> List[int]:
        return [pair.label for pair in self.ordered()]

    def task_ids(self) -> List[int]:
        return sorted({pair.task_id for pair in self.ordered()})

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[GanPair]:
        return iter(self.ordered())


def generate(generator: MlpParams, count: int, rng: RngState) -> np.ndarray:
    """``count`` images ``G(z)`` clamped to [0, 1]."""
    if count == 0:
        return np.zeros((0, generator.widths[-1]))
    z = rng.gaussian(count, generator.widths[0])
    images, _ = mlp_forward(generator, z)
    return np.clip(images, 0.0, 1.0)


def sample_replay(
    store: ReplayStore, n_per_class: int, rng: RngState
) -> Tuple[np.ndarray, np.ndarray]:
    """Labeled replay batch with ``n_per_class`` rows per stored generator."""
    if n_per_class < 0:
        raise DataError(f"replay count must be >= 0, got {n_per_class}")
    pairs = store.ordered()
    if n_per_class == 0:
        width = pairs[0].image_width if pairs else 0
        return np.zeros((0, width)), np.zeros(0, dtype=np.int64)
    if not pairs:
        raise DataError(
            "cannot sample replay from an empty store", code=DataErrorCode.EMPTY_DATA
        )
    images = [generate(pair.generator, n_per_class, rng) for pair in pairs]
    labels = [np.full(n_per_class, pair.label, dtype=np.int64) for pair in pairs]
    return np.concatenate(images, axis=0), np.concatenate(labels)


@dataclass
class _GanState:
    generator: MlpParams
    discriminator: MlpParams
    g_adam: AdamState
    d_adam: AdamState


@dataclass
class _DpStep:
    clip_norm: float
    sigma: float
    q: float
    delta: float
    target_epsilon: Optional[float]
    ledger: PrivacyLedger
    dp: DpConfig


def _generate_raw(generator: MlpParams, count: int, rng: RngState) -> np.ndarray:
    z = rng.gaussian(count, generator.widths[0])
    images, _ = mlp_forward(generator, z)
    return images


def _pair_grads(
    discriminator: MlpParams, real: np.ndarray, fake: np.ndarray
) -> PerExampleGrads:
    """Per-pair discriminator gradients of ``softplus(-D(x_i)) + softplus(D(G(z_i)))``."""
    batch = real.shape[0]
    logits, cache = mlp_forward(discriminator, np.concatenate([real, fake], axis=0))
    real_grad, fake_grad = _row_grads(logits[:batch], logits[batch:])
    rows = per_example_grads(
        discriminator, cache, np.concatenate([real_grad, fake_grad], axis=0)
    )
    return PerExampleGrads(
        vectors=rows.vectors[:batch] + rows.vectors[batch:], shapes=rows.shapes
    )


def _discriminator_step(
    state: _GanState,
    real: np.ndarray,
    lr: float,
    rng: RngState,
    dp_step: Optional[_DpStep],
) -> None:
    batch = real.shape[0]
    fake = _generate_raw(state.generator, batch, rng)
    pairs = _pair_grads(state.discriminator, real, fake)
    if dp_step is None:
        grad = pairs.total() / batch
    else:
        clipped = clip(pairs, dp_step.clip_norm, dp_step.dp.clipping_mode)
        grad = privatize(clipped, dp_step.clip_norm, dp_step.sigma, rng)
        dp_step.ledger.record(dp_step.q, dp_step.sigma)
    flat, state.d_adam = adam_step(
        state.discriminator.flatten(), grad, state.d_adam, lr
    )
    state.discriminator = state.discriminator.with_flat(flat)


def _generator_step(state: _GanState, batch: int, lr: float, rng: RngState) -> None:
    z = rng.gaussian(batch, state.generator.widths[0])
    fake, g_cache = mlp_forward(state.generator, z)
    logits, d_cache = mlp_forward(state.discriminator, fake)
    clamped, fake_inside = _clamped(logits)
    logit_grad = (expit(clamped) - 1.0) * fake_inside / batch
    _, image_grad = mlp_backward(state.discriminator, d_cache, logit_grad)
    g_grad, _ = mlp_backward(state.generator, g_cache, image_grad)
    flat, state.g_adam = adam_step(
        state.generator.flatten(), g_grad.flatten(), state.g_adam, lr
    )
    state.generator = state.generator.with_flat(flat)


def _batches(rows: int, batch_size: int, rng: RngState) -> List[np.ndarray]:
    """Shuffled drop-last batches; fewer rows than a batch gives one full batch."""
    order = rng.permutation(rows)
    if rows <= batch_size:
        return [order]
    count = rows // batch_size
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(count)]


def _steps_per_epoch(rows: int, batch_size: int) -> int:
    return 1 if rows <= batch_size else rows // batch_size


def _resolve_dp(
    dp: DpConfig, ledger: PrivacyLedger, rows: int, cfg: GanConfig
) -> _DpStep:
    q = dp.sampling_fraction
    if q is None:
        q = min(1.0, cfg.batch_size / rows)
    delta = dp.delta
    sigma = dp.noise_multiplier
    if sigma is None:
        if dp.target_epsilon is None:
            raise PrivacyError(
                "noise multiplier unset and no target epsilon to calibrate it",
                code=PrivacyErrorCode.INVALID_NOISE,
            )
        planned = cfg.epochs * _steps_per_epoch(rows, cfg.batch_size)
        sigma = calibrate_sigma(dp.target_epsilon, delta, q, planned)
    if sigma > 0 and math.isinf(dp.clip_norm):
        raise PrivacyError(
            "noise needs a finite clip norm", code=PrivacyErrorCode.INVALID_NOISE
        )
    return _DpStep(
        clip_norm=dp.clip_norm,
        sigma=float(sigma),
        q=float(q),
        delta=delta,
        target_epsilon=dp.target_epsilon,
        ledger=ledger,
        dp=dp,
    )


def _train_loop(
    state: _GanState,
    data: np.ndarray,
    epochs: int,
    cfg: GanConfig,
    rng: RngState,
    dp_step: Optional[_DpStep],
    check_cancelled: Optional[Callable[[], None]],
) -> Tuple[int, bool]:
    steps = 0
    for _ in range(epochs):
        if check_cancelled is not None:
            check_cancelled()
        for idx in _batches(data.shape[0], cfg.batch_size, rng):
            if (
                dp_step is not None
                and dp_step.target_epsilon is not None
                and dp_step.ledger.projected_epsilon(
                    dp_step.q, dp_step.sigma, dp_step.delta
                )
                > dp_step.target_epsilon
            ):
                return steps, True
            _discriminator_step(state, data[idx], cfg.learning_rate, rng, dp_step)
            _generator_step(state, len(idx), cfg.learning_rate, rng)
            steps += 1
    return steps, False


def train_class_gan(
    data: np.ndarray,
    cfg: GanConfig,
    rng: RngState,
    *,
    label: int,
    task_id: int,
    dp: Optional[DpConfig] = None,
    ledger: Optional[PrivacyLedger] = None,
    public: Optional[np.ndarray] = None,
    check_cancelled: Optional[Callable[[], None]] = None,
) -> GanPair:
    """Train one class's GAN on ``data`` (rows of that class only).

    With ``dp`` every discriminator step is clipped, noised and recorded in
    ``ledger``; training stops before a step whose projected epsilon would
    exceed ``dp.target_epsilon``. ``public`` rows pretrain both networks
    without noise or ledger entries.
    """
    if data.ndim != 2 or data.shape[0] == 0:
        raise DataError(
            f"class {label} of task {task_id} has no training rows",
            code=DataErrorCode.EMPTY_DATA,
        )
    dp_step: Optional[_DpStep] = None
    if dp is not None:
        if ledger is None:
            raise PrivacyError(f"private GAN for class {label} needs a ledger")
        dp_step = _resolve_dp(dp, ledger, data.shape[0], cfg)
        if dp.target_epsilon is not None and ledger.total_steps > 0:
            spent = ledger.epsilon(dp_step.delta)
            if spent >= dp.target_epsilon:
                raise BudgetExhaustedError(
                    f"budget of {ledger.domain} already spent "
                    f"(epsilon={spent:.4f} >= {dp.target_epsilon})",
                    domain=ledger.domain,
                    epsilon=spent,
                )

    width = data.shape[1]
    generator = init_mlp(
        [cfg.latent_dim, *cfg.generator_widths, width], rng, Activation.SIGMOID
    )
    discriminator = init_mlp([width, *cfg.discriminator_widths, 1], rng)
    state = _GanState(
        generator=generator,
        discriminator=discriminator,
        g_adam=AdamState.zeros(generator.num_params),
        d_adam=AdamState.zeros(discriminator.num_params),
    )

    if public is not None and public.shape[0] > 0 and cfg.public_epochs > 0:
        public_steps, _ = _train_loop(
            state, public, cfg.public_epochs, cfg, rng, None, check_cancelled
        )
        logger.info(
            f"Pretrained GAN task {task_id} class {label} on "
            f"{public.shape[0]} public rows ({public_steps} steps)"
        )

    steps, halted = _train_loop(
        state, data, cfg.epochs, cfg, rng, dp_step, check_cancelled
    )

    stamp: Optional[PrivacyStamp] = None
    if dp_step is not None:
        epsilon = dp_step.ledger.epsilon(dp_step.delta)
        stamp = PrivacyStamp(
            epsilon=epsilon,
            delta=dp_step.delta,
            q=dp_step.q,
            sigma=dp_step.sigma,
            clip_norm=dp_step.clip_norm,
            steps=steps,
            halted_at_budget=halted,
        )
        if halted:
            logger.warning(
                f"GAN task {task_id} class {label} halted at budget after "
                f"{steps} steps (epsilon={epsilon:.4f})"
            )
        logger.info(
            f"Trained private GAN task {task_id} class {label}: {steps} steps, "
            f"sigma={dp_step.sigma:.4f}, q={dp_step.q:.4f}, epsilon={epsilon:.4f}"
        )
    else:
        logger.info(f"Trained GAN task {task_id} class {label}: {steps} steps")

    return GanPair(
        generator=state.generator,
        discriminator=state.discriminator,
        label=label,
        task_id=task_id,
        privacy=stamp,
    )
