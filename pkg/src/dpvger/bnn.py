"""Mean-field Gaussian variational classifier.

The minimized objective on a mini-batch of the mixed (real + replay) set is

    total = nll + kl / (N * T)

with ``nll`` the Monte Carlo estimate of the mean negative log-likelihood,
``N`` the size of the mixed training set and ``T`` the number of tasks seen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from dpvger.config import NUM_CLASSES
from dpvger.errors import DataError, DataErrorCode, NumericError, NumericErrorCode
from dpvger.nn import (
    Activation,
    AdamState,
    MlpParams,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    params_from_flat,
    softmax,
    softmax_xent,
)
from dpvger.rng import RngState

KL_TOLERANCE = 1e-12


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class MeanFieldPosterior:
    """Per-weight Gaussian ``N(mu, softplus(rho)^2)`` over a 10-way classifier."""

    mu: MlpParams
    rho: MlpParams

    def __post_init__(self) -> None:
        if self.mu.shapes != self.rho.shapes:
            raise NumericError(
                f"mu shapes {self.mu.shapes} differ from rho shapes {self.rho.shapes}",
                code=NumericErrorCode.DIMENSION_MISMATCH,
            )
        if self.mu.widths[-1] != NUM_CLASSES:
            raise NumericError(
                f"classifier must have {NUM_CLASSES} outputs, got {self.mu.widths[-1]}",
                code=NumericErrorCode.DIMENSION_MISMATCH,
            )

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return self.mu.shapes

    @property
    def num_weights(self) -> int:
        return self.mu.num_params

    def mu_flat(self) -> np.ndarray:
        return self.mu.flatten()

    def rho_flat(self) -> np.ndarray:
        return self.rho.flatten()

    def sigma_flat(self) -> np.ndarray:
        return softplus(self.rho_flat())

    def theta(self) -> np.ndarray:
        return np.concatenate([self.mu_flat(), self.rho_flat()])

    def with_theta(self, theta: np.ndarray) -> "MeanFieldPosterior":
        n = self.num_weights
        if theta.shape != (2 * n,):
            raise NumericError(
                f"theta of shape {theta.shape} does not fit {2 * n} parameters",
                code=NumericErrorCode.DIMENSION_MISMATCH,
            )
        return MeanFieldPosterior(
            mu=params_from_flat(theta[:n], self.shapes),
            rho=params_from_flat(theta[n:], self.shapes),
        )

    def copy(self) -> "MeanFieldPosterior":
        return MeanFieldPosterior(mu=self.mu.copy(), rho=self.rho.copy())


def init_posterior(
    input_width: int,
    hidden_widths: Sequence[int],
    rng: RngState,
    init_mu_std: float = 0.1,
    init_sigma: float = 0.05,
) -> MeanFieldPosterior:
    widths = [input_width, *hidden_widths, NUM_CLASSES]
    mu = init_mlp(widths, rng, Activation.IDENTITY, weight_std=init_mu_std)
    for layer in mu.layers:
        layer.bias = rng.gaussian(1, layer.fan_out) * init_mu_std
    rho_value = inverse_softplus(init_sigma)
    rho = params_from_flat(np.full(mu.num_params, rho_value), mu.shapes)
    return MeanFieldPosterior(mu=mu, rho=rho)


@dataclass
class PriorSpec:
    """Gaussian prior, either one shared (mean, std) or a per-weight snapshot."""

    mu: float | np.ndarray = 0.0
    sigma: float | np.ndarray = 1.0

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.sigma) <= 0):
            raise NumericError(
                "prior std must be positive", code=NumericErrorCode.INVALID_ARGUMENT
            )

    @classmethod
    def standard(cls, std: float = 1.0) -> "PriorSpec":
        return cls(mu=0.0, sigma=std)

    def _check(self, post: MeanFieldPosterior) -> None:
        for value in (self.mu, self.sigma):
            if isinstance(value, np.ndarray) and value.shape != (post.num_weights,):
                raise NumericError(
                    f"prior of shape {value.shape} does not match "
                    f"{post.num_weights} posterior weights",
                    code=NumericErrorCode.DIMENSION_MISMATCH,
                )


def sample_weights(
    post: MeanFieldPosterior, rng: RngState, noise: Optional[np.ndarray] = None
) -> MlpParams:
    """Reparameterized draw ``w = mu + softplus(rho) * eps``."""
    eps = rng.normal_vector(post.num_weights) if noise is None else noise
    flat = post.mu_flat() + post.sigma_flat() * eps
    return params_from_flat(flat, post.shapes)


def _kl_terms(post: MeanFieldPosterior, prior: PriorSpec) -> np.ndarray:
    sigma = post.sigma_flat()
    mu = post.mu_flat()
    sigma0 = np.broadcast_to(np.asarray(prior.sigma, dtype=np.float64), sigma.shape)
    mu0 = np.broadcast_to(np.asarray(prior.mu, dtype=np.float64), mu.shape)
    return (
        np.log(sigma0 / sigma)
        + (sigma * sigma + (mu - mu0) ** 2) / (2.0 * sigma0 * sigma0)
        - 0.5
    )


def analytic_kl(post: MeanFieldPosterior, prior: PriorSpec) -> float:
    """Closed-form KL(q || p) summed over every weight and bias."""
    prior._check(post)
    terms = _kl_terms(post, prior)
    total = float(np.sum(terms))
    # tolerate per-term rounding noise
    if total < -KL_TOLERANCE * max(1, terms.size):
        raise NumericError(
            f"KL divergence came out negative ({total:.3e})",
            code=NumericErrorCode.NEGATIVE_KL,
        )
    return total


def _kl_grad(post: MeanFieldPosterior, prior: PriorSpec) -> np.ndarray:
    rho = post.rho_flat()
    sigma = softplus(rho)
    mu = post.mu_flat()
    sigma0 = np.broadcast_to(np.asarray(prior.sigma, dtype=np.float64), sigma.shape)
    mu0 = np.broadcast_to(np.asarray(prior.mu, dtype=np.float64), mu.shape)
    grad_mu = (mu - mu0) / (sigma0 * sigma0)
    grad_sigma = -1.0 / sigma + sigma / (sigma0 * sigma0)
    return np.concatenate([grad_mu, grad_sigma * expit(rho)])


def _check_batch(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[0] == 0:
        raise DataError("empty batch", code=DataErrorCode.EMPTY_DATA)
    if y.shape != (x.shape[0],):
        raise NumericError(
            f"{y.shape} labels for {x.shape[0]} rows",
            code=NumericErrorCode.DIMENSION_MISMATCH,
        )


def mc_log_likelihood(
    post: MeanFieldPosterior,
    x: np.ndarray,
    y: np.ndarray,
    samples: int,
    rng: RngState,
) -> float:
    """Mean over weight samples of the batch-mean log-likelihood."""
    _check_batch(x, y)
    if samples < 1:
        raise NumericError(
            "need at least one weight sample", code=NumericErrorCode.INVALID_ARGUMENT
        )
    total = 0.0
    for _ in range(samples):
        logits, _ = mlp_forward(sample_weights(post, rng), x)
        loss, _ = softmax_xent(logits, y)
        total -= loss
    return total / samples


@dataclass
class FreeEnergyTerms:
    nll: float
    kl: float
    scale: float

    @property
    def total(self) -> float:
        return self.nll + self.scale * self.kl


def free_energy(
    post: MeanFieldPosterior,
    prior: PriorSpec,
    x: np.ndarray,
    y: np.ndarray,
    dataset_size: int,
    tasks_seen: int,
    rng: RngState,
    samples: int = 1,
    noise: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[FreeEnergyTerms, np.ndarray]:
    """Minimized loss and its gradient with respect to ``theta = (mu, rho)``.

    ``noise`` freezes the reparameterization draws (one vector per sample).
    """
    _check_batch(x, y)
    if dataset_size < 1 or tasks_seen < 1:
        raise NumericError(
            f"need N >= 1 and T >= 1, got N={dataset_size}, T={tasks_seen}",
            code=NumericErrorCode.INVALID_ARGUMENT,
        )
    if noise is not None and len(noise) != samples:
        raise NumericError(
            f"{len(noise)} frozen noise vectors for {samples} samples",
            code=NumericErrorCode.INVALID_ARGUMENT,
        )
    n = post.num_weights
    mu = post.mu_flat()
    rho = post.rho_flat()
    sigma = softplus(rho)
    dsigma_drho = expit(rho)
    grad = np.zeros(2 * n)
    nll = 0.0
    for s in range(samples):
        eps = rng.normal_vector(n) if noise is None else noise[s]
        weights = params_from_flat(mu + sigma * eps, post.shapes)
        logits, cache = mlp_forward(weights, x)
        loss, logit_grad = softmax_xent(logits, y)
        weight_grad, _ = mlp_backward(weights, cache, logit_grad)
        flat = weight_grad.flatten()
        nll += loss / samples
        grad[:n] += flat / samples
        grad[n:] += flat * eps * dsigma_drho / samples
    scale = 1.0 / (float(dataset_size) * float(tasks_seen))
    kl = analytic_kl(post, prior)
    grad += scale * _kl_grad(post, prior)
    return FreeEnergyTerms(nll=nll, kl=kl, scale=scale), grad


@dataclass
class TrainHyper:
    batch_size: int = 64
    learning_rate: float = 1e-3
    samples: int = 1


@dataclass
class EpochStats:
    posterior: MeanFieldPosterior
    adam_state: AdamState
    mean_nll: float
    mean_kl: float
    steps: int


def train_epoch(
    post: MeanFieldPosterior,
    prior: PriorSpec,
    x: np.ndarray,
    y: np.ndarray,
    hyper: TrainHyper,
    rng: RngState,
    *,
    tasks_seen: int = 1,
    dataset_size: Optional[int] = None,
    adam_state: Optional[AdamState] = None,
) -> EpochStats:
    """One shuffled pass with an Adam step per mini-batch on the free energy.

    ``dataset_size`` is the N of the KL weight and defaults to ``len(x)``.
    """
    _check_batch(x, y)
    size = dataset_size if dataset_size is not None else x.shape[0]
    theta = post.theta()
    state = adam_state if adam_state is not None else AdamState.zeros(theta.size)
    order = rng.permutation(x.shape[0])
    nll_sum = 0.0
    kl_sum = 0.0
    steps = 0
    current = post
    for start in range(0, x.shape[0], hyper.batch_size):
        idx = order[start : start + hyper.batch_size]
        terms, grad = free_energy(
            current,
            prior,
            x[idx],
            y[idx],
            dataset_size=size,
            tasks_seen=tasks_seen,
            rng=rng,
            samples=hyper.samples,
        )
        theta, state = adam_step(theta, grad, state, hyper.learning_rate)
        current = post.with_theta(theta)
        nll_sum += terms.nll
        kl_sum += terms.kl
        steps += 1
    return EpochStats(
        posterior=current,
        adam_state=state,
        mean_nll=nll_sum / steps,
        mean_kl=kl_sum / steps,
        steps=steps,
    )


def predict(
    post: MeanFieldPosterior, x: np.ndarray, rng: RngState, samples: int = 20
) -> np.ndarray:
    """Class probabilities averaged over ``samples`` weight draws."""
    if samples < 1:
        raise NumericError(
            "need at least one weight sample", code=NumericErrorCode.INVALID_ARGUMENT
        )
    probs = np.zeros((x.shape[0], NUM_CLASSES))
    for _ in range(samples):
        logits, _ = mlp_forward(sample_weights(post, rng), x)
        probs += softmax(logits)
    probs /= samples
    return probs / np.sum(probs, axis=1, keepdims=True)


def vcl_prior_update(post: MeanFieldPosterior) -> PriorSpec:
    """Detached per-weight prior equal to the current posterior."""
    return PriorSpec(mu=post.mu_flat().copy(), sigma=post.sigma_flat().copy())
