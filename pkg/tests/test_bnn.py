"""Tests for the mean-field variational classifier."""

import numpy as np
import pytest
from scipy.stats import norm

from dpvger import bnn
from dpvger.bnn import (
    KL_TOLERANCE,
    FreeEnergyTerms,
    MeanFieldPosterior,
    PriorSpec,
    TrainHyper,
    analytic_kl,
    free_energy,
    init_posterior,
    inverse_softplus,
    mc_log_likelihood,
    predict,
    sample_weights,
    softplus,
    train_epoch,
    vcl_prior_update,
    _kl_terms,
)
from dpvger.errors import DataError, NumericError, NumericErrorCode
from dpvger.nn import (
    finite_diff_grad,
    init_mlp,
    mlp_forward,
    params_from_flat,
    softmax,
    softmax_xent,
)
from dpvger.rng import RngState


@pytest.fixture
def posterior():
    return init_posterior(3, [4], RngState(11))


def _batch(rows: int = 6):
    rng = RngState(2)
    x = rng.gaussian(rows, 3)
    y = np.array([i % 10 for i in range(rows)])
    return x, y


def test_softplus_inverse() -> None:
    assert float(softplus(np.array(inverse_softplus(0.05)))) == pytest.approx(0.05)


def test_init_posterior_shapes(posterior) -> None:
    assert posterior.shapes == [(3, 4), (4, 10)]
    np.testing.assert_allclose(posterior.sigma_flat(), 0.05)


def test_posterior_requires_ten_outputs() -> None:
    params = init_mlp([3, 4], RngState(0))
    with pytest.raises(NumericError) as exc:
        MeanFieldPosterior(mu=params, rho=params.copy())
    assert exc.value.code == NumericErrorCode.DIMENSION_MISMATCH


def test_with_theta_round_trips(posterior) -> None:
    rebuilt = posterior.with_theta(posterior.theta())
    assert np.array_equal(rebuilt.theta(), posterior.theta())
    with pytest.raises(NumericError):
        posterior.with_theta(np.zeros(3))


class TestKl:
    def test_zero_when_posterior_equals_prior(self, posterior) -> None:
        prior = vcl_prior_update(posterior)
        assert analytic_kl(posterior, prior) == pytest.approx(0.0, abs=1e-12)

    def test_positive_against_standard_prior(self, posterior) -> None:
        assert analytic_kl(posterior, PriorSpec.standard()) > 0.0

    def test_prior_shape_must_match(self, posterior) -> None:
        prior = PriorSpec(mu=np.zeros(3), sigma=1.0)
        with pytest.raises(NumericError):
            analytic_kl(posterior, prior)

    def test_prior_std_must_be_positive(self) -> None:
        with pytest.raises(NumericError):
            PriorSpec(mu=0.0, sigma=0.0)


def test_vcl_prior_update_is_detached(posterior) -> None:
    prior = vcl_prior_update(posterior)
    posterior.mu.layers[0].weight[0, 0] += 1.0
    assert prior.mu[0] != posterior.mu_flat()[0]


def test_sample_weights_with_zero_noise_is_the_mean(posterior) -> None:
    weights = sample_weights(posterior, RngState(0), noise=np.zeros(posterior.num_weights))
    assert np.array_equal(weights.flatten(), posterior.mu_flat())


class TestFreeEnergy:
    def test_total_is_nll_plus_scaled_kl(self) -> None:
        terms = FreeEnergyTerms(nll=1.5, kl=20.0, scale=0.25)
        assert terms.total == 6.5

    def test_scale_is_one_over_n_times_t(self, posterior) -> None:
        x, y = _batch()
        terms, _ = free_energy(
            posterior, PriorSpec.standard(), x, y, dataset_size=50, tasks_seen=2, rng=RngState(1)
        )
        assert terms.scale == 1.0 / 100.0
        assert terms.kl == pytest.approx(analytic_kl(posterior, PriorSpec.standard()))

    def test_gradient_matches_finite_differences_with_frozen_noise(self, posterior) -> None:
        x, y = _batch()
        prior = PriorSpec.standard()
        noise = [RngState(8).normal_vector(posterior.num_weights) for _ in range(2)]

        def total(theta: np.ndarray) -> float:
            terms, _ = free_energy(
                posterior.with_theta(theta),
                prior,
                x,
                y,
                dataset_size=20,
                tasks_seen=1,
                rng=RngState(0),
                samples=2,
                noise=noise,
            )
            return terms.total

        _, grad = free_energy(
            posterior, prior, x, y, 20, 1, RngState(0), samples=2, noise=noise
        )
        numeric = finite_diff_grad(total, posterior.theta(), h=1e-6)
        scale = np.maximum(np.abs(numeric), 1e-2)
        assert np.max(np.abs(grad - numeric) / scale) < 1e-5

    def test_rejects_bad_sizes(self, posterior) -> None:
        x, y = _batch()
        with pytest.raises(NumericError):
            free_energy(posterior, PriorSpec.standard(), x, y, 0, 1, RngState(0))

    def test_rejects_empty_batch(self, posterior) -> None:
        with pytest.raises(DataError):
            free_energy(
                posterior,
                PriorSpec.standard(),
                np.zeros((0, 3)),
                np.zeros(0, dtype=np.int64),
                10,
                1,
                RngState(0),
            )


def test_mc_log_likelihood_is_negative(posterior) -> None:
    x, y = _batch()
    assert mc_log_likelihood(posterior, x, y, samples=3, rng=RngState(4)) < 0.0


def test_train_epoch_reduces_loss_on_separable_data() -> None:
    rng = RngState(21)
    centers = rng.gaussian(10, 3) * 3.0
    labels = np.repeat(np.arange(10), 8)
    x = centers[labels] + rng.gaussian(labels.size, 3) * 0.1
    post = init_posterior(3, [16], RngState(1))
    prior = PriorSpec.standard()
    hyper = TrainHyper(batch_size=16, learning_rate=0.02)
    first = train_epoch(post, prior, x, labels, hyper, RngState(2))
    stats = first
    for epoch in range(15):
        stats = train_epoch(
            stats.posterior, prior, x, labels, hyper, RngState(3 + epoch),
            adam_state=stats.adam_state,
        )
    assert stats.steps == 5
    assert stats.adam_state.t == 16 * 5
    assert stats.mean_nll < first.mean_nll


def test_predict_rows_are_distributions(posterior) -> None:
    x, _ = _batch(5)
    probs = predict(posterior, x, RngState(3), samples=4)
    assert probs.shape == (5, 10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert np.all(probs >= 0.0)


def test_predict_is_deterministic_for_a_seed(posterior) -> None:
    x, _ = _batch(5)
    assert np.array_equal(
        predict(posterior, x, RngState(3), samples=2),
        predict(posterior, x, RngState(3), samples=2),
    )


def test_params_from_flat_rejects_wrong_length(posterior) -> None:
    with pytest.raises(NumericError):
        params_from_flat(np.zeros(5), posterior.shapes)


def _flat_posterior(mu: np.ndarray, sigma: np.ndarray) -> MeanFieldPosterior:
    """A no-hidden-layer posterior whose flat (mu, sigma) are given; size must be 10 * (k + 1)."""
    input_width = mu.size // 10 - 1
    base = init_posterior(input_width, [], RngState(0))
    rho = np.log(np.expm1(sigma))
    return base.with_theta(np.concatenate([mu, rho]))


class TestKlClosedForms:
    def test_shifted_mean(self) -> None:
        mu = np.zeros(20)
        mu[0] = 1.0
        post = _flat_posterior(mu, np.ones(20))
        assert analytic_kl(post, PriorSpec.standard()) == pytest.approx(0.5, abs=1e-12)

    def test_wider_posterior(self) -> None:
        sigma = np.ones(20)
        sigma[0] = 2.0
        post = _flat_posterior(np.zeros(20), sigma)
        expected = -np.log(2.0) + 2.0 - 0.5
        assert analytic_kl(post, PriorSpec.standard()) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.80685, abs=1e-5)

    def test_non_negative_for_random_pairs(self) -> None:
        rng = RngState(17)
        count = 10_000
        mu = rng.normal_vector(count) * 3.0
        sigma = np.exp(rng.normal_vector(count))
        prior = PriorSpec(
            mu=rng.normal_vector(count) * 3.0, sigma=np.exp(rng.normal_vector(count))
        )
        post = _flat_posterior(mu, sigma)
        assert np.all(_kl_terms(post, prior) >= -KL_TOLERANCE)
        assert analytic_kl(post, prior) > 0.0

    def test_matches_monte_carlo(self) -> None:
        mu = np.zeros(20)
        sigma = np.ones(20)
        mu[0], sigma[0] = 0.7, 0.4
        post = _flat_posterior(mu, sigma)
        exact = analytic_kl(post, PriorSpec.standard())
        draws = 0.7 + 0.4 * RngState(5).normal_vector(100_000)
        log_ratio = norm.logpdf(draws, 0.7, 0.4) - norm.logpdf(draws, 0.0, 1.0)
        stderr = np.std(log_ratio) / np.sqrt(draws.size)
        assert abs(np.mean(log_ratio) - exact) < 3.0 * stderr


class TestKlSign:
    def test_negative_total_raises(self, posterior, monkeypatch) -> None:
        monkeypatch.setattr(bnn, "_kl_terms", lambda post, prior: np.array([-1e-3, 0.0]))
        with pytest.raises(NumericError) as exc:
            analytic_kl(posterior, PriorSpec.standard())
        assert exc.value.code == NumericErrorCode.NEGATIVE_KL

    def test_rounding_noise_is_returned_unclamped(self, posterior, monkeypatch) -> None:
        monkeypatch.setattr(bnn, "_kl_terms", lambda post, prior: np.array([-1e-14, 0.0]))
        assert analytic_kl(posterior, PriorSpec.standard()) == -1e-14

    def test_small_positive_value_is_exact(self, posterior, monkeypatch) -> None:
        monkeypatch.setattr(bnn, "_kl_terms", lambda post, prior: np.array([3e-9]))
        assert analytic_kl(posterior, PriorSpec.standard()) == 3e-9


def test_sample_weights_moments() -> None:
    # every weight shares one (mu, sigma), so ten draws give 1e5 samples
    count = 10_000
    post = _flat_posterior(np.full(count, 0.3), np.full(count, softplus(np.array(-1.2))))
    rng = RngState(9)
    draws = np.concatenate([sample_weights(post, rng).flatten() for _ in range(10)])
    sigma = float(softplus(np.array(-1.2)))
    n = draws.size
    assert n == 100_000
    assert abs(np.mean(draws) - 0.3) < 3.0 * sigma / np.sqrt(n)
    assert abs(np.std(draws) - sigma) < 3.0 * sigma / np.sqrt(2.0 * n)


class TestCollapsedPosterior:
    @pytest.fixture
    def collapsed(self, posterior) -> MeanFieldPosterior:
        theta = posterior.theta()
        theta[posterior.num_weights :] = -60.0
        return posterior.with_theta(theta)

    def test_log_likelihood_is_deterministic(self, collapsed) -> None:
        x, y = _batch()
        logits, _ = mlp_forward(collapsed.mu, x)
        loss, _ = softmax_xent(logits, y)
        assert mc_log_likelihood(collapsed, x, y, samples=5, rng=RngState(1)) == pytest.approx(
            -loss, abs=1e-12
        )

    def test_predict_is_the_plain_softmax(self, collapsed) -> None:
        x, _ = _batch(5)
        logits, _ = mlp_forward(collapsed.mu, x)
        np.testing.assert_allclose(
            predict(collapsed, x, RngState(2), samples=7), softmax(logits), atol=1e-12
        )


def test_averaging_more_samples_raises_entropy() -> None:
    post = init_posterior(3, [8], RngState(4), init_mu_std=1.0, init_sigma=1.0)
    x = RngState(6).gaussian(100, 3)

    def mean_entropy(samples: int) -> float:
        probs = predict(post, x, RngState(samples), samples=samples)
        return float(np.mean(-np.sum(probs * np.log(np.clip(probs, 1e-300, None)), axis=1)))

    assert mean_entropy(1000) >= mean_entropy(1)
