"""Tests for the MLP core and its manual gradients."""

import numpy as np
import pytest

from dpvger.errors import NumericError, NumericErrorCode
from dpvger.nn import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    Activation,
    AdamState,
    adam_step,
    finite_diff_grad,
    init_mlp,
    matmul,
    mlp_backward,
    mlp_forward,
    ordered_row_sum,
    per_example_grads,
    softmax,
    softmax_xent,
)
from dpvger.rng import RngState


def _naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_matches_triple_loop_exactly() -> None:
    rng = RngState(3)
    a = rng.gaussian(7, 5)
    b = rng.gaussian(5, 4)
    assert np.array_equal(matmul(a, b), _naive_matmul(a, b))


def test_matmul_rejects_mismatched_inner_dimension() -> None:
    with pytest.raises(NumericError) as exc:
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert exc.value.code == NumericErrorCode.DIMENSION_MISMATCH


def test_ordered_row_sum() -> None:
    rows = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert ordered_row_sum(rows).tolist() == [9.0, 12.0]


def test_init_mlp_shapes(tiny_mlp) -> None:
    assert tiny_mlp.widths == [4, 5, 3]
    assert tiny_mlp.num_params == 4 * 5 + 5 + 5 * 3 + 3
    assert tiny_mlp.flatten().shape == (tiny_mlp.num_params,)
    assert np.array_equal(tiny_mlp.with_flat(tiny_mlp.flatten()).flatten(), tiny_mlp.flatten())


def test_forward_rejects_wrong_input_width(tiny_mlp) -> None:
    with pytest.raises(NumericError) as exc:
        mlp_forward(tiny_mlp, np.zeros((2, 3)))
    assert exc.value.code == NumericErrorCode.DIMENSION_MISMATCH


def test_backward_with_foreign_cache_is_stale(tiny_mlp, rng) -> None:
    other = init_mlp([4, 5, 3], rng)
    out, cache = mlp_forward(other, np.ones((2, 4)))
    with pytest.raises(NumericError) as exc:
        mlp_backward(tiny_mlp, cache, np.ones_like(out))
    assert exc.value.code == NumericErrorCode.STALE_CACHE


@pytest.mark.parametrize(
    "activation", [Activation.IDENTITY, Activation.SIGMOID, Activation.TANH]
)
def test_backward_matches_finite_differences(activation: Activation) -> None:
    rng = RngState(17)
    params = init_mlp([3, 4, 2], rng, activation)
    x = rng.gaussian(5, 3)
    weights = rng.gaussian(5, 2)

    def loss(flat: np.ndarray) -> float:
        out, _ = mlp_forward(params.with_flat(flat), x)
        return float(np.sum(out * weights))

    out, cache = mlp_forward(params, x)
    grads, _ = mlp_backward(params, cache, weights)
    numeric = finite_diff_grad(loss, params.flatten())
    analytic = grads.flatten()
    scale = np.maximum(np.abs(numeric), 1e-3)
    assert np.max(np.abs(analytic - numeric) / scale) < 1e-5


def test_input_gradient_matches_finite_differences(tiny_mlp, rng) -> None:
    x = rng.gaussian(2, 4)
    weights = rng.gaussian(2, 3)

    def loss(inputs: np.ndarray) -> float:
        out, _ = mlp_forward(tiny_mlp, inputs)
        return float(np.sum(out * weights))

    _, cache = mlp_forward(tiny_mlp, x)
    _, input_grad = mlp_backward(tiny_mlp, cache, weights)
    np.testing.assert_allclose(input_grad, finite_diff_grad(loss, x), rtol=1e-5, atol=1e-8)


def test_per_example_grads_sum_to_batch_gradient(tiny_mlp, rng) -> None:
    x = rng.gaussian(6, 4)
    output_grad = rng.gaussian(6, 3)
    _, cache = mlp_forward(tiny_mlp, x)
    batch, _ = mlp_backward(tiny_mlp, cache, output_grad)
    per_example = per_example_grads(tiny_mlp, cache, output_grad)
    assert per_example.batch_size == 6
    assert np.array_equal(per_example.total(), batch.flatten())


def test_per_example_grads_match_single_example_backward(tiny_mlp, rng) -> None:
    x = rng.gaussian(3, 4)
    output_grad = rng.gaussian(3, 3)
    _, cache = mlp_forward(tiny_mlp, x)
    per_example = per_example_grads(tiny_mlp, cache, output_grad)
    for i in range(3):
        _, single_cache = mlp_forward(tiny_mlp, x[i : i + 1])
        single, _ = mlp_backward(tiny_mlp, single_cache, output_grad[i : i + 1])
        np.testing.assert_allclose(per_example.vectors[i], single.flatten(), rtol=1e-12)


def test_layer_slices_cover_the_vector(tiny_mlp, rng) -> None:
    _, cache = mlp_forward(tiny_mlp, rng.gaussian(2, 4))
    grads = per_example_grads(tiny_mlp, cache, np.ones((2, 3)))
    slices = grads.layer_slices()
    assert [s.stop - s.start for s in slices] == [25, 18]
    assert slices[-1].stop == tiny_mlp.num_params


class TestSoftmaxXent:
    def test_rows_sum_to_one(self) -> None:
        probs = softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]))
        np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])

    def test_gradient_matches_finite_differences(self) -> None:
        rng = RngState(5)
        logits = rng.gaussian(4, 10)
        labels = np.array([0, 3, 9, 3])
        _, grad = softmax_xent(logits, labels)
        numeric = finite_diff_grad(lambda z: softmax_xent(z, labels)[0], logits)
        np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-9)

    def test_uniform_logits_loss_is_log_classes(self) -> None:
        loss, _ = softmax_xent(np.zeros((2, 10)), np.array([1, 2]))
        assert loss == pytest.approx(np.log(10.0))

    def test_rejects_label_out_of_range(self) -> None:
        with pytest.raises(NumericError) as exc:
            softmax_xent(np.zeros((1, 10)), np.array([10]))
        assert exc.value.code == NumericErrorCode.INVALID_LABEL

    def test_rejects_single_class(self) -> None:
        with pytest.raises(NumericError) as exc:
            softmax_xent(np.zeros((2, 1)), np.array([0, 0]))
        assert exc.value.code == NumericErrorCode.DIMENSION_MISMATCH

    def test_rejects_label_count_mismatch(self) -> None:
        with pytest.raises(NumericError):
            softmax_xent(np.zeros((2, 10)), np.array([1]))


def test_adam_two_steps_match_scripted_recurrence() -> None:
    params = np.array([1.0, -2.0])
    grads = [np.array([0.5, -1.0]), np.array([0.25, 2.0])]
    lr = 0.1

    state = AdamState.zeros(2)
    current = params
    for g in grads:
        current, state = adam_step(current, g, state, lr)

    m = np.zeros(2)
    v = np.zeros(2)
    expected = params.copy()
    for t, g in enumerate(grads, start=1):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        expected = expected - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    assert state.t == 2
    np.testing.assert_allclose(current, expected, rtol=1e-15)


def test_adam_rejects_shape_mismatch() -> None:
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)
