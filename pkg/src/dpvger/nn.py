"""Plain MLPs with manual reverse-mode gradients.

Every matrix is a 2-D float64 ``np.ndarray``. Products go through ``matmul``,
which accumulates over the inner index in ascending order, so batch gradients
equal the in-order sum of per-example gradients bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from dpvger.errors import NumericError, NumericErrorCode
from dpvger.rng import RngState

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Activation(StrEnum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    TANH = "tanh"


def _shape_error(message: str) -> NumericError:
    return NumericError(message, code=NumericErrorCode.DIMENSION_MISMATCH)


def as_matrix(values: np.ndarray | Sequence[Sequence[float]]) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise _shape_error(f"expected a 2-D matrix, got shape {matrix.shape}")
    return matrix


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major product with the inner sum taken in ascending ``k``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def ordered_row_sum(rows: np.ndarray) -> np.ndarray:
    """Sum of the rows of ``rows`` accumulated first to last."""
    total = np.zeros(rows.shape[1:], dtype=np.float64)
    for row in rows:
        total += row
    return total


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def fan_in(self) -> int:
        return int(self.weight.shape[0])

    @property
    def fan_out(self) -> int:
        return int(self.weight.shape[1])


@dataclass
class MlpParams:
    """Affine layers with ReLU between them and a declared output activation."""

    layers: List[Layer]
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        if not self.layers:
            raise _shape_error("an MLP needs at least one layer")
        for index, layer in enumerate(self.layers):
            if layer.bias.shape != (1, layer.fan_out):
                raise _shape_error(
                    f"layer {index} bias shape {layer.bias.shape} does not match "
                    f"weight shape {layer.weight.shape}"
                )
            if index and self.layers[index - 1].fan_out != layer.fan_in:
                raise _shape_error(
                    f"layer {index} expects width {layer.fan_in} but layer "
                    f"{index - 1} produces {self.layers[index - 1].fan_out}"
                )

    @property
    def widths(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [(layer.fan_in, layer.fan_out) for layer in self.layers]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes)

    def flatten(self) -> np.ndarray:
        parts: List[np.ndarray] = []
        for layer in self.layers:
            parts.append(layer.weight.reshape(-1))
            parts.append(layer.bias.reshape(-1))
        return np.concatenate(parts)

    def with_flat(self, vector: np.ndarray) -> "MlpParams":
        return params_from_flat(vector, self.shapes, self.output_activation)

    def copy(self) -> "MlpParams":
        return MlpParams(
            layers=[
                Layer(layer.weight.copy(), layer.bias.copy()) for layer in self.layers
            ],
            output_activation=self.output_activation,
        )


def params_from_flat(
    vector: np.ndarray,
    shapes: Sequence[Tuple[int, int]],
    output_activation: Activation = Activation.IDENTITY,
) -> MlpParams:
    expected = sum(i * o + o for i, o in shapes)
    if vector.shape != (expected,):
        raise _shape_error(
            f"flat vector of shape {vector.shape} does not fit {expected} parameters"
        )
    layers: List[Layer] = []
    offset = 0
    for fan_in, fan_out in shapes:
        weight = vector[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = vector[offset : offset + fan_out].reshape(1, fan_out)
        offset += fan_out
        layers.append(Layer(weight.copy(), bias.copy()))
    return MlpParams(layers=layers, output_activation=output_activation)


def init_mlp(
    widths: Sequence[int],
    rng: RngState,
    output_activation: Activation = Activation.IDENTITY,
    weight_std: float | None = None,
) -> MlpParams:
    """Gaussian weights (He scale unless ``weight_std`` is given), zero biases."""
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise _shape_error(f"invalid layer widths {list(widths)}")
    layers: List[Layer] = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = weight_std if weight_std is not None else float(np.sqrt(2.0 / fan_in))
        weight = rng.gaussian(fan_in, fan_out) * std
        layers.append(Layer(weight, np.zeros((1, fan_out), dtype=np.float64)))
    return MlpParams(layers=layers, output_activation=output_activation)


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.SIGMOID:
        return expit(z)
    if activation is Activation.TANH:
        return np.tanh(z)
    return z


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations of one forward pass."""

    params: MlpParams
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    outputs: np.ndarray | None = None


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    if x.ndim != 2 or x.shape[1] != params.layers[0].fan_in:
        raise _shape_error(
            f"input of shape {x.shape} does not match input width "
            f"{params.layers[0].fan_in}"
        )
    cache = ForwardCache(params=params)
    hidden = x
    last = len(params.layers) - 1
    for index, layer in enumerate(params.layers):
        cache.inputs.append(hidden)
        z = matmul(hidden, layer.weight) + layer.bias
        cache.pre_activations.append(z)
        hidden = np.maximum(z, 0.0) if index < last else z
    outputs = _activate(hidden, params.output_activation)
    cache.outputs = outputs
    return outputs, cache


def _check_cache(params: MlpParams, cache: ForwardCache, output_grad: np.ndarray) -> None:
    if cache.params is not params or cache.outputs is None:
        raise NumericError(
            "forward cache does not belong to these parameters",
            code=NumericErrorCode.STALE_CACHE,
        )
    if output_grad.shape != cache.outputs.shape:
        raise _shape_error(
            f"output gradient of shape {output_grad.shape} does not match "
            f"outputs of shape {cache.outputs.shape}"
        )


def _deltas(params: MlpParams, cache: ForwardCache, output_grad: np.ndarray) -> List[np.ndarray]:
    """Gradient of the loss with respect to every layer's pre-activation."""
    assert cache.outputs is not None
    activation = params.output_activation
    if activation is Activation.SIGMOID:
        delta = output_grad * cache.outputs * (1.0 - cache.outputs)
    elif activation is Activation.TANH:
        delta = output_grad * (1.0 - cache.outputs * cache.outputs)
    else:
        delta = output_grad.copy()
    deltas = [delta]
    for index in range(len(params.layers) - 1, 0, -1):
        upstream = matmul(delta, params.layers[index].weight.T)
        delta = upstream * (cache.pre_activations[index - 1] > 0.0)
        deltas.append(delta)
    deltas.reverse()
    return deltas


def mlp_backward(
    params: MlpParams, cache: ForwardCache, output_grad: np.ndarray
) -> Tuple[MlpParams, np.ndarray]:
    """Batch-summed parameter gradients and the gradient at the network input.

    ``output_grad`` is the loss gradient with respect to the network outputs
    (after the output activation).
    """
    _check_cache(params, cache, output_grad)
    deltas = _deltas(params, cache, output_grad)
    layers: List[Layer] = []
    for layer_input, delta in zip(cache.inputs, deltas):
        weight_grad = matmul(layer_input.T, delta)
        bias_grad = matmul(np.ones((1, delta.shape[0])), delta)
        layers.append(Layer(weight_grad, bias_grad))
    input_grad = matmul(deltas[0], params.layers[0].weight.T)
    return MlpParams(layers=layers, output_activation=params.output_activation), input_grad


@dataclass
class PerExampleGrads:
    """One flattened gradient per example, in ``MlpParams.flatten`` order."""

    vectors: np.ndarray
    shapes: List[Tuple[int, int]]

    @property
    def batch_size(self) -> int:
        return int(self.vectors.shape[0])

    def total(self) -> np.ndarray:
        return ordered_row_sum(self.vectors)

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors * self.vectors, axis=1))

    def layer_slices(self) -> List[slice]:
        slices: List[slice] = []
        offset = 0
        for fan_in, fan_out in self.shapes:
            size = fan_in * fan_out + fan_out
            slices.append(slice(offset, offset + size))
            offset += size
        return slices


def per_example_grads(
    params: MlpParams, cache: ForwardCache, output_grad: np.ndarray
) -> PerExampleGrads:
    _check_cache(params, cache, output_grad)
    deltas = _deltas(params, cache, output_grad)
    batch = output_grad.shape[0]
    parts: List[np.ndarray] = []
    for layer_input, delta in zip(cache.inputs, deltas):
        outer = layer_input[:, :, None] * delta[:, None, :]
        parts.append(outer.reshape(batch, -1))
        parts.append(delta)
    return PerExampleGrads(vectors=np.concatenate(parts, axis=1), shapes=params.shapes)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient at the logits."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise _shape_error(f"softmax needs at least 2 classes, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise _shape_error(
            f"{labels.shape[0] if labels.ndim else 0} labels for "
            f"{logits.shape[0]} logit rows"
        )
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise NumericError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]",
            code=NumericErrorCode.INVALID_LABEL,
        )
    rows = np.arange(logits.shape[0])
    log_probs = log_softmax(logits)
    loss = -float(np.mean(log_probs[rows, labels]))
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= logits.shape[0]
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float
) -> Tuple[np.ndarray, AdamState]:
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise _shape_error(
            f"adam shapes differ: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}"
        )
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    updated = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return updated, AdamState(m=m, v=v, t=t)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.reshape(-1)[i] = h
        flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad
