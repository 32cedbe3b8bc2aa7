"""Minimal two-headed multilayer perceptron with manual backprop and Adam.

Three weight layers (in -> 64 -> 128 -> 12 by default) with a leaky-rectifier
activation. The 12 outputs split into an ellipsoid center (first 3) and a raw
3x3 shape matrix (last 9, reshaped row-major). Backprop is written out
explicitly so the gradient path stays dependency-free and finite-difference
checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

OUTPUT_DIM = 12
DEFAULT_HIDDEN = (64, 128)
DEFAULT_SLOPE = 0.01
# Shape-head bias at initialization: 0.1 * I3, so untrained contracts start as
# large (10 m radius) conservative balls.
INIT_SHAPE_BIAS = 0.1


@dataclass
class Heads:
    """Decoded network output: ellipsoid center and raw shape matrix."""

    center: np.ndarray
    shape_raw: np.ndarray


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # (fan_out, fan_in) per layer
    biases: list[np.ndarray]
    slope: float = DEFAULT_SLOPE

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.slope
        )


@dataclass
class Grads:
    """Gradient container shaped exactly like MlpParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


@dataclass
class ForwardTrace:
    """Activations cached by forward_trace for reuse in backward_trace."""

    inputs: np.ndarray          # (B, in)
    pre_acts: list[np.ndarray]  # hidden pre-activations, (B, h_k)
    acts: list[np.ndarray]      # post-activations including the input
    out: np.ndarray             # (B, 12)


def layer_sizes(params: MlpParams) -> list[int]:
    return [params.weights[0].shape[1]] + [w.shape[0] for w in params.weights]


def param_count(params: MlpParams) -> int:
    """Total number of scalar parameters (weights plus biases)."""
    return int(sum(w.size for w in params.weights) + sum(b.size for b in params.biases))


def init(
    seed: int,
    input_dim: int,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    slope: float = DEFAULT_SLOPE,
) -> MlpParams:
    """Glorot-uniform weights, zero biases except the shape head at 0.1 * I3."""
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    if len(hidden) != 2:
        raise ValueError("the contract network has exactly two hidden layers")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, OUTPUT_DIM]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    biases[-1][3:] = INIT_SHAPE_BIAS * np.eye(3).ravel()
    return MlpParams(weights, biases, float(slope))


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0.0, 1.0, slope)


def forward(params: MlpParams, x) -> Heads:
    """Single-input forward pass; deterministic for fixed (params, input)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.weights[0].shape[1],):
        raise ValueError(
            f"input of dimension {x.size} vs network input size {params.weights[0].shape[1]}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("network input must be finite")
    a = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = _leaky(w @ a + b, params.slope)
    out = params.weights[-1] @ a + params.biases[-1]
    return Heads(center=out[:3].copy(), shape_raw=out[3:].reshape(3, 3).copy())


def forward_trace(params: MlpParams, X: np.ndarray) -> ForwardTrace:
    """Batched forward pass keeping the caches needed for backprop."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[1]:
        raise ValueError("batch must be (B, input_dim)")
    if not np.all(np.isfinite(X)):
        raise ValueError("network input must be finite")
    acts = [X]
    pre_acts = []
    a = X
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ w.T + b
        pre_acts.append(z)
        a = _leaky(z, params.slope)
        acts.append(a)
    out = a @ params.weights[-1].T + params.biases[-1]
    return ForwardTrace(X, pre_acts, acts, out)


def forward_batch(params: MlpParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched heads: centers (B, 3) and raw shape matrices (B, 3, 3)."""
    out = forward_trace(params, X).out
    return out[:, :3], out[:, 3:].reshape(-1, 3, 3)


def backward_trace(params: MlpParams, trace: ForwardTrace, grad_out: np.ndarray) -> Grads:
    """Backprop upstream gradients on the 12 outputs, summed over the batch."""
    grad_out = np.asarray(grad_out, dtype=float)
    n_layers = len(params.weights)
    gw: list[np.ndarray | None] = [None] * n_layers
    gb: list[np.ndarray | None] = [None] * n_layers
    delta = grad_out
    for k in range(n_layers - 1, -1, -1):
        gw[k] = delta.T @ trace.acts[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k]) * _leaky_grad(trace.pre_acts[k - 1], params.slope)
    return Grads(gw, gb)


def backward(params: MlpParams, x, grad_center, grad_shape) -> Grads:
    """Gradient of <grad_center, center> + <grad_shape, shape_raw> w.r.t. params."""
    x = np.asarray(x, dtype=float)
    gout = np.concatenate(
        [np.asarray(grad_center, dtype=float).ravel(), np.asarray(grad_shape, dtype=float).ravel()]
    )
    if gout.shape != (OUTPUT_DIM,):
        raise ValueError("upstream gradients must cover 3 center + 9 shape entries")
    if not np.all(np.isfinite(gout)):
        raise ValueError("upstream gradients must be finite")
    return backward_trace(params, forward_trace(params, x[None, :]), gout[None, :])


@dataclass
class AdamState:
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        [np.zeros_like(b) for b in params.biases],
        0,
        beta1,
        beta2,
        eps,
    )


def adam_step(params: MlpParams, grads: Grads, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """Standard Adam update with bias correction, in place on params and state."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    groups = (
        (params.weights, grads.weights, state.m_weights, state.v_weights),
        (params.biases, grads.biases, state.m_biases, state.v_biases),
    )
    for targets, gs, ms, vs in groups:
        for target, g, m, v in zip(targets, gs, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * np.square(g)
            target -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def params_to_dict(params: MlpParams) -> dict:
    """Flattened row-major form used inside the model file."""
    return {
        "layer_sizes": layer_sizes(params),
        "activation_slope": params.slope,
        "layers": [
            {"weights": w.ravel().tolist(), "biases": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def params_from_dict(doc: dict) -> MlpParams:
    sizes = [int(s) for s in doc["layer_sizes"]]
    weights, biases = [], []
    for (fan_in, fan_out), layer in zip(zip(sizes[:-1], sizes[1:]), doc["layers"]):
        w = np.asarray(layer["weights"], dtype=float).reshape(fan_out, fan_in)
        b = np.asarray(layer["biases"], dtype=float)
        if b.shape != (fan_out,):
            raise ValueError("bias length does not match layer size")
        weights.append(w)
        biases.append(b)
    return MlpParams(weights, biases, float(doc["activation_slope"]))
