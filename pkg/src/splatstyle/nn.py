"""Tiny fully-connected net with manual forward/backward, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class MlpParams:
    """Affine layers with ReLU hidden activations and a sigmoid output head."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight rows != bias size")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def dims(self) -> list:
        return [self.input_dim] + [w.shape[0] for w in self.weights]


def he_uniform_mlp(dims, seed: int = 0, zero_last: bool = False) -> MlpParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if zero_last and i == len(dims) - 2:
            w = np.zeros((fan_out, fan_in))
        else:
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Returns (output in (0,1), cache for mlp_backward)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input width {x.shape[1]} != {params.input_dim}")
    inputs = [x]
    last = len(params.weights) - 1
    out = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = out @ w.T + b
        out = _sigmoid(z) if i == last else np.maximum(z, 0.0)
        inputs.append(out)
    cache = {"inputs": inputs, "params": params}
    return out, cache


def mlp_backward(params: MlpParams, cache, grad_output: np.ndarray):
    """Exact reverse-mode gradients; returns (dL/dparams, dL/dinput)."""
    if cache.get("params") is not params:
        raise RuntimeError("cache does not belong to these parameters")
    inputs = cache["inputs"]
    grad_output = np.asarray(grad_output, dtype=np.float64)
    y = inputs[-1]
    if grad_output.shape != y.shape:
        raise ValueError(f"grad_output shape {grad_output.shape} != {y.shape}")

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    delta = grad_output * y * (1.0 - y)          # sigmoid head
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = inputs[i]
        grad_w[i] = delta.T @ a_in
        grad_b[i] = delta.sum(axis=0)
        grad_in = delta @ params.weights[i]
        if i > 0:
            grad_in = grad_in * (inputs[i] > 0.0)  # ReLU mask (inputs[i] = relu(z_i))
        delta = grad_in
    return {"weights": grad_w, "biases": grad_b}, delta


@dataclass
class AdamState:
    """First/second moments for a flat list of parameter arrays."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 1e-4) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update, in place; returns the parameter list."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads do not match optimizer state")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in adam_step")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kernels.adam_update(p, np.asarray(g, dtype=np.float64), m, v,
                            state.lr, state.beta1, state.beta2, state.eps, bc1, bc2)
    return params
