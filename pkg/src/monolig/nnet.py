"""Minimal dense-network engine: forward, analytic backward, Adam.

Just enough machinery to train the surrogate detectors without an ML
framework. Everything is float64 numpy; a network instance is a plain
dataclass of weight/bias arrays, so checkpointing is a JSON dump of the
tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class Mlp:
    layer_dims: list
    weights: list  # weights[i] has shape (layer_dims[i], layer_dims[i+1])
    biases: list
    activation: str = "tanh"  # hidden nonlinearity; output layer is linear


@dataclass
class AdamState:
    m_w: list
    v_w: list
    m_b: list
    v_b: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled decay, applied to weights only


def init_mlp(layer_dims, activation="tanh", rng=None) -> Mlp:
    """He-scaled init for relu, Xavier-scaled for tanh; zero biases."""
    if activation not in ("tanh", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    if rng is None:
        rng = np.random.default_rng()
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        if activation == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims=list(layer_dims), weights=weights, biases=biases,
               activation=activation)


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0.0).astype(float)


def forward_cached(net: Mlp, x):
    """Forward pass keeping per-layer preactivations and activations.

    x may be a single vector (d,) or a batch (n, d). Returns
    (output, cache); cache feeds backward_from_cache.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != net.layer_dims[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with first layer dim "
            f"{net.layer_dims[0]}"
        )
    activations = [x]
    pre = []
    a = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == n_layers - 1 else _act(z, net.activation)
        activations.append(a)
    return a, (pre, activations)


def forward(net: Mlp, x):
    """Network output for a vector (d,) or batch (n, d) input."""
    out, _ = forward_cached(net, x)
    return out


def penultimate(net: Mlp, x):
    """Activation of the last hidden layer (the layer feeding the output)."""
    _, (_, activations) = forward_cached(net, x)
    return activations[-2]


def backward_from_cache(net: Mlp, cache, upstream):
    """Backprop given an existing forward cache.

    upstream has the output's shape; for batches, parameter gradients are
    summed over the batch. Returns (weight_grads, bias_grads, input_grad).
    """
    pre, activations = cache
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != activations[-1].shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != output shape "
            f"{activations[-1].shape}"
        )
    batched = upstream.ndim == 2
    delta = upstream
    w_grads = [None] * len(net.weights)
    b_grads = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = activations[i]
        if batched:
            w_grads[i] = a_in.T @ delta
            b_grads[i] = delta.sum(axis=0)
        else:
            w_grads[i] = np.outer(a_in, delta)
            b_grads[i] = delta.copy()
        delta = delta @ net.weights[i].T
        if i > 0:
            delta = delta * _act_grad(pre[i - 1], activations[i], net.activation)
    return w_grads, b_grads, delta


def backward(net: Mlp, x, upstream):
    """Gradients of upstream . output with respect to all parameters and x."""
    _, cache = forward_cached(net, x)
    return backward_from_cache(net, cache, upstream)


def init_adam(net: Mlp, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0) -> AdamState:
    return AdamState(
        m_w=[np.zeros_like(w) for w in net.weights],
        v_w=[np.zeros_like(w) for w in net.weights],
        m_b=[np.zeros_like(b) for b in net.biases],
        v_b=[np.zeros_like(b) for b in net.biases],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adam_step(net: Mlp, grads, state: AdamState):
    """One bias-corrected Adam update, in place; returns (net, state)."""
    w_grads, b_grads = grads
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i in range(len(net.weights)):
        for p, g, m, v, decay in (
            (net.weights[i], w_grads[i], state.m_w[i], state.v_w[i], True),
            (net.biases[i], b_grads[i], state.m_b[i], state.v_b[i], False),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / corr1
            v_hat = v / corr2
            p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
            if decay and state.weight_decay:
                p -= state.lr * state.weight_decay * p
    return net, state


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def mlp_to_dict(net: Mlp) -> dict:
    return {
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }

def mlp_from_dict(d: dict) -> Mlp:
    dims = [int(v) for v in d["layer_dims"]]
    weights = [np.asarray(w, dtype=float) for w in d["weights"]]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise ValueError(f"checkpoint tensor shapes inconsistent at layer {i}")
    return Mlp(layer_dims=dims, weights=weights, biases=biases,
               activation=d["activation"])


def save_mlp(path, net: Mlp):
    with open(path, "w") as f:
        json.dump(mlp_to_dict(net), f)


def load_mlp(path) -> Mlp:
    with open(path) as f:
        return mlp_from_dict(json.load(f))
