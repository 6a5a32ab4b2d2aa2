"""NumPy reference implementation of the MLP kernels.

All math in float64. Hidden layers use tanh; the output layer is linear.
Weights are (in, out) C-contiguous matrices, so a layer computes x @ W + b.
"""
from __future__ import annotations

import numpy as np

BACKEND = "purepy"


def mlp_forward(x: np.ndarray, weights, biases) -> np.ndarray:
    """Forward pass for x of shape (F,) or (B, F)."""
    h = x
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if i != last:
            h = np.tanh(h)
    return h


def mlp_forward_cached(x: np.ndarray, weights, biases):
    """Forward pass keeping post-activation values for backprop.

    Returns (y, acts) where acts[0] is the input and acts[i] the output of
    hidden layer i (after tanh).
    """
    acts = [x]
    h = x
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if i != last:
            h = np.tanh(h)
            acts.append(h)
    return h, acts


def mlp_backward(dy: np.ndarray, acts, weights):
    """Reverse-mode gradients given upstream dy of shape (B, out).

    Returns (dweights, dbiases, dx) matching the forward conventions.
    """
    n = len(weights)
    dws = [None] * n
    dbs = [None] * n
    grad = dy
    for i in range(n - 1, -1, -1):
        h_in = acts[i]
        dws[i] = h_in.T @ grad
        dbs[i] = grad.sum(axis=0)
        grad = grad @ weights[i].T
        if i > 0:
            grad = grad * (1.0 - acts[i] ** 2)  # tanh'(z) = 1 - tanh(z)^2
    return dws, dbs, grad
