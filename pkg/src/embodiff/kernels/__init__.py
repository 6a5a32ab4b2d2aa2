"""MLP compute kernels with a compiled core and a NumPy fallback.

The compiled extension (`_corekern`, Cython) accelerates the single-vector
forward pass used by sampling rollouts. Batched training math stays in
NumPy, where BLAS already does the heavy lifting. Set EMBODIFF_PURE=1 to
force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from ._purepy import mlp_backward, mlp_forward, mlp_forward_cached

_core = None
if not os.environ.get("EMBODIFF_PURE"):
    try:
        from . import _corekern as _core
    except ImportError:
        _core = None

BACKEND = "corekern" if _core is not None else "purepy"


class ForwardRunner:
    """Reusable single-vector forward evaluator bound to one weight set.

    Keeps per-layer output buffers alive across calls so the compiled kernel
    never allocates. Falls back to the NumPy path when no core is built.
    """

    def __init__(self, weights, biases):
        self.weights = [np.ascontiguousarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self._work = [np.empty(W.shape[1], dtype=np.float64) for W in self.weights]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if _core is not None and x.ndim == 1:
            out = _core.mlp_forward_single(
                np.ascontiguousarray(x, dtype=np.float64),
                self.weights,
                self.biases,
                self._work,
            )
            return np.asarray(out)
        return mlp_forward(x, self.weights, self.biases)


__all__ = [
    "BACKEND",
    "ForwardRunner",
    "mlp_backward",
    "mlp_forward",
    "mlp_forward_cached",
]
