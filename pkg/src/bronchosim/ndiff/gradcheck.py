"""Central finite-difference gradient checking (run under float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(f: Callable[..., float], arrays: Sequence[np.ndarray],
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar function w.r.t. each input array."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            args_p = [a.copy() for a in arrays]
            args_m = [a.copy() for a in arrays]
            args_p[k].reshape(-1)[i] += h
            args_m[k].reshape(-1)[i] -= h
            flat[i] = (f(*args_p) - f(*args_m)) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """L2 relative error between two gradient vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build: Callable[..., "Tensor"], arrays: Sequence[np.ndarray],
                    h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``build(*tensors)`` (a scalar Tensor)
    against central differences. Returns the worst relative error over inputs.

    Caller is responsible for switching the global dtype to float64 first.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(*arrs: np.ndarray) -> float:
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(build(*ts).data)

    numeric = numeric_gradient(scalar, [np.asarray(a, dtype=np.float64) for a in arrays], h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
