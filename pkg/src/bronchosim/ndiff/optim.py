"""SGD and Adam over a ParamStore."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParamStore, zero_grad: bool = True) -> None:
        for name, t in store.items():
            if not t.requires_grad:
                continue
            if t.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient")
            t.data = t.data - self.lr * t.grad
        store.step_count += 1
        if zero_grad:
            store.zero_grad()


class Adam:
    """Adam with bias correction; moment buffers keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, zero_grad: bool = True) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, t in store.items():
            if not t.requires_grad:
                continue
            if t.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient")
            g = t.grad
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            mhat = m / c1
            vhat = v / c2
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        store.step_count += 1
        if zero_grad:
            store.zero_grad()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Global-norm gradient clipping; returns the pre-clip norm."""
    total = 0.0
    grads = []
    for _, t in store.items():
        if t.requires_grad and t.grad is not None:
            grads.append(t)
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in grads:
            t.grad = t.grad * scale
    return norm
