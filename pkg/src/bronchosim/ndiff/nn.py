"""Layers built on the autodiff core: dense, conv, LSTM cell.

Layers register their parameters in a ParamStore under a name prefix so
checkpointing and freezing work by prefix. Initialization is fan-in
normal (Kaiming-style) from an explicit rng for reproducibility.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


def fan_in_normal(rng: np.random.Generator, shape: tuple, fan_in: int | None = None,
                  gain: float = 2.0) -> np.ndarray:
    """Kaiming-style init: N(0, sqrt(gain/fan_in))."""
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    std = float(np.sqrt(gain / max(1, fan_in)))
    return rng.normal(0.0, std, size=shape)


class Dense:
    """Affine layer y = xW + b with optional activation."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, act: str | None = None):
        self.w = store.add(f"{name}.w", fan_in_normal(rng, (n_in, n_out), fan_in=n_in))
        self.b = store.add(f"{name}.b", np.zeros(n_out))
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = T.dense_forward(x, self.w, self.b)
        if self.act == "tanh":
            y = T.tanh(y)
        elif self.act == "relu":
            y = T.relu(y)
        elif self.act == "sigmoid":
            y = T.sigmoid(y)
        elif self.act is not None:
            raise ValueError(f"unknown activation {self.act!r}")
        return y


class Conv2d:
    """Valid-mode strided conv layer over (B,C,H,W)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int, rng: np.random.Generator,
                 act: str | None = None):
        fan_in = c_in * kernel * kernel
        self.w = store.add(f"{name}.w",
                           fan_in_normal(rng, (c_out, c_in, kernel, kernel), fan_in=fan_in))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.stride = stride
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, self.b, stride=self.stride)
        if self.act == "relu":
            y = T.relu(y)
        elif self.act == "tanh":
            y = T.tanh(y)
        elif self.act is not None:
            raise ValueError(f"unknown activation {self.act!r}")
        return y


class LSTMCell:
    """Standard LSTM cell (input/forget/cell/output gate order i,f,g,o)."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.wx = store.add(f"{name}.wx", fan_in_normal(rng, (n_in, 4 * n_hidden), fan_in=n_in, gain=1.0))
        self.wh = store.add(f"{name}.wh", fan_in_normal(rng, (n_hidden, 4 * n_hidden), fan_in=n_hidden, gain=1.0))
        self.b = store.add(f"{name}.b", np.zeros(4 * n_hidden))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(x, h, c, self.wx, self.wh, self.b)

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.n_hidden))
        return Tensor(z), Tensor(z.copy())


def lstm_step(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; returns (h', c')."""
    if x.shape[1] != wx.shape[0] or h.shape[1] != wh.shape[0]:
        raise ValueError(f"lstm_step shape mismatch: x{x.shape} wx{wx.shape} h{h.shape}")
    k = wh.shape[0]
    z = T.add(T.add(T.matmul(x, wx), T.matmul(h, wh)), b)
    i = T.sigmoid(T.narrow(z, 1, 0, k))
    f = T.sigmoid(T.narrow(z, 1, k, k))
    g = T.tanh(T.narrow(z, 1, 2 * k, k))
    o = T.sigmoid(T.narrow(z, 1, 3 * k, k))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


class MLP:
    """Stack of Dense layers; hidden activation applied to all but the last."""

    def __init__(self, store: ParamStore, name: str, sizes: list[int],
                 rng: np.random.Generator, hidden_act: str = "tanh"):
        self.layers = []
        for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = hidden_act if li < len(sizes) - 2 else None
            self.layers.append(Dense(store, f"{name}.l{li}", a, b, rng, act=act))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
