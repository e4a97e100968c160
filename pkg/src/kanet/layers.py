"""Stateful layer modules built on the functional ops in :mod:`kanet.tensor`."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import (
    BN_EPS,
    BN_MOMENTUM,
    DifferentiableOp,
    batch_norm_backward,
    batch_norm_forward,
    sigmoid,
    silu_grad,
)


class Module(DifferentiableOp):
    """A single-input layer with trainable ``params`` and non-trainable ``buffers``.

    ``backward`` overwrites ``grads`` and returns the input gradient.
    """

    def __init__(self):
        super().__init__()
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        return self.forward(x, train)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "Module":
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        self.grads = {}
        return self


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise DimensionError(f"BatchNorm expects {self.channels} channels, got {x.shape[1]}")
        y, self._cache = batch_norm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps,
        )
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = batch_norm_backward(dy, self._cache)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx


class SiLUAct(Module):
    def forward(self, x, train=True):
        self._x = x
        self._s = sigmoid(x)
        return x * self._s

    def backward(self, dy):
        return dy * silu_grad(self._x, self._s)


class Linear(Module):
    """Affine map on ``(B, in)`` rows: ``y = x W^T + b``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True, init_scale: float = 1.0):
        super().__init__()
        bound = init_scale / np.sqrt(in_features)
        self.params = {"weight": rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)}
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype)

    def forward(self, x, train=True):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"Linear expects (B, {w.shape[1]}), got {x.shape}")
        self._x = x
        y = x @ w.T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        self.grads = {"weight": dy.T @ self._x}
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]
