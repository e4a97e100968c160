"""Dense tensor primitives with explicit backward rules and a finite-difference checker.

Tensors are plain ``numpy.ndarray`` values in row-major order. Every
differentiable operation is a pair of pure functions (forward, backward) or a
:class:`DifferentiableOp` object caching what its backward needs.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError

DTYPES = {32: np.float32, 64: np.float64}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def resolve_dtype(precision: int) -> np.dtype:
    try:
        return np.dtype(DTYPES[int(precision)])
    except KeyError:
        raise DomainError(f"precision must be 32 or 64, got {precision}") from None


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"{name} contains a non-finite value at index {tuple(int(i) for i in bad)}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dy @ b.T, a.T @ dy


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x| and keeps the input dtype
    s = np.tanh(x * 0.5)
    s *= 0.5
    s += 0.5
    return s


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
    """Derivative of silu; pass ``s = sigmoid(x)`` when it is already known."""
    s = sigmoid(x) if s is None else s
    return s * (1.0 + x * (1.0 - s))


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> tuple[np.ndarray, tuple]:
    """Per-channel normalization over every axis except 1.

    In train mode the running statistics are updated in place.
    Returns ``(y, cache)``; ``cache`` feeds :func:`batch_norm_backward`.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm channel mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = _bn_axes(x)
    if train:
        n = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    y = xhat * _bn_view(gamma, x.ndim) + _bn_view(beta, x.ndim)
    return y.astype(x.dtype, copy=False), (xhat, inv_std, gamma, train)


def batch_norm_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, train = cache
    axes = _bn_axes(dy)
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * _bn_view(gamma, dy.ndim)
    if not train:
        return dxhat * _bn_view(inv_std, dy.ndim), dgamma, dbeta
    n = dy.size // dy.shape[1]
    mean_dxhat = _bn_view(dxhat.sum(axis=axes) / n, dy.ndim)
    mean_dxhat_xhat = _bn_view(np.sum(dxhat * xhat, axis=axes) / n, dy.ndim)
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * _bn_view(inv_std, dy.ndim)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


class DifferentiableOp:
    """Forward/backward pair with optional trainable parameters.

    ``backward`` must follow the matching ``forward`` call. It returns the
    gradient for each positional input (a single array when there is one
    input) and fills ``self.grads`` for every entry of ``self.params``.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray):
        raise NotImplementedError

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class MatMul(DifferentiableOp):
    def forward(self, a, b):
        self._a, self._b = a, b
        return matmul(a, b)

    def backward(self, dy):
        return matmul_backward(self._a, self._b, dy)


class SiLU(DifferentiableOp):
    def forward(self, x, train: bool = True):
        self._x = x
        self._s = sigmoid(x)
        return x * self._s

    def backward(self, dy):
        return dy * silu_grad(self._x, self._s)


GRAD_CHECK_FULL_LIMIT = 10_000


def grad_check(
    op: DifferentiableOp,
    inputs,
    perturbation: float = 1e-5,
    seed: int = 0,
    subsample: int = 600,
    check_inputs: bool = True,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar probe is ``sum(op(x) * R)`` for a seeded Gaussian ``R``. Every
    input and parameter coordinate is checked unless their total exceeds
    ``GRAD_CHECK_FULL_LIMIT``; then a seeded stratified subsample of about
    ``subsample`` coordinates is used. 64-bit inputs and parameters only.
    """
    if perturbation <= 0:
        raise DomainError("perturbation must be positive")
    if not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    inputs = [np.asarray(x) for x in inputs]
    for name, arr in [(f"input{i}", x) for i, x in enumerate(inputs)] + list(op.params.items()):
        if arr.dtype != np.float64:
            raise DomainError(f"grad_check requires float64; {name} is {arr.dtype}")
        check_finite(arr, name)

    rng = np.random.default_rng(seed)
    y = op.forward(*inputs)
    probe = rng.standard_normal(y.shape)
    op.zero_grad()
    back = op.backward(probe)
    in_grads = list(back) if isinstance(back, tuple) else [back]

    targets: list[tuple[str, np.ndarray, np.ndarray]] = []
    if check_inputs:
        targets += [(f"input{i}", x, g) for i, (x, g) in enumerate(zip(inputs, in_grads))]
    targets += [(f"param:{k}", v, op.grads[k]) for k, v in op.params.items()]

    total = sum(t[1].size for t in targets)
    worst = 0.0
    for name, arr, analytic in targets:
        if analytic.shape != arr.shape:
            raise DimensionError(f"{name}: gradient shape {analytic.shape} != value shape {arr.shape}")
        check_finite(analytic, f"analytic gradient of {name}")
        if total <= GRAD_CHECK_FULL_LIMIT:
            coords = np.arange(arr.size)
        else:
            n = min(arr.size, max(8, int(round(subsample * arr.size / total))))
            coords = np.sort(rng.choice(arr.size, size=n, replace=False))
        flat = arr.reshape(-1)
        ana = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + perturbation
            y_plus = op.forward(*inputs)
            flat[c] = orig - perturbation
            y_minus = op.forward(*inputs)
            flat[c] = orig
            # difference before projecting keeps rounding local to affected outputs
            num = float(np.sum((y_plus - y_minus) * probe)) / (2.0 * perturbation)
            a = float(ana[c])
            if not (np.isfinite(num) and np.isfinite(a)):
                raise NonFiniteError(f"non-finite gradient at {name}[{int(c)}]: analytic={a}, numeric={num}")
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
