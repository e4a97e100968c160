"""B-spline knot grids, Cox-de Boor basis evaluation and least-squares fitting.

A grid of ``grid_size`` G base intervals and spline order k carries
``G + 2k + 1`` knots: the ``G + 1`` grid points plus k extension knots on each
side. It spans ``G + k`` basis functions, which sum to one on the base
interval ``[t_k, t_{G+k}]``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._kernels import dense_columns
from .errors import DimensionError, DomainError, UnsupportedOrderError

DEFAULT_GRID_SIZE = 5
DEFAULT_SPLINE_ORDER = 3


@dataclass(frozen=True, eq=False)
class SplineGrid:
    order: int
    grid_size: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", knots)
        validate_knots(knots[None, :], self.order, self.grid_size)

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    @property
    def base_interval(self) -> tuple[float, float]:
        return float(self.knots[self.order]), float(self.knots[self.grid_size + self.order])

    @property
    def points(self) -> np.ndarray:
        """The G + 1 grid points without extension knots."""
        return self.knots[self.order : self.grid_size + self.order + 1]


def validate_knots(knots: np.ndarray, order: int, grid_size: int) -> None:
    """Check a ``(F, G + 2k + 1)`` stack of knot vectors."""
    if order < 0 or grid_size < 1:
        raise DomainError(f"need order >= 0 and grid_size >= 1, got k={order}, G={grid_size}")
    expected = grid_size + 2 * order + 1
    if knots.ndim != 2 or knots.shape[1] != expected:
        raise DimensionError(f"knot vector length {knots.shape[-1]} != G + 2k + 1 = {expected}")
    if not np.all(np.isfinite(knots)):
        raise DomainError("knots must be finite")
    if np.any(np.diff(knots, axis=1) < 0):
        raise DomainError("knots must be non-decreasing")
    if np.any(knots[:, grid_size + order] <= knots[:, order]):
        raise DomainError("base interval must have positive width")


def extended_knots(points: np.ndarray, order: int, step: np.ndarray | float) -> np.ndarray:
    """Append ``order`` knots on each side of ``points`` (last axis) at spacing ``step``."""
    points = np.asarray(points)
    step = np.asarray(step, dtype=points.dtype)[..., None]
    offs = np.arange(1, order + 1, dtype=points.dtype)
    lower = points[..., :1] - step * offs[::-1]
    upper = points[..., -1:] + step * offs
    return np.concatenate([lower, points, upper], axis=-1)


def uniform_grid(grid_size: int, order: int, lo: float, hi: float) -> SplineGrid:
    if not lo < hi:
        raise DomainError(f"uniform grid needs lo < hi, got [{lo}, {hi}]")
    if grid_size < 1 or order < 0:
        raise DomainError(f"need grid_size >= 1 and order >= 0, got G={grid_size}, k={order}")
    h = (hi - lo) / grid_size
    knots = lo + h * np.arange(-order, grid_size + order + 1, dtype=np.float64)
    # pin the base interval ends exactly
    knots[order] = lo
    knots[grid_size + order] = hi
    return SplineGrid(order, grid_size, knots)


def _safe_inv(d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    np.divide(1.0, d, out=out, where=d > 0)
    return out


def _order0(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Indicator bases, half-open except the last non-empty interval. x: (R, F), t: (F, T)."""
    xe = x[..., None]
    bases = (xe >= t[:, :-1]) & (xe < t[:, 1:])
    widths = np.diff(t, axis=1)
    nonempty = widths > 0
    last = t.shape[1] - 2 - np.argmax(nonempty[:, ::-1], axis=1)
    feat = np.arange(t.shape[0])
    rows, cols = np.nonzero(x == t[feat, last + 1][None, :])
    bases[rows, cols, last[cols]] = True
    return bases.astype(x.dtype)


def _raise_order(x: np.ndarray, t: np.ndarray, bases: np.ndarray, p: int) -> np.ndarray:
    """One Cox-de Boor step from degree p - 1 to degree p."""
    xe = x[..., None]
    t_i = t[:, : -(p + 1)]
    t_ip = t[:, p:-1]
    t_i1 = t[:, 1:-p]
    t_ip1 = t[:, p + 1 :]
    left = (xe - t_i) * _safe_inv(t_ip - t_i) * bases[..., :-1]
    right = (t_ip1 - xe) * _safe_inv(t_ip1 - t_i1) * bases[..., 1:]
    return left + right


def cox_de_boor_reference(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """Full-triangle vectorized recursion over every basis; reference for the local kernel."""
    t = knots.astype(x.dtype, copy=False)
    bases = _order0(x, t)
    for p in range(1, order + 1):
        bases = _raise_order(x, t, bases, p)
    return bases


def cox_de_boor_derivative_reference(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    if order < 1:
        raise UnsupportedOrderError("basis derivative needs spline order >= 1")
    t = knots.astype(x.dtype, copy=False)
    lower = _order0(x, t)
    for p in range(1, order):
        lower = _raise_order(x, t, lower, p)
    inv_l = _safe_inv(t[:, order:-1] - t[:, : -(order + 1)])
    inv_r = _safe_inv(t[:, order + 1 :] - t[:, 1:-order])
    return order * (lower[..., :-1] * inv_l - lower[..., 1:] * inv_r)


def _run_kernel(x: np.ndarray, knots: np.ndarray, order: int, with_deriv: bool):
    xT = np.ascontiguousarray(x.T)
    t = np.ascontiguousarray(knots, dtype=np.float64)
    nb = t.shape[1] - order - 1
    out = np.empty((x.shape[1], nb, x.shape[0]), dtype=x.dtype)
    dout = np.empty_like(out) if with_deriv else np.empty((1, 1, 1), dtype=x.dtype)
    dense_columns(xT, t, order, out, dout, with_deriv)
    out = out.transpose(2, 0, 1)
    return out, (dout.transpose(2, 0, 1) if with_deriv else None)


def feature_bases(xT: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """Feature-major basis values: ``xT`` is ``(F, R)``, result ``(F, T - order - 1, R)``."""
    xT = np.ascontiguousarray(xT)
    t = np.ascontiguousarray(knots, dtype=np.float64)
    out = np.empty((xT.shape[0], t.shape[1] - order - 1, xT.shape[1]), dtype=xT.dtype)
    dense_columns(xT, t, order, out, np.empty((1, 1, 1), dtype=xT.dtype), False)
    return out


def bspline_bases(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """Basis values for per-feature grids.

    ``x`` is ``(R, F)``, ``knots`` is ``(F, T)``; returns ``(R, F, T - order - 1)``.
    """
    return _run_kernel(x, knots, order, False)[0]


def bspline_bases_and_derivative(x: np.ndarray, knots: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and their x-derivatives, both ``(R, F, T - order - 1)``."""
    if order < 1:
        raise UnsupportedOrderError("basis derivative needs spline order >= 1")
    return _run_kernel(x, knots, order, True)


def basis_matrix(x, grid: SplineGrid) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    return bspline_bases(x, grid.knots[None, :], grid.order)[:, 0, :]


def basis_derivative_matrix(x, grid: SplineGrid) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    return bspline_bases_and_derivative(x, grid.knots[None, :], grid.order)[1][:, 0, :]


@dataclass
class SplineFit:
    coef: np.ndarray
    residual: float
    rank: int
    rank_deficient: bool


def solve_least_squares(a: np.ndarray, y: np.ndarray, ridge: float = 0.0, warn: bool = True) -> SplineFit:
    """min ||a c - y||^2 + ridge ||c||^2 through an SVD-based solver.

    With ``ridge == 0`` and a rank-deficient ``a`` the minimum-norm solution is
    returned and ``rank_deficient`` is set.
    """
    if ridge < 0:
        raise DomainError("ridge must be non-negative")
    if a.shape[0] != y.shape[0]:
        raise DimensionError(f"basis matrix has {a.shape[0]} rows, targets have {y.shape[0]}")
    n_coef = a.shape[1]
    if ridge > 0:
        a_aug = np.concatenate([a, np.sqrt(ridge) * np.eye(n_coef, dtype=a.dtype)])
        tail = np.zeros((n_coef,) + y.shape[1:], dtype=y.dtype)
        y_aug = np.concatenate([y, tail])
        coef, _, rank, _ = np.linalg.lstsq(a_aug, y_aug, rcond=None)
    else:
        coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    deficient = bool(ridge == 0 and rank < n_coef)
    if deficient and warn:
        warnings.warn(f"rank-deficient basis matrix (rank {rank} < {n_coef}); minimum-norm solution used",
                      RuntimeWarning, stacklevel=2)
    resid = float(np.sum((a @ coef - y) ** 2))
    return SplineFit(coef, resid, int(rank), deficient)


def solve_least_squares_batched(a: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Independent problems ``a[f] c[f] ~ y[f]`` solved with one stacked SVD.

    ``a`` is ``(F, R, n)`` and ``y`` is ``(F, R, O)``. Singular values below
    the default ``lstsq`` cutoff are dropped, so a rank-deficient problem gets
    its minimum-norm solution. Returns ``(coef (F, n, O), rank (F,))``.
    """
    if ridge < 0:
        raise DomainError("ridge must be non-negative")
    if a.ndim != 3 or y.ndim != 3 or a.shape[:2] != y.shape[:2]:
        raise DimensionError(f"batched shapes do not conform: {a.shape} and {y.shape}")
    n = a.shape[2]
    if ridge > 0:
        eye = np.broadcast_to(np.sqrt(ridge) * np.eye(n), (a.shape[0], n, n))
        a = np.concatenate([a, eye], axis=1)
        y = np.concatenate([y, np.zeros((y.shape[0], n, y.shape[2]))], axis=1)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = np.finfo(a.dtype).eps * max(a.shape[1], n) * s[:, :1]
    keep = s > cutoff
    inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    coef = vt.transpose(0, 2, 1) @ (inv_s[:, :, None] * (u.transpose(0, 2, 1) @ y))
    return coef, keep.sum(axis=1)


def fit_coefficients(x, y, grid: SplineGrid, ridge: float = 0.0) -> SplineFit:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise DimensionError(f"x has {x.shape[0]} samples, y has {y.shape[0]}")
    return solve_least_squares(basis_matrix(x, grid), y, ridge)


def evaluate_spline(x, coef, grid: SplineGrid) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape[0] != grid.n_basis:
        raise DimensionError(f"coefficient length {coef.shape[0]} != G + k = {grid.n_basis}")
    return basis_matrix(x, grid) @ coef
