"""KANLinear: per-edge learnable activations with data-driven grid updates.

Each edge (input j -> output o) applies

    phi(x) = w_b[o, j] * act(x) + w_s[o, j] * sum_i c[o, j, i] * B_i(x)

and the outputs sum the edges over j. Knot vectors are held per input feature
and shared by all edges leaving that feature.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bspline import (
    DEFAULT_GRID_SIZE,
    DEFAULT_SPLINE_ORDER,
    bspline_bases,
    extended_knots,
    feature_bases,
    solve_least_squares,
    solve_least_squares_batched,
    uniform_grid,
    validate_knots,
    SplineGrid,
)
from ._kernels import spline_backward, spline_forward
from .errors import DegenerateSpanError, DimensionError, DomainError, InsufficientSamplesError
from .layers import Module
from .tensor import sigmoid, silu_grad

BASE_ACTIVATIONS = ("silu", "identity")


@dataclass(frozen=True)
class GridUpdateConfig:
    epsilon: float = 0.02
    margin: float = 0.01
    refit_ridge: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError(f"fusion ratio epsilon must lie in [0, 1], got {self.epsilon}")
        if self.margin < 0 or self.refit_ridge < 0:
            raise DomainError("margin and refit_ridge must be non-negative")


class KANLinear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        grid_size: int = DEFAULT_GRID_SIZE,
        spline_order: int = DEFAULT_SPLINE_ORDER,
        rng: np.random.Generator | None = None,
        noise_scale: float = 0.1,
        base_activation: str = "silu",
        shared_grid: bool = False,
        grid_range: tuple[float, float] = (-1.0, 1.0),
        dtype=np.float32,
    ):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise DomainError("KANLinear dimensions must be positive")
        if base_activation not in BASE_ACTIVATIONS:
            raise DomainError(f"base_activation must be one of {BASE_ACTIVATIONS}")
        self.in_features = in_features
        self.out_features = out_features
        self.grid_size = grid_size
        self.spline_order = spline_order
        self.base_activation = base_activation
        self.shared_grid = shared_grid
        rng = rng if rng is not None else np.random.default_rng(0)

        grid = uniform_grid(grid_size, spline_order, *grid_range)
        self.buffers = {"grid": np.tile(grid.knots, (in_features, 1))}

        bound = 1.0 / np.sqrt(in_features)
        base_weight = rng.uniform(-bound, bound, (out_features, in_features))
        # spline branch starts as a least-squares fit to small noise at the grid points
        noise = (rng.random((grid_size + 1, in_features * out_features)) - 0.5) * noise_scale / grid_size
        a = bspline_bases(grid.points[:, None], grid.knots[None, :], spline_order)[:, 0, :]
        coef = solve_least_squares(a, noise, warn=False).coef
        spline_weight = coef.T.reshape(in_features, out_features, -1).transpose(1, 0, 2)
        self.params = {
            "base_weight": base_weight,
            "spline_weight": np.ascontiguousarray(spline_weight),
            "spline_scaler": np.ones((out_features, in_features)),
        }
        self.astype(dtype)

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.spline_order

    def feature_grid(self, j: int) -> SplineGrid:
        return SplineGrid(self.spline_order, self.grid_size, self.buffers["grid"][j].astype(np.float64))

    def _act(self, x):
        """Base activation and the sigmoid its derivative needs (None for identity)."""
        if self.base_activation == "identity":
            return x, None
        s = sigmoid(x)
        return x * s, s

    def _scaled_weight(self) -> np.ndarray:
        p = self.params
        return p["spline_weight"] * p["spline_scaler"][..., None]

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"KANLinear expects (B, {self.in_features}), got {x.shape}")

    def _kernel_args(self):
        knots = np.ascontiguousarray(self.buffers["grid"], dtype=np.float64)
        coef = np.ascontiguousarray(self._scaled_weight().transpose(1, 2, 0), dtype=np.float64)
        return knots, coef

    def forward(self, x, train=True):
        self._check(x)
        return self.forward_fm(np.ascontiguousarray(x.T), train).T

    def forward_fm(self, xT: np.ndarray, train: bool = True) -> np.ndarray:
        """Feature-major forward: ``(F, B)`` inputs to ``(O, B)`` outputs."""
        if xT.ndim != 2 or xT.shape[0] != self.in_features:
            raise DimensionError(f"KANLinear expects ({self.in_features}, B) feature-major input, got {xT.shape}")
        self._xT = np.ascontiguousarray(xT)
        self._actT, self._sigT = self._act(self._xT)
        yT = np.ascontiguousarray(self.params["base_weight"] @ self._actT)
        knots, coef = self._kernel_args()
        spline_forward(self._xT, knots, self.spline_order, coef, yT)
        return yT

    def spline_output(self, x: np.ndarray) -> np.ndarray:
        """Spline branch only (scaled by ``spline_scaler``), summed over inputs."""
        self._check(x)
        knots, coef = self._kernel_args()
        yT = np.zeros((self.out_features, x.shape[0]), dtype=x.dtype)
        spline_forward(np.ascontiguousarray(x.T), knots, self.spline_order, coef, yT)
        return yT.T

    def backward(self, dy):
        return self.backward_fm(np.ascontiguousarray(dy.T)).T

    def backward_fm(self, dyT: np.ndarray) -> np.ndarray:
        """Feature-major backward: ``(O, B)`` output gradients to ``(F, B)``."""
        xT = self._xT
        p = self.params
        knots, coef = self._kernel_args()
        dyT = np.ascontiguousarray(dyT)
        dxT = np.ascontiguousarray(p["base_weight"].T @ dyT)
        if self._sigT is not None:
            dxT *= silu_grad(xT, self._sigT)
        d_coef = np.zeros_like(coef)
        spline_backward(xT, knots, self.spline_order, coef, dyT, dxT, d_coef)
        d_scaled = d_coef.transpose(2, 0, 1).astype(p["spline_weight"].dtype)
        self.grads = {
            "base_weight": dyT @ self._actT.T,
            "spline_weight": d_scaled * p["spline_scaler"][..., None],
            "spline_scaler": np.sum(d_scaled * p["spline_weight"], axis=-1),
        }
        return dxT

    def update_grid(self, x: np.ndarray, cfg: GridUpdateConfig = GridUpdateConfig(), warn: bool = True) -> "KANLinear":
        """Move the knots to a blend of sample quantiles and a uniform span, then re-fit.

        Coefficients are re-fitted per input feature so the new spline branch
        reproduces the old one on ``x`` in the least-squares sense. Features
        whose re-fit is rank-deficient are listed in ``last_rank_deficient``
        and, when ``warn`` is set, reported with a ``RuntimeWarning``.
        """
        self._check(x)
        n = x.shape[0]
        G, k = self.grid_size, self.spline_order
        if n < G + 1:
            raise InsufficientSamplesError(f"grid update needs at least G + 1 = {G + 1} samples, got {n}")
        x64 = x.astype(np.float64)
        xT = np.ascontiguousarray(x64.T)
        dtype = self.params["spline_weight"].dtype
        old_grid = self.buffers["grid"].astype(np.float64)
        coef = self.params["spline_weight"].astype(np.float64).transpose(1, 2, 0)  # (F, nb, O)

        # old spline-branch values per feature: (F, R, O)
        targets = feature_bases(xT, old_grid, k).transpose(0, 2, 1) @ coef
        new_grid = self.blended_knots(x64, cfg)
        design = np.ascontiguousarray(feature_bases(xT, new_grid, k).transpose(0, 2, 1))
        new_coef, rank = solve_least_squares_batched(design, targets, cfg.refit_ridge)
        self.last_rank_deficient = [int(j) for j in np.flatnonzero(rank < self.n_basis)] if cfg.refit_ridge == 0 else []
        if self.last_rank_deficient and warn:
            warnings.warn(f"rank-deficient re-fit for input features {self.last_rank_deficient}; "
                          "minimum-norm coefficients used", RuntimeWarning, stacklevel=2)

        self.buffers["grid"] = new_grid.astype(self.buffers["grid"].dtype)
        self.params["spline_weight"] = np.ascontiguousarray(new_coef.transpose(2, 0, 1)).astype(dtype)
        return self

    def blended_knots(self, x: np.ndarray, cfg: GridUpdateConfig) -> np.ndarray:
        """Extended ``(F, G + 2k + 1)`` knots for the batch ``x`` (no state change)."""
        G, k = self.grid_size, self.spline_order
        n = x.shape[0]
        cols = x.reshape(-1, 1) if self.shared_grid else x
        xs = np.sort(cols, axis=0, kind="stable")
        m = cfg.margin
        ranks = np.floor(np.linspace(0, xs.shape[0] - 1, G + 1) + 0.5).astype(np.int64)
        adaptive = xs[ranks].T
        lo, hi = xs[0], xs[-1]
        step = (hi - lo + 2 * m) / G
        if np.any(step <= 0):
            j = int(np.argmax(step <= 0))
            raise DegenerateSpanError(
                f"input feature {j} is constant over the batch; use margin m > 0 to update its grid"
            )
        uniform = np.arange(G + 1, dtype=np.float64)[None, :] * step[:, None] + (lo - m)[:, None]
        points = cfg.epsilon * uniform + (1.0 - cfg.epsilon) * adaptive
        # rounding in the step arithmetic may leave the ends an ulp inside the data range
        points[:, 0] = np.minimum(points[:, 0], lo)
        points[:, -1] = np.maximum(points[:, -1], hi)
        knots = extended_knots(points, k, step)
        if self.shared_grid:
            knots = np.tile(knots, (self.in_features, 1))
        try:
            validate_knots(knots, k, G)
        except DomainError as exc:
            raise DegenerateSpanError(f"grid update produced an invalid grid ({exc}); increase epsilon or margin") from exc
        return knots


def init_kan_linear(in_features: int, out_features: int, grid_size: int = DEFAULT_GRID_SIZE,
                    spline_order: int = DEFAULT_SPLINE_ORDER, seed: int = 0, noise_scale: float = 0.1,
                    **kwargs) -> KANLinear:
    return KANLinear(in_features, out_features, grid_size, spline_order,
                     rng=np.random.default_rng(seed), noise_scale=noise_scale, **kwargs)


def kan_linear_parameter_count(in_features: int, out_features: int, grid_size: int, spline_order: int) -> int:
    return out_features * in_features * (grid_size + spline_order + 2)
