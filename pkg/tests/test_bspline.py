import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from kanet.bspline import (
    SplineGrid,
    basis_derivative_matrix,
    basis_matrix,
    bspline_bases,
    bspline_bases_and_derivative,
    cox_de_boor_derivative_reference,
    cox_de_boor_reference,
    evaluate_spline,
    feature_bases,
    fit_coefficients,
    solve_least_squares,
    solve_least_squares_batched,
    uniform_grid,
)
from kanet.errors import DimensionError, DomainError, UnsupportedOrderError

GRID_CASES = [(G, k) for G in (3, 5, 8) for k in (1, 2, 3)]


def scipy_basis(x, knots, k):
    """Independent oracle: each basis as a one-hot BSpline (interior points only)."""
    n = len(knots) - k - 1
    return np.stack([BSpline(knots, np.eye(n)[i], k, extrapolate=False)(x) for i in range(n)], axis=1)


# oracles first -------------------------------------------------------------

@pytest.mark.parametrize("G,k", GRID_CASES)
def test_kernel_matches_scipy_inside_base_interval(G, k):
    grid = uniform_grid(G, k, -1.0, 1.0)
    x = np.random.default_rng(G * 10 + k).uniform(-1, 1, 300)
    np.testing.assert_allclose(basis_matrix(x, grid), np.nan_to_num(scipy_basis(x, grid.knots, k)), atol=1e-13)


@pytest.mark.parametrize("k", [0, 1, 2, 3, 4])
def test_kernel_matches_reference_recursion_on_irregular_knots(k):
    rng = np.random.default_rng(k)
    knots = np.sort(rng.uniform(-2, 2, (3, 12 + 2 * k)), axis=1)
    knots[1, 5] = knots[1, 4]  # repeated knot exercises the 0/0 rule
    knots[2, 6:8] = knots[2, 5]
    x = rng.uniform(-2.5, 2.5, (400, 3))
    x[:3] = knots[:, [0, 5, -1]].T  # knot hits including the right end
    np.testing.assert_allclose(bspline_bases(x, knots, k), cox_de_boor_reference(x, knots, k), atol=1e-13)
    if k:
        _, d = bspline_bases_and_derivative(x, knots, k)
        np.testing.assert_allclose(d, cox_de_boor_derivative_reference(x, knots, k), atol=1e-11)


def test_feature_major_layout_matches_row_major():
    rng = np.random.default_rng(1)
    knots = np.tile(uniform_grid(5, 3, -1, 1).knots, (4, 1))
    x = rng.uniform(-1, 1, (50, 4))
    np.testing.assert_array_equal(feature_bases(x.T, knots, 3), bspline_bases(x, knots, 3).transpose(1, 2, 0))


def test_float32_inputs_stay_float32():
    grid = uniform_grid(5, 3, -1, 1)
    x = np.linspace(-1, 1, 7, dtype=np.float32)[:, None]
    out = bspline_bases(x, grid.knots[None], 3)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# hand examples -------------------------------------------------------------

def test_uniform_grid_examples():
    np.testing.assert_allclose(uniform_grid(2, 1, 0, 1).knots, [-0.5, 0, 0.5, 1, 1.5])
    g = uniform_grid(5, 3, -1, 1)
    assert len(g.knots) == 12 and g.knots[0] == pytest.approx(-2.2)
    np.testing.assert_allclose(np.diff(g.knots), 0.4)
    np.testing.assert_array_equal(uniform_grid(1, 0, 2.0, 3.0).knots, [2.0, 3.0])


def test_basis_matrix_examples():
    g0 = SplineGrid(0, 2, np.array([0.0, 1.0, 2.0]))
    np.testing.assert_array_equal(basis_matrix([0.5], g0), [[1.0, 0.0]])
    g1 = uniform_grid(2, 1, 0, 1)
    np.testing.assert_allclose(basis_matrix([0.25], g1), [[0.5, 0.5, 0.0]])
    assert basis_matrix([0.3], uniform_grid(5, 3, -1, 1)).sum() == pytest.approx(1.0, abs=1e-12)


def test_order_zero_right_endpoint_closed():
    g = SplineGrid(0, 2, np.array([0.0, 1.0, 2.0]))
    np.testing.assert_array_equal(basis_matrix([0.0, 1.0, 2.0, 2.5, -0.1], g),
                                  [[1, 0], [0, 1], [0, 1], [0, 0], [0, 0]])


def test_hat_derivative_is_plus_minus_inverse_spacing():
    g = uniform_grid(2, 1, 0, 1)  # spacing 0.5, hat 1 peaks at 0.5
    d = basis_derivative_matrix([0.25, 0.75], g)
    assert d[0, 1] == pytest.approx(2.0) and d[1, 1] == pytest.approx(-2.0)


def test_derivative_rows_sum_to_zero_and_match_differences():
    g = uniform_grid(5, 3, -1, 1)
    x = np.random.default_rng(2).uniform(-0.99, 0.99, 200)
    d = basis_derivative_matrix(x, g)
    np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-12)
    h = 1e-6
    fd = (basis_matrix(x + h, g) - basis_matrix(x - h, g)) / (2 * h)
    np.testing.assert_allclose(d, fd, atol=1e-6)


def test_derivative_needs_order_one():
    with pytest.raises(UnsupportedOrderError):
        basis_derivative_matrix([0.0], SplineGrid(0, 2, np.array([0.0, 1.0, 2.0])))


# properties ----------------------------------------------------------------

@pytest.mark.parametrize("G,k", GRID_CASES)
def test_partition_support_nonnegativity(G, k):
    grid = uniform_grid(G, k, -1.0, 1.0)
    x = np.random.default_rng(100 + G * 10 + k).uniform(-1, 1, 1000)
    b = basis_matrix(x, grid)
    assert np.max(np.abs(b.sum(axis=1) - 1.0)) < 1e-10
    assert np.all(b >= 0)
    t = grid.knots
    for i in range(grid.n_basis):
        outside = (x < t[i]) | (x > t[i + k + 1])
        assert np.all(b[outside, i] == 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 4), st.floats(-5, 5), st.floats(0.01, 10),
       st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_partition_of_unity_any_uniform_grid(G, k, lo, width, u):
    grid = uniform_grid(G, k, lo, lo + width)
    x = lo + width * np.asarray(u)
    b = basis_matrix(x, grid)
    assert np.all(b >= 0)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-10)


def test_outside_base_interval_is_not_clamped():
    g = uniform_grid(5, 3, -1, 1)
    row = basis_matrix([1.1], g)[0]
    assert 0 < row.sum() < 1


def test_spline_grid_validation():
    with pytest.raises(DimensionError):
        SplineGrid(3, 5, np.arange(10.0))
    with pytest.raises(DomainError):
        SplineGrid(1, 2, np.array([0.0, 1.0, 0.5, 2.0, 3.0]))
    with pytest.raises(DomainError):
        SplineGrid(1, 1, np.array([0.0, 1.0, 1.0, 2.0]))
    with pytest.raises(DomainError):
        uniform_grid(3, 1, 1.0, 1.0)


# fitting -------------------------------------------------------------------

def test_construct_then_recover():
    grid = uniform_grid(8, 3, -1, 1)
    rng = np.random.default_rng(3)
    c_true = rng.standard_normal(grid.n_basis)
    x = rng.uniform(-1, 1, 200)
    fit = fit_coefficients(x, basis_matrix(x, grid) @ c_true, grid)
    assert np.sqrt(np.mean((fit.coef - c_true) ** 2)) <= 1e-8
    assert not fit.rank_deficient


def test_zero_targets_give_zero_coefficients():
    grid = uniform_grid(5, 3, -1, 1)
    x = np.linspace(-1, 1, 50)
    np.testing.assert_array_equal(fit_coefficients(x, np.zeros(50), grid).coef, 0.0)


def test_finer_grid_fits_sine_ten_times_better():
    x = np.linspace(-1, 1, 400)
    y = np.sin(np.pi * x)
    rms = {}
    for G in (5, 20):
        grid = uniform_grid(G, 3, -1, 1)
        rms[G] = np.sqrt(np.mean((evaluate_spline(x, fit_coefficients(x, y, grid).coef, grid) - y) ** 2))
    assert rms[20] < rms[5] / 10


def test_fit_is_locally_optimal():
    grid = uniform_grid(5, 3, -1, 1)
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, 120)
    y = np.cos(3 * x) + 0.1 * rng.standard_normal(120)
    fit = fit_coefficients(x, y, grid)
    a = basis_matrix(x, grid)
    for _ in range(100):
        c = fit.coef + 1e-3 * rng.standard_normal(fit.coef.shape)
        assert fit.residual <= np.sum((a @ c - y) ** 2)


def test_evaluate_spline_examples():
    grid = uniform_grid(5, 3, -1, 1)
    x = np.linspace(-1, 1, 33)
    np.testing.assert_allclose(evaluate_spline(x, np.ones(grid.n_basis), grid), 1.0, atol=1e-12)
    e = np.zeros(grid.n_basis)
    e[3] = 1.0
    np.testing.assert_array_equal(evaluate_spline(x, e, grid), basis_matrix(x, grid)[:, 3])
    with pytest.raises(DimensionError):
        evaluate_spline(x, np.ones(3), grid)


def test_round_trip_in_space_target():
    grid = uniform_grid(6, 2, 0, 3)
    rng = np.random.default_rng(5)
    c = rng.standard_normal(grid.n_basis)
    x = rng.uniform(0, 3, 100)
    y = evaluate_spline(x, c, grid)
    assert np.max(np.abs(evaluate_spline(x, fit_coefficients(x, y, grid).coef, grid) - y)) < 1e-8


def test_rank_deficient_fit_warns_and_returns_min_norm():
    grid = uniform_grid(5, 3, -1, 1)
    x = np.full(20, 0.1)
    a = basis_matrix(x, grid)
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        fit = fit_coefficients(x, np.full(20, 2.0), grid)
    assert fit.rank_deficient
    np.testing.assert_allclose(fit.coef, np.linalg.pinv(a) @ np.full(20, 2.0), atol=1e-12)


def test_ridge_matches_normal_equations():
    rng = np.random.default_rng(6)
    a, y = rng.standard_normal((30, 6)), rng.standard_normal((30, 2))
    fit = solve_least_squares(a, y, ridge=0.5)
    np.testing.assert_allclose(fit.coef, np.linalg.solve(a.T @ a + 0.5 * np.eye(6), a.T @ y), atol=1e-12)
    with pytest.raises(DomainError):
        solve_least_squares(a, y, ridge=-1.0)


def test_batched_solver_matches_per_problem_lstsq():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((4, 25, 6))
    a[2, :, 5] = a[2, :, 4]  # one rank-deficient problem
    y = rng.standard_normal((4, 25, 3))
    coef, rank = solve_least_squares_batched(a, y)
    for f in range(4):
        ref, _, r, _ = np.linalg.lstsq(a[f], y[f], rcond=None)
        np.testing.assert_allclose(coef[f], ref, atol=1e-12)
        assert rank[f] == r
    coef_r, _ = solve_least_squares_batched(a, y, ridge=0.1)
    for f in range(4):
        np.testing.assert_allclose(coef_r[f], np.linalg.solve(a[f].T @ a[f] + 0.1 * np.eye(6), a[f].T @ y[f]),
                                   atol=1e-10)
