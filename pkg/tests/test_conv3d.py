import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kanet.conv3d import (
    AvgPool3d,
    Conv3d,
    ConvGeometry,
    GlobalAvgPool,
    KanConv3d,
    avg_pool3d,
    fold3d,
    fold3d_fm,
    global_avg_pool,
    kan_conv3d_parameter_count,
    linear_conv3d,
    naive_conv3d,
    unfold3d,
    unfold3d_fm,
)
from kanet.errors import DimensionError, GeometryError
from kanet.kan_linear import GridUpdateConfig
from kanet.tensor import grad_check

F64 = np.float64


def naive_unfold(x, g):
    """Loop oracle: row n holds channel-major, then kernel-offset row-major taps."""
    B, C, D, H, W = x.shape
    out = g.output_shape((D, H, W))
    K, s, p, d = g.kernel, g.stride, g.padding, g.dilation
    rows = np.zeros((B, int(np.prod(out)), C * g.volume))
    n = 0
    for i in range(out[0]):
        for j in range(out[1]):
            for k in range(out[2]):
                col = 0
                for c in range(C):
                    for a in range(K[0]):
                        for b in range(K[1]):
                            for e in range(K[2]):
                                z = (i * s[0] - p[0] + a * d[0], j * s[1] - p[1] + b * d[1], k * s[2] - p[2] + e * d[2])
                                if all(0 <= z[q] < (D, H, W)[q] for q in range(3)):
                                    rows[:, n, col] = x[:, c, z[0], z[1], z[2]]
                                col += 1
                n += 1
    return rows


def seeded_geometry(seed):
    rng = np.random.default_rng(seed)
    g = ConvGeometry(tuple(rng.integers(1, 4, 3)), tuple(rng.integers(1, 3, 3)),
                     tuple(rng.integers(0, 3, 3)), tuple(rng.integers(1, 3, 3)))
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), *rng.integers(5, 8, 3)))
    return rng, g, x


# oracles --------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_unfold_matches_loop_oracle(seed):
    _, g, x = seeded_geometry(seed)
    np.testing.assert_array_equal(unfold3d(x, g), naive_unfold(x, g))
    np.testing.assert_array_equal(unfold3d_fm(x, g), unfold3d(x, g).reshape(-1, x.shape[1] * g.volume).T)


@pytest.mark.parametrize("seed", range(20))
def test_linear_conv_matches_naive_loops(seed):
    rng, g, x = seeded_geometry(100 + seed)
    w = rng.standard_normal((2, x.shape[1]) + g.kernel)
    b = rng.standard_normal(2)
    np.testing.assert_allclose(linear_conv3d(x, w, b, g), naive_conv3d(x, w, b, g), atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_fold_is_adjoint_of_unfold(seed):
    rng, g, x = seeded_geometry(200 + seed)
    cols = rng.standard_normal(unfold3d(x, g).shape)
    lhs = np.sum(unfold3d(x, g) * cols)
    rhs = np.sum(x * fold3d(cols, x.shape, g))
    assert lhs == pytest.approx(rhs, rel=1e-12)
    colsT = rng.standard_normal(unfold3d_fm(x, g).shape)
    assert np.sum(unfold3d_fm(x, g) * colsT) == pytest.approx(np.sum(x * fold3d_fm(colsT, x.shape, g)), rel=1e-12)


def test_fold_of_unfold_counts_patch_multiplicity():
    g = ConvGeometry(3, padding=1)
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 5, 3))
    ones = np.ones_like(x)
    multiplicity = fold3d(unfold3d(ones, g), x.shape, g)
    np.testing.assert_allclose(fold3d(unfold3d(x, g), x.shape, g), x * multiplicity)
    # counting oracle: each axis contributes the number of in-bounds neighbours
    per_axis = [np.convolve(np.ones(n), np.ones(3), mode="same") for n in x.shape[2:]]
    expected = np.einsum("i,j,k->ijk", *per_axis)
    np.testing.assert_array_equal(multiplicity[0, 0], expected)


# shapes and hand examples --------------------------------------------------

def test_unfold_shapes():
    x = np.zeros((1, 2, 5, 5, 5))
    assert unfold3d(x, ConvGeometry(3)).shape == (1, 27, 54)
    assert unfold3d(x, ConvGeometry(3, stride=2, padding=1)).shape == (1, 27, 54)


def test_unfold_corner_row_counts():
    C = 2
    rows = unfold3d(np.ones((1, C, 4, 4, 4)), ConvGeometry(3, padding=1))
    assert rows[0, 0].sum() == 8 * C and np.sum(rows[0, 0] == 0) == 19 * C


def test_delta_kernel_is_identity():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 5, 6))
    w = np.zeros((3, 3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1, 1] = 1.0
    np.testing.assert_allclose(linear_conv3d(x, w, None, ConvGeometry(3, padding=1)), x, atol=1e-15)


def test_geometry_validation():
    with pytest.raises(GeometryError):
        ConvGeometry(3, stride=0)
    with pytest.raises(GeometryError):
        ConvGeometry(3, padding=-1)
    with pytest.raises(GeometryError):
        ConvGeometry(3).output_shape((2, 5, 5))
    with pytest.raises(DimensionError):
        unfold3d(np.zeros((2, 5, 5, 5)), ConvGeometry(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(1, 2), st.integers(1, 12))
def test_output_extent_formula(k, s, p, d, n):
    g = ConvGeometry(k, s, p, d)
    span = d * (k - 1) + 1
    if n + 2 * p < span:
        with pytest.raises(GeometryError):
            g.output_shape((n, n, n))
    else:
        assert g.output_shape((n, n, n)) == ((n + 2 * p - span) // s + 1,) * 3
        assert unfold3d(np.zeros((1, 1, n, n, n)), g).shape[1] == g.output_shape((n, n, n))[0] ** 3


# KAN convolution ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_kan_conv_degenerates_to_linear_conv(seed):
    rng = np.random.default_rng(300 + seed)
    c_in, c_out = (int(v) for v in rng.integers(1, 4, 2))
    g = ConvGeometry(int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2)))
    layer = KanConv3d(c_in, c_out, g, rng, base_activation="identity", dtype=F64)
    layer.params["spline_scaler"][:] = 0.0
    x = rng.standard_normal((2, c_in, 5, 6, 5))
    w = layer.params["base_weight"].reshape((c_out, c_in) + g.kernel)
    np.testing.assert_allclose(layer.forward(x), linear_conv3d(x, w, None, g), atol=1e-6)


def test_kan_conv_shape():
    layer = KanConv3d(4, 8, ConvGeometry(3, padding=1), np.random.default_rng(0))
    assert layer.forward(np.zeros((2, 4, 9, 9, 9), np.float32)).shape == (2, 8, 9, 9, 9)


def test_kan_conv_equals_kan_linear_on_unfolded_rows():
    rng = np.random.default_rng(2)
    layer = KanConv3d(2, 3, ConvGeometry(3, stride=2, padding=1), rng, dtype=F64)
    layer.params["spline_weight"][:] = rng.standard_normal(layer.params["spline_weight"].shape)
    x = rng.uniform(-1, 1, (2, 2, 5, 4, 6))
    y = layer.forward(x)
    rows = unfold3d(x, layer.geometry).reshape(-1, 2 * 27)
    ref = layer.kan.forward(rows).reshape(2, *layer.geometry.output_shape(x.shape[2:]), 3).transpose(0, 4, 1, 2, 3)
    np.testing.assert_allclose(y, ref, atol=1e-13)


def test_kan_conv_locality():
    rng = np.random.default_rng(3)
    layer = KanConv3d(1, 2, ConvGeometry(3, padding=1), rng, dtype=F64)
    x = rng.uniform(-1, 1, (1, 1, 7, 7, 7))
    x2 = x.copy()
    x2[0, 0, 3, 2, 5] += 0.5
    changed = np.any(layer.forward(x2) != layer.forward(x), axis=1)[0]
    expected = np.zeros((7, 7, 7), bool)
    expected[2:5, 1:4, 4:7] = True
    np.testing.assert_array_equal(changed, expected)


def test_kan_conv_grad_check_tiny():
    rng = np.random.default_rng(4)
    layer = KanConv3d(2, 2, ConvGeometry(3, padding=1), rng, dtype=F64)
    assert grad_check(layer, [rng.uniform(-1, 1, (1, 2, 4, 4, 4))]) < 1e-4


def test_kan_conv_parameter_count():
    layer = KanConv3d(3, 5, ConvGeometry((3, 3, 1)), np.random.default_rng(0))
    assert layer.num_parameters() == kan_conv3d_parameter_count(3, 5, (3, 3, 1), 5, 3) == 5 * 3 * 9 * 10


def test_kan_conv_grid_update_subsamples_rows():
    rng = np.random.default_rng(5)
    layer = KanConv3d(1, 1, ConvGeometry(3, padding=1), rng, dtype=F64)
    x = rng.normal(0.5, 0.2, (2, 1, 8, 8, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # padded taps must not warn
        layer.update_grid(x, GridUpdateConfig(), np.random.default_rng(0), max_rows=100)
    assert layer.kan.last_rank_deficient  # corner taps see mostly padding zeros
    for j in range(27):
        lo, hi = layer.kan.feature_grid(j).base_interval
        assert lo < 0.5 < hi


# linear conv and pooling -----------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_linear_conv_grad_check(seed):
    rng, g, _ = seeded_geometry(400 + seed)
    layer = Conv3d(2, 2, g, rng, dtype=F64)
    layer.params["bias"] = rng.standard_normal(2)
    assert grad_check(layer, [rng.standard_normal((1, 2, 5, 6, 5))]) < 1e-4


def test_avg_pool_examples():
    x = np.full((1, 2, 4, 4, 4), 3.5)
    np.testing.assert_array_equal(avg_pool3d(x, 2), np.full((1, 2, 2, 2, 2), 3.5))
    checker = 1.0 + (np.indices((4, 4, 4)).sum(axis=0) % 2)
    np.testing.assert_array_equal(avg_pool3d(checker[None, None], 2), 1.5)


def test_avg_pool_odd_extent_drops_tail():
    x = np.arange(5.0).reshape(1, 1, 1, 1, 5) * np.ones((1, 1, 2, 2, 1))
    np.testing.assert_array_equal(avg_pool3d(x, 2)[0, 0, 0, 0], [0.5, 2.5])


def test_avg_pool_grad_check():
    rng = np.random.default_rng(6)
    assert grad_check(AvgPool3d(2), [rng.standard_normal((2, 2, 4, 5, 6))]) < 1e-5
    assert grad_check(AvgPool3d((2, 2, 3), (1, 2, 2)), [rng.standard_normal((1, 2, 4, 4, 7))]) < 1e-5


def test_global_pool_examples_and_grad():
    rng = np.random.default_rng(7)
    np.testing.assert_allclose(global_avg_pool(np.full((2, 3, 2, 2, 2), -1.5)), -1.5)
    x, y = rng.standard_normal((2, 3, 2, 3, 4)), rng.standard_normal((2, 3, 2, 3, 4))
    np.testing.assert_allclose(global_avg_pool(2 * x - 3 * y), 2 * global_avg_pool(x) - 3 * global_avg_pool(y),
                               atol=1e-14)
    assert grad_check(GlobalAvgPool(), [x]) < 1e-6
