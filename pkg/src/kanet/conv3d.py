"""Unfold-based 3D convolution: KAN convolution, linear convolution and pooling.

Unfolded rows are flattened channel-major, then by kernel offset in row-major
order. This order is part of the checkpoint layout and must not change.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, GeometryError
from .kan_linear import GridUpdateConfig, KANLinear
from .layers import Module

Triple = tuple[int, int, int]
AXES = ("depth", "height", "width")

log = logging.getLogger("kanet")


def _triple(v) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise GeometryError(f"expected 3 values, got {v}")
    return v


@dataclass(frozen=True)
class ConvGeometry:
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    dilation: Triple = (1, 1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if min(self.kernel + self.stride + self.dilation) < 1 or min(self.padding) < 0:
            raise GeometryError(f"invalid geometry {self}")

    @property
    def volume(self) -> int:
        return int(np.prod(self.kernel))

    def output_shape(self, spatial) -> Triple:
        out = []
        for axis, n, k, s, p, d in zip(AXES, spatial, self.kernel, self.stride, self.padding, self.dilation):
            span = d * (k - 1) + 1
            if n + 2 * p < span:
                raise GeometryError(f"kernel span {span} exceeds padded {axis} extent {n + 2 * p}")
            out.append((n + 2 * p - span) // s + 1)
        return tuple(out)


def _windows(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """Strided view ``(B, C, D', H', W', K1, K2, K3)`` over the zero-padded input."""
    if x.ndim != 5:
        raise DimensionError(f"unfold3d expects a 5D tensor, got shape {x.shape}")
    out = g.output_shape(x.shape[2:])
    p = g.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]))) if any(p) else x
    spans = tuple(d * (k - 1) + 1 for k, d in zip(g.kernel, g.dilation))
    v = sliding_window_view(xp, spans, axis=(2, 3, 4))
    s, d = g.stride, g.dilation
    v = v[:, :, ::s[0], ::s[1], ::s[2], ::d[0], ::d[1], ::d[2]]
    return v[:, :, : out[0], : out[1], : out[2]]


def unfold3d(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """``(B, C, D, H, W)`` -> ``(B, N, C * K1 * K2 * K3)`` with zero padding."""
    v = _windows(x, g)
    B, C, D, H, W = v.shape[:5]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(B, D * H * W, C * g.volume)


def unfold3d_fm(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """Feature-major unfold: ``(C * K1 * K2 * K3, B * N)``, the transpose of the flattened :func:`unfold3d`."""
    v = _windows(x, g)
    cols = np.ascontiguousarray(v.transpose(1, 5, 6, 7, 0, 2, 3, 4))
    return cols.reshape(x.shape[1] * g.volume, -1)


def _fold(c: np.ndarray, x_shape, g: ConvGeometry) -> np.ndarray:
    # c is indexed [..., a, b, e] -> (B, C, D', H', W')
    B, C, D, H, W = x_shape
    out = g.output_shape((D, H, W))
    K, s, d, p = g.kernel, g.stride, g.dilation, g.padding
    xp = np.zeros((B, C, D + 2 * p[0], H + 2 * p[1], W + 2 * p[2]), dtype=c.dtype)
    for a in range(K[0]):
        for b in range(K[1]):
            for e in range(K[2]):
                xp[:, :,
                   a * d[0]: a * d[0] + s[0] * (out[0] - 1) + 1: s[0],
                   b * d[1]: b * d[1] + s[1] * (out[1] - 1) + 1: s[1],
                   e * d[2]: e * d[2] + s[2] * (out[2] - 1) + 1: s[2]] += c[a, b, e]
    return xp[:, :, p[0]: p[0] + D, p[1]: p[1] + H, p[2]: p[2] + W]


def fold3d(cols: np.ndarray, x_shape, g: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`unfold3d`: scatter-add rows back onto the input grid."""
    B, C, D, H, W = x_shape
    out = g.output_shape((D, H, W))
    c = cols.reshape(B, *out, C, *g.kernel).transpose(5, 6, 7, 0, 4, 1, 2, 3)
    return _fold(c, x_shape, g)


def fold3d_fm(colsT: np.ndarray, x_shape, g: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`unfold3d_fm`."""
    B, C, D, H, W = x_shape
    out = g.output_shape((D, H, W))
    c = colsT.reshape(C, *g.kernel, B, *out).transpose(1, 2, 3, 4, 0, 5, 6, 7)
    return _fold(c, x_shape, g)


def _rows_to_volume(rows: np.ndarray, B: int, out: Triple) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(B, *out, -1).transpose(0, 4, 1, 2, 3))


def _volume_to_rows(y: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(y.transpose(0, 2, 3, 4, 1)).reshape(-1, y.shape[1])


def linear_conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, g: ConvGeometry) -> np.ndarray:
    """Cross-correlation ``y = W * x + b`` through unfold + matmul."""
    co = weight.shape[0]
    if weight.shape[1:] != (x.shape[1],) + g.kernel:
        raise DimensionError(f"weight shape {weight.shape} does not match input channels {x.shape[1]} and kernel {g.kernel}")
    out = g.output_shape(x.shape[2:])
    cols = unfold3d(x, g)
    rows = cols.reshape(-1, cols.shape[-1]) @ weight.reshape(co, -1).T
    if bias is not None:
        rows = rows + bias
    return _rows_to_volume(rows, x.shape[0], out)


def naive_conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, g: ConvGeometry) -> np.ndarray:
    """Direct nested-loop cross-correlation; reference oracle for :func:`linear_conv3d`."""
    B, C = x.shape[:2]
    co = weight.shape[0]
    out = g.output_shape(x.shape[2:])
    (K1, K2, K3), (s1, s2, s3), (p1, p2, p3), (d1, d2, d3) = g.kernel, g.stride, g.padding, g.dilation
    D, H, W = x.shape[2:]
    y = np.zeros((B, co) + out, dtype=np.float64)
    for o in range(co):
        for i in range(out[0]):
            for j in range(out[1]):
                for k in range(out[2]):
                    acc = np.zeros(B)
                    for c in range(C):
                        for a in range(K1):
                            zi = i * s1 - p1 + a * d1
                            if not 0 <= zi < D:
                                continue
                            for b in range(K2):
                                zj = j * s2 - p2 + b * d2
                                if not 0 <= zj < H:
                                    continue
                                for e in range(K3):
                                    zk = k * s3 - p3 + e * d3
                                    if 0 <= zk < W:
                                        acc += weight[o, c, a, b, e] * x[:, c, zi, zj, zk]
                    y[:, o, i, j, k] = acc + (bias[o] if bias is not None else 0.0)
    return y


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, geometry: ConvGeometry,
                 rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.geometry = geometry
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * geometry.volume
        bound = 1.0 / np.sqrt(fan_in)
        self.params = {"weight": rng.uniform(-bound, bound, (out_channels, in_channels) + geometry.kernel)}
        if bias:
            self.params["bias"] = np.zeros(out_channels)
        self.astype(dtype)

    def forward(self, x, train=True):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise DimensionError(f"Conv3d expects (B, {self.in_channels}, D, H, W), got {x.shape}")
        self._x_shape = x.shape
        self._out = self.geometry.output_shape(x.shape[2:])
        cols = unfold3d(x, self.geometry)
        self._rows = cols.reshape(-1, cols.shape[-1])
        w = self.params["weight"].reshape(self.out_channels, -1)
        rows = self._rows @ w.T
        if "bias" in self.params:
            rows += self.params["bias"]
        return _rows_to_volume(rows, x.shape[0], self._out)

    def backward(self, dy):
        dyr = _volume_to_rows(dy)
        w = self.params["weight"]
        self.grads = {"weight": (dyr.T @ self._rows).reshape(w.shape)}
        if "bias" in self.params:
            self.grads["bias"] = dyr.sum(axis=0)
        drows = dyr @ w.reshape(self.out_channels, -1)
        return fold3d(drows, self._x_shape, self.geometry)


class KanConv3d(Module):
    """3D convolution whose kernel is a KANLinear over unfolded receptive fields."""

    def __init__(self, in_channels: int, out_channels: int, geometry: ConvGeometry,
                 rng: np.random.Generator, grid_size: int = 5, spline_order: int = 3,
                 noise_scale: float = 0.1, base_activation: str = "silu", dtype=np.float32, **kan_kwargs):
        super().__init__()
        self.geometry = geometry
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kan = KANLinear(in_channels * geometry.volume, out_channels, grid_size, spline_order,
                             rng=rng, noise_scale=noise_scale, base_activation=base_activation,
                             dtype=dtype, **kan_kwargs)
        self.params = self.kan.params
        self.buffers = self.kan.buffers

    def astype(self, dtype):
        self.kan.astype(dtype)
        return self

    def forward(self, x, train=True):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise DimensionError(f"KanConv3d expects (B, {self.in_channels}, D, H, W), got {x.shape}")
        self._x_shape = x.shape
        out = self.geometry.output_shape(x.shape[2:])
        yT = self.kan.forward_fm(unfold3d_fm(x, self.geometry), train)
        return np.ascontiguousarray(yT.reshape(self.out_channels, x.shape[0], *out).transpose(1, 0, 2, 3, 4))

    def backward(self, dy):
        dyT = np.ascontiguousarray(dy.transpose(1, 0, 2, 3, 4)).reshape(self.out_channels, -1)
        dxT = self.kan.backward_fm(dyT)
        self.grads = self.kan.grads
        return fold3d_fm(dxT, self._x_shape, self.geometry)

    def update_grid(self, x: np.ndarray, cfg: GridUpdateConfig, rng: np.random.Generator,
                    max_rows: int = 4096) -> None:
        """Grid update on the unfolded rows of ``x``, subsampled to ``max_rows``.

        Zero-padded taps make rank-deficient re-fits routine here, so they are
        logged at debug level rather than warned about.
        """
        cols = unfold3d(x, self.geometry)
        rows = cols.reshape(-1, cols.shape[-1])
        if rows.shape[0] > max_rows:
            rows = rows[np.sort(rng.choice(rows.shape[0], size=max_rows, replace=False))]
        self.kan.update_grid(rows, cfg, warn=False)
        if self.kan.last_rank_deficient:
            log.debug("KAN conv re-fit rank-deficient for %d of %d taps",
                      len(self.kan.last_rank_deficient), self.kan.in_features)


def kan_conv3d_parameter_count(in_channels: int, out_channels: int, kernel, grid_size: int, spline_order: int) -> int:
    return out_channels * in_channels * int(np.prod(_triple(kernel))) * (grid_size + spline_order + 2)


def pool_output_shape(spatial, window: Triple, stride: Triple) -> Triple:
    out = []
    for axis, n, w, s in zip(AXES, spatial, window, stride):
        if w > n:
            raise GeometryError(f"pooling window {w} exceeds {axis} extent {n}")
        out.append((n - w) // s + 1)
    return tuple(out)


def avg_pool3d(x: np.ndarray, window=2, stride=None) -> np.ndarray:
    window = _triple(window)
    stride = _triple(stride) if stride is not None else window
    out = pool_output_shape(x.shape[2:], window, stride)
    v = sliding_window_view(x, window, axis=(2, 3, 4))
    v = v[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, : out[0], : out[1], : out[2]]
    return v.mean(axis=(-3, -2, -1)).astype(x.dtype, copy=False)


def avg_pool3d_backward(dy: np.ndarray, x_shape, window=2, stride=None) -> np.ndarray:
    window = _triple(window)
    stride = _triple(stride) if stride is not None else window
    out = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    share = dy / np.prod(window)
    for a in range(window[0]):
        for b in range(window[1]):
            for e in range(window[2]):
                dx[:, :,
                   a: a + stride[0] * (out[0] - 1) + 1: stride[0],
                   b: b + stride[1] * (out[1] - 1) + 1: stride[1],
                   e: e + stride[2] * (out[2] - 1) + 1: stride[2]] += share
    return dx


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3, 4))


def global_avg_pool_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    n = int(np.prod(x_shape[2:]))
    return np.broadcast_to((dy / n)[:, :, None, None, None], x_shape).copy()


class AvgPool3d(Module):
    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = _triple(window)
        self.stride = _triple(stride) if stride is not None else self.window

    def forward(self, x, train=True):
        self._x_shape = x.shape
        return avg_pool3d(x, self.window, self.stride)

    def backward(self, dy):
        return avg_pool3d_backward(dy, self._x_shape, self.window, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x, train=True):
        self._x_shape = x.shape
        return global_avg_pool(x)

    def backward(self, dy):
        return global_avg_pool_backward(dy, self._x_shape)
