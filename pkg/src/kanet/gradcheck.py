"""Registry of finite-difference checks, one entry per differentiable layer type.

Each case builds a float64 op and inputs whose shapes depend on the seed, so
running seeds 0, 1, 2 covers three random shapes per layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .conv3d import AvgPool3d, Conv3d, ConvGeometry, GlobalAvgPool, KanConv3d
from .kan_linear import KANLinear
from .layers import BatchNorm, Linear
from .model import KANet, ModelOp, NetworkConfig
from .tensor import MatMul, SiLU, grad_check
from .train import CrossEntropyOp

TOLERANCE = 1e-4
SEEDS = (0, 1, 2)
F64 = np.float64


def _matmul(rng):
    m, k, p = rng.integers(2, 7, size=3)
    return MatMul(), [rng.standard_normal((m, k)), rng.standard_normal((k, p))]


def _silu(rng):
    return SiLU(), [rng.standard_normal((int(rng.integers(20, 101)),)) * 3]


def _batch_norm(rng):
    c = int(rng.integers(2, 5))
    bn = BatchNorm(c, F64)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, c)
    bn.params["beta"] = rng.standard_normal(c)
    return bn, [rng.standard_normal((int(rng.integers(2, 5)), c, 3, 2, 2)) * 2 + 1]


def _linear(rng):
    i, o = rng.integers(2, 7, size=2)
    return Linear(i, o, rng, dtype=F64), [rng.standard_normal((4, i))]


def _kan_linear(rng):
    i, o = rng.integers(2, 7, size=2)
    layer = KANLinear(i, o, rng=rng, dtype=F64)
    layer.params["spline_scaler"] = rng.uniform(0.5, 1.5, (o, i))
    return layer, [rng.uniform(-1.2, 1.2, (5, i))]


def _conv3d(rng):
    g = ConvGeometry(3, stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2)))
    c_in, c_out = rng.integers(1, 3, size=2)
    return Conv3d(c_in, c_out, g, rng, dtype=F64), [rng.standard_normal((1, c_in, 4, 5, 4))]


def _kan_conv3d(rng):
    c_in, c_out = rng.integers(1, 3, size=2)
    layer = KanConv3d(c_in, c_out, ConvGeometry(3, padding=1), rng, dtype=F64)
    return layer, [rng.uniform(-1, 1, (1, c_in, 4, 4, int(rng.integers(3, 5))))]


def _avg_pool(rng):
    return AvgPool3d(2), [rng.standard_normal((2, 2, 4, 4, int(rng.choice([4, 6]))))]


def _global_pool(rng):
    return GlobalAvgPool(), [rng.standard_normal((2, int(rng.integers(1, 4)), 3, 3, 2))]


def _cross_entropy(rng):
    b, k = int(rng.integers(3, 6)), int(rng.integers(2, 6))
    return CrossEntropyOp(rng.integers(1, k + 1, size=b)), [rng.standard_normal((b, k))]


def _kanet(rng):
    cfg = NetworkConfig(stages=[1, 1], k0=2, patch=(7, 7, 8), classes=int(rng.integers(2, 5)))
    model = KANet(cfg, seed=int(rng.integers(1 << 31)), dtype=F64)
    return ModelOp(model), [rng.standard_normal((2, 1, 7, 7, 8))]


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable


CASES = {c.name: c for c in [
    GradCase("matmul", _matmul),
    GradCase("silu", _silu),
    GradCase("batch_norm", _batch_norm),
    GradCase("linear", _linear),
    GradCase("kan_linear", _kan_linear),
    GradCase("conv3d", _conv3d),
    GradCase("kan_conv3d", _kan_conv3d),
    GradCase("avg_pool3d", _avg_pool),
    GradCase("global_avg_pool", _global_pool),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("kanet", _kanet),
]}


@dataclass
class GradResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def check_case(name: str, seed: int) -> GradResult:
    op, inputs = CASES[name].build(np.random.default_rng([seed, len(name)]))
    return GradResult(name, seed, grad_check(op, inputs, seed=seed))


def run_suite(names=None, seeds=SEEDS) -> list[GradResult]:
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown layer {unknown[0]!r}; choose from {', '.join(CASES)}")
    return [check_case(n, s) for n in names for s in seeds]
