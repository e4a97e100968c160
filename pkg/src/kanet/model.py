"""KANet: a 3D DenseNet whose dense layers convolve with KAN kernels.

Layout::

    stem (3^3 conv) -> block 1 -> transition -> block 2 -> ... -> GAP -> head

Stage ``m`` (1-based) grows ``2^(m-1) * k0`` channels per dense layer. Every
block after the first also receives the stem output and the new features of
all earlier blocks, average-pooled down to its resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .conv3d import (
    AXES,
    Conv3d,
    ConvGeometry,
    GlobalAvgPool,
    KanConv3d,
    avg_pool3d,
    avg_pool3d_backward,
    pool_output_shape,
)
from .errors import ConfigError, DimensionError, GeometryError
from .kan_linear import GridUpdateConfig, KANLinear
from .layers import BatchNorm, Linear, Module, SiLUAct
from .tensor import DifferentiableOp, check_finite

POOL = (2, 2, 2)


def growth_rate(stage_index: int, k0: int) -> int:
    if stage_index < 1:
        raise ConfigError(f"stage index starts at 1, got {stage_index}")
    return (2 ** (stage_index - 1)) * k0


@dataclass
class NetworkConfig:
    stages: list[int] = field(default_factory=lambda: [4, 6, 8])
    k0: int = 8
    grid_size: int = 5
    spline_order: int = 3
    epsilon: float = 0.02
    margin: float = 0.01
    patch: tuple[int, int, int] = (11, 11, 16)
    classes: int = 2
    bottleneck_factor: int = 4
    compression: float = 0.5
    head: str = "linear"
    noise_scale: float = 0.1
    shared_grid: bool = False

    def __post_init__(self):
        self.stages = [int(s) for s in self.stages]
        self.patch = tuple(int(p) for p in self.patch)
        if not self.stages or min(self.stages) < 1:
            raise ConfigError("stages must be a non-empty list of positive block counts")
        if self.k0 < 1 or self.classes < 1 or self.grid_size < 1 or self.spline_order < 1:
            raise ConfigError("k0, classes, grid_size and spline_order must be positive")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive extents, got {self.patch}")
        if self.bottleneck_factor < 0:
            raise ConfigError("bottleneck_factor must be non-negative")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError("compression must lie in (0, 1]")
        if self.head not in ("linear", "kan"):
            raise ConfigError("head must be 'linear' or 'kan'")
        GridUpdateConfig(self.epsilon, self.margin)

    @property
    def stem_channels(self) -> int:
        return 2 * self.k0

    @property
    def grid_update(self) -> GridUpdateConfig:
        return GridUpdateConfig(self.epsilon, self.margin)

    def to_dict(self) -> dict:
        """JSON-shaped field values (sequences as lists), so a saved config reloads equal."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


@dataclass
class BlockPlan:
    """Channel and resolution bookkeeping for one dense block."""
    growth: int
    layers: int
    resolution: tuple[int, int, int]
    base_channels: int
    pooled_channels: int

    @property
    def in_channels(self) -> int:
        return self.base_channels + self.pooled_channels

    @property
    def new_channels(self) -> int:
        return self.layers * self.growth

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.new_channels


def plan_network(cfg: NetworkConfig) -> list[BlockPlan]:
    """Trace channel counts and extents through the configured network."""
    res = tuple(cfg.patch)
    plans = []
    earlier_new = 0
    base = cfg.stem_channels
    for m, n_layers in enumerate(cfg.stages, start=1):
        if m > 1:
            base = max(1, int(cfg.compression * plans[-1].out_channels))
            earlier_new += plans[-1].new_channels
            try:
                res = pool_output_shape(res, POOL, POOL)
            except GeometryError:
                axis = next(a for a, n in zip(AXES, res) if n < POOL[0])
                raise ConfigError(
                    f"resolution underflow on the {axis} axis before stage {m}: extent {res} "
                    f"cannot be pooled by {POOL}; use a larger patch or fewer stages") from None
            pooled = cfg.stem_channels + earlier_new
        else:
            pooled = 0
        plans.append(BlockPlan(growth_rate(m, cfg.k0), n_layers, res, base, pooled))
    return plans


class DenseLayer:
    def __init__(self, name: str, in_channels: int, growth: int, cfg: NetworkConfig,
                 rng: np.random.Generator, dtype):
        self.modules: list[tuple[str, Module]] = [(f"{name}.bn", BatchNorm(in_channels, dtype)),
                                                 (f"{name}.act", SiLUAct())]
        width = in_channels
        if cfg.bottleneck_factor > 0:
            width = cfg.bottleneck_factor * growth
            self.modules.append((f"{name}.bottleneck",
                                 Conv3d(in_channels, width, ConvGeometry(1), rng, bias=False, dtype=dtype)))
        self.kan = KanConv3d(width, growth, ConvGeometry(3, padding=1), rng,
                             grid_size=cfg.grid_size, spline_order=cfg.spline_order,
                             noise_scale=cfg.noise_scale, shared_grid=cfg.shared_grid, dtype=dtype)
        self.modules.append((f"{name}.kan", self.kan))
        self.growth = growth

    def forward(self, x, train, grid_update=None):
        for _, mod in self.modules:
            if mod is self.kan and grid_update is not None:
                cfg, rng = grid_update
                mod.update_grid(x, cfg, rng)
            x = mod.forward(x, train)
        return x

    def backward(self, dy):
        for _, mod in reversed(self.modules):
            dy = mod.backward(dy)
        return dy


class DenseBlock:
    def __init__(self, index: int, plan: BlockPlan, cfg: NetworkConfig, rng, dtype):
        self.plan = plan
        self.layers = []
        channels = plan.in_channels
        for i in range(plan.layers):
            self.layers.append(DenseLayer(f"block{index}.layer{i + 1}", channels, plan.growth, cfg, rng, dtype))
            channels += plan.growth
        if channels != plan.out_channels:
            raise AssertionError("dense block channel bookkeeping mismatch")

    @property
    def modules(self):
        return [m for layer in self.layers for m in layer.modules]

    def forward(self, x, train, grid_update=None):
        feats = x
        for layer in self.layers:
            new = layer.forward(feats, train, grid_update)
            feats = np.concatenate([feats, new], axis=1)
        return feats

    def backward(self, d_full):
        d = d_full.copy()
        c = self.plan.out_channels
        for layer in reversed(self.layers):
            c -= layer.growth
            d[:, :c] += layer.backward(np.ascontiguousarray(d[:, c: c + layer.growth]))
        return d[:, : self.plan.in_channels]


class Transition:
    def __init__(self, index: int, in_channels: int, out_channels: int, rng, dtype):
        self.modules = [
            (f"transition{index}.bn", BatchNorm(in_channels, dtype)),
            (f"transition{index}.conv", Conv3d(in_channels, out_channels, ConvGeometry(1), rng, bias=False, dtype=dtype)),
        ]

    def forward(self, x, train):
        for _, mod in self.modules:
            x = mod.forward(x, train)
        self._shape = x.shape
        return avg_pool3d(x, POOL)

    def backward(self, dy):
        dy = avg_pool3d_backward(dy, self._shape, POOL)
        for _, mod in reversed(self.modules):
            dy = mod.backward(dy)
        return dy


class KANet:
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.plans = plan_network(cfg)
        rng = np.random.default_rng(seed)
        # every consumer of the stem output starts with batch norm, so a bias would be inert
        self.stem = Conv3d(1, cfg.stem_channels, ConvGeometry(3, padding=1), rng, bias=False, dtype=dtype)
        self.blocks: list[DenseBlock] = []
        self.transitions: list[Transition] = []
        for m, plan in enumerate(self.plans, start=1):
            if m > 1:
                self.transitions.append(Transition(m - 1, self.plans[m - 2].out_channels, plan.base_channels, rng, dtype))
            self.blocks.append(DenseBlock(m, plan, cfg, rng, dtype))
        self.pool = GlobalAvgPool()
        final = self.plans[-1].out_channels
        if cfg.head == "kan":
            self.head = KANLinear(final, cfg.classes, cfg.grid_size, cfg.spline_order, rng=rng,
                                  noise_scale=cfg.noise_scale, shared_grid=cfg.shared_grid, dtype=dtype)
        else:
            self.head = Linear(final, cfg.classes, rng, dtype=dtype)

    def named_modules(self) -> list[tuple[str, Module]]:
        """Leaf modules in assembly order."""
        out = [("stem", self.stem)]
        for m, block in enumerate(self.blocks):
            if m > 0:
                out += self.transitions[m - 1].modules
            out += block.modules
        out.append(("head", self.head))
        return out

    def kan_layers(self) -> list[tuple[str, Module]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, (KanConv3d, KANLinear))]

    def forward(self, x: np.ndarray, train: bool = True, grid_update=None) -> np.ndarray:
        """Logits for a ``(B, 1, M, N, L)`` batch.

        ``grid_update=(GridUpdateConfig, rng)`` re-grids every KAN layer on the
        activations it sees during this pass, before applying it.
        """
        expected = (1,) + tuple(self.cfg.patch)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise DimensionError(f"model expects (B, {', '.join(map(str, expected))}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        s0 = self.stem.forward(x, train)
        registry = [s0]
        self._levels = []
        full = new = None
        for m, block in enumerate(self.blocks):
            if m > 0:
                t = self.transitions[m - 1].forward(full, train)
                sources = registry + [new]
                registry = [avg_pool3d(e, POOL) for e in sources]
                inp = np.concatenate([t] + registry, axis=1)
                self._levels.append({"source_shapes": [e.shape for e in sources],
                                     "split": [t.shape[1]] + [e.shape[1] for e in registry]})
            else:
                inp = s0
                self._levels.append({"source_shapes": [], "split": [s0.shape[1]]})
            if inp.shape[1] != block.plan.in_channels:
                raise AssertionError(f"block {m + 1} input has {inp.shape[1]} channels, plan says {block.plan.in_channels}")
            full = block.forward(inp, train, grid_update)
            new = full[:, inp.shape[1]:]
        pooled = self.pool.forward(full, train)
        if grid_update is not None and isinstance(self.head, KANLinear):
            self.head.update_grid(pooled.astype(np.float64), grid_update[0])
        return check_finite(self.head.forward(pooled, train), "logits")

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d_full = self.pool.backward(self.head.backward(dlogits.astype(self.dtype, copy=False)))
        last = len(self.blocks) - 1
        d_base = None
        d_registry = None  # gradients of the pooled registry entries feeding the next block
        for m in range(last, -1, -1):
            block = self.blocks[m]
            from_next = []
            if m < last:
                d_full = self.transitions[m].backward(d_base)
                shapes = self._levels[m + 1]["source_shapes"]
                d_sources = [avg_pool3d_backward(d, s, POOL) for d, s in zip(d_registry, shapes)]
                d_full[:, block.plan.in_channels:] += d_sources[-1]
                from_next = d_sources[:-1]
            d_inp = block.backward(d_full)
            parts = np.split(d_inp, np.cumsum(self._levels[m]["split"])[:-1], axis=1)
            if m == 0:
                d_s0 = parts[0] + from_next[0] if from_next else parts[0]
                return self.stem.backward(d_s0)
            d_base = parts[0]
            d_registry = [a + b for a, b in zip(parts[1:], from_next)] if from_next else parts[1:]
        raise AssertionError("unreachable")

    def update_grids(self, x: np.ndarray, cfg: GridUpdateConfig | None = None, seed: int = 0) -> None:
        """Eval-mode pass that re-grids every KAN layer on a calibration batch."""
        cfg = cfg or self.cfg.grid_update
        self.forward(x, train=False, grid_update=(cfg, np.random.default_rng(seed)))

    def zero_grad(self) -> None:
        for _, mod in self.named_modules():
            mod.zero_grad()


def count_parameters(model) -> int:
    if isinstance(model, Module):
        return model.num_parameters()
    return sum(mod.num_parameters() for _, mod in model.named_modules())


def expected_parameter_count(cfg: NetworkConfig) -> int:
    """Closed-form trainable-scalar count for a configuration."""
    per_edge = cfg.grid_size + cfg.spline_order + 2
    stem = cfg.stem_channels
    total = stem * 27
    earlier_new = 0
    out = stem
    for m, n_layers in enumerate(cfg.stages, start=1):
        g = (2 ** (m - 1)) * cfg.k0
        if m == 1:
            c = stem
        else:
            compressed = max(1, int(cfg.compression * out))
            total += 2 * out + out * compressed
            c = compressed + stem + earlier_new
        start = c
        for _ in range(n_layers):
            total += 2 * c  # batch norm
            width = cfg.bottleneck_factor * g if cfg.bottleneck_factor else c
            if cfg.bottleneck_factor:
                total += c * width
            total += g * width * 27 * per_edge
            c += g
        earlier_new += c - start
        out = c
    total += cfg.classes * out * per_edge if cfg.head == "kan" else cfg.classes * (out + 1)
    return total


class ModelOp(DifferentiableOp):
    """Adapter exposing a model's trainable parameters to :func:`grad_check`."""

    def __init__(self, model: KANet, train: bool = True):
        super().__init__()
        self.model = model
        self.train = train
        self.params = {f"{n}.{k}": v for n, mod in model.named_modules() for k, v in mod.params.items()}

    def forward(self, x):
        return self.model.forward(x, self.train)

    def backward(self, dy):
        dx = self.model.backward(dy)
        self.grads = {f"{n}.{k}": g for n, mod in self.model.named_modules() for k, g in mod.grads.items()}
        return dx
