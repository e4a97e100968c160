"""Desk-scale experiments: parameter scaling of KAN vs MLP fits and a grid-update demo."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kan_linear import GridUpdateConfig, KANLinear, kan_linear_parameter_count
from .layers import Linear, SiLUAct
from .train import Adam

SCALING_GRIDS = (3, 5, 10, 20)


def target_function(x: np.ndarray) -> np.ndarray:
    return np.sin(np.pi * x) + 0.5 * np.sin(2 * np.pi * x)


class MLP:
    """1 -> hidden -> 1 network with a SiLU hidden layer."""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.layers = [Linear(1, hidden, rng, dtype=np.float64), SiLUAct(),
                       Linear(hidden, 1, rng, dtype=np.float64)]

    @staticmethod
    def parameter_count(hidden: int) -> int:
        return 3 * hidden + 1

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self):
        params, grads = {}, {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                params[f"{i}.{k}"] = v
                grads[f"{i}.{k}"] = layer.grads[k]
        return params, grads


class _KanRegressor:
    def __init__(self, grid_size: int, rng):
        self.layer = KANLinear(1, 1, grid_size, 3, rng=rng, dtype=np.float64)

    def forward(self, x):
        return self.layer.forward(x)

    def backward(self, dy):
        return self.layer.backward(dy)

    def named_params(self):
        return dict(self.layer.params), dict(self.layer.grads)


def _fit(model, x, y, steps: int, lr: float, final_lr: float) -> float:
    """Full-batch Adam on mean squared error with exponential learning-rate decay."""
    opt = Adam(lr)
    decay = (final_lr / lr) ** (1.0 / max(1, steps - 1))
    for _ in range(steps):
        err = model.forward(x) - y
        model.backward(2.0 * err / len(x))
        opt.step(*model.named_params())
        opt.lr *= decay
    return float(np.mean((model.forward(x) - y) ** 2))


@dataclass
class ScalingRow:
    family: str
    grid_size: int
    parameters: int
    loss: float


@dataclass
class ScalingResult:
    rows: list[ScalingRow]
    kan_slope: float
    mlp_slope: float

    def family(self, name: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.family == name]


def loglog_slope(n, loss) -> float:
    """Least-squares slope of log(loss) against log(n); NaN with fewer than two points."""
    if len(n) < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(n, float)), np.log(np.asarray(loss, float)), 1)[0])


def scaling_experiment(grid_sizes=SCALING_GRIDS, samples: int = 2048, steps: int = 3000,
                       lr: float = 1e-2, final_lr: float = 1e-4, seed: int = 0) -> ScalingResult:
    """Fit the target with one KANLinear per grid size and a parameter-matched MLP.

    The MLP hidden width is chosen so ``3 h + 1`` is as close as possible to
    the KAN parameter count ``G + k + 2`` (k = 3).
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (samples, 1))
    y = target_function(x)
    rows = []
    for G in grid_sizes:
        n_kan = kan_linear_parameter_count(1, 1, G, 3)
        kan_loss = _fit(_KanRegressor(G, np.random.default_rng([seed, G])), x, y, steps, lr, final_lr)
        rows.append(ScalingRow("kan", G, n_kan, kan_loss))
        hidden = max(1, int(round((n_kan - 1) / 3)))
        mlp_loss = _fit(MLP(hidden, np.random.default_rng([seed, G, 1])), x, y, steps, lr, final_lr)
        rows.append(ScalingRow("mlp", G, MLP.parameter_count(hidden), mlp_loss))
    kan = [r for r in rows if r.family == "kan"]
    mlp = [r for r in rows if r.family == "mlp"]
    return ScalingResult(rows,
                         loglog_slope([r.parameters for r in kan], [r.loss for r in kan]),
                         loglog_slope([r.parameters for r in mlp], [r.loss for r in mlp]))


def write_scaling_csv(path, result: ScalingResult) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "grid_size", "parameters", "loss"])
        for r in result.rows:
            w.writerow([r.family, r.grid_size, r.parameters, f"{r.loss:.6e}"])
        w.writerow(["slope", "kan", "", f"{result.kan_slope:.4f}"])
        w.writerow(["slope", "mlp", "", f"{result.mlp_slope:.4f}"])


# grid demo -----------------------------------------------------------------

def bimodal_sample(n: int = 512, seed: int = 0, centers=(-0.5, 0.5), spread: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.concatenate([rng.normal(centers[0], spread, half), rng.normal(centers[1], spread, n - half)])
    return x.reshape(-1, 1)


@dataclass
class GridDemo:
    before: np.ndarray
    after: np.ndarray
    counts_before: np.ndarray
    counts_after: np.ndarray
    order: int

    def text(self) -> str:
        fmt = lambda v: " ".join(f"{t:+.4f}" for t in v)
        return "\n".join([
            f"knots before: {fmt(self.before)}",
            f"samples per base interval before: {' '.join(map(str, self.counts_before))}",
            f"knots after:  {fmt(self.after)}",
            f"samples per base interval after: {' '.join(map(str, self.counts_after))}",
        ]) + "\n"


def _interval_counts(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    base = knots[order: len(knots) - order]
    counts, _ = np.histogram(x, bins=base)
    return counts


def grid_demo(epsilon: float = 0.02, grid_size: int = 5, samples: int = 512, margin: float = 0.01,
              seed: int = 0) -> GridDemo:
    """Re-grid one KANLinear on a bimodal sample and report the knots."""
    x = bimodal_sample(samples, seed)
    layer = KANLinear(1, 1, grid_size, 3, rng=np.random.default_rng(seed), dtype=np.float64)
    before = layer.buffers["grid"][0].copy()
    layer.update_grid(x, GridUpdateConfig(epsilon, margin))
    after = layer.buffers["grid"][0].copy()
    return GridDemo(before, after, _interval_counts(x, before, 3), _interval_counts(x, after, 3), 3)
