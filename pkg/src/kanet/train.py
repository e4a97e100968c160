"""Optimizer, loss, training loop and evaluation for patch classification."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .errors import ConfigError, DimensionError, DomainError, NonFiniteError
from .hsi import (
    LabeledCube,
    Metrics,
    PatchSet,
    band_statistics,
    compute_metrics,
    extract_patches,
    standardize,
    stratified_split,
    write_pgm,
)
from .model import KANet, NetworkConfig, count_parameters
from .tensor import DifferentiableOp, resolve_dtype

log = logging.getLogger("kanet")


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grid_update_every: int = 1
    calibration_size: int = 64
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam needs beta1, beta2 in [0, 1) and adam_eps > 0")
        if self.grid_update_every < 0 or self.calibration_size < 1:
            raise ConfigError("grid_update_every must be >= 0 and calibration_size >= 1")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def grid_update_epochs(self) -> int:
        """Grid updates are allowed during the first quarter of training."""
        return math.ceil(self.epochs / 4)

    def grid_update_due(self, epoch: int) -> bool:
        every = self.grid_update_every
        return every > 0 and epoch <= self.grid_update_epochs and epoch % every == 0


# loss ----------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of 1-based ``targets``; returns ``(loss, dlogits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, K) logits and B targets, got {logits.shape} and {targets.shape}")
    K = logits.shape[1]
    if targets.size and (targets.min() < 1 or targets.max() > K):
        raise DomainError(f"targets must lie in 1..{K}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(len(targets))
    loss = -float(np.mean(log_p[rows, targets - 1]))
    grad = np.exp(log_p)
    grad[rows, targets - 1] -= 1.0
    grad /= len(targets)
    return loss, grad.astype(logits.dtype)


class CrossEntropyOp(DifferentiableOp):
    """Loss as a one-output op so :func:`grad_check` can probe it."""

    def __init__(self, targets):
        super().__init__()
        self.targets = np.asarray(targets)

    def forward(self, logits):
        loss, self._grad = cross_entropy(logits, self.targets)
        return np.array([loss])

    def backward(self, dy):
        return dy[0] * self._grad


# optimizer -----------------------------------------------------------------

class Adam:
    """Adam with bias correction; moments and step counts are kept per parameter path."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, list] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update every array in ``params`` in place."""
        for path, p in params.items():
            g = grads[path]
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {path}")
            st = self.state.get(path)
            if st is None or st[0].shape != p.shape:
                st = self.state[path] = [np.zeros_like(p), np.zeros_like(p), 0]
            m, v = st[0], st[1]
            st[2] += 1
            t = st[2]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def reset(self, suffix: str) -> None:
        """Forget moments of every parameter whose path ends with ``suffix``."""
        for path in [p for p in self.state if p.endswith(suffix)]:
            del self.state[path]


def model_parameters(model: KANet) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params, grads = {}, {}
    for name, mod in model.named_modules():
        for key, value in mod.params.items():
            params[f"{name}.{key}"] = value
            grads[f"{name}.{key}"] = mod.grads[key]
    return params, grads


# data ----------------------------------------------------------------------

@dataclass
class PreparedData:
    patches: PatchSet
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    classes: int


def prepare_data(cube: LabeledCube, patch: int, ratios, seed: int, pad_mode: str = "reflect") -> PreparedData:
    """Split labeled pixels, standardize bands on the training split, then extract patches."""
    rows, cols = np.nonzero(cube.labels)
    labels = cube.labels[rows, cols]
    train, val, test = stratified_split(labels, ratios, seed)
    if len(train) == 0:
        raise DomainError("the training split is empty")
    pixels = np.stack([rows, cols], axis=1)
    mean, std = band_statistics(cube.reflectance, pixels[train])
    ps = extract_patches(standardize(cube, mean, std), patch, pad_mode)
    return PreparedData(ps, train, val, test, mean, std, int(cube.classes))


def batch_input(ps: PatchSet, idx, dtype) -> np.ndarray:
    return ps.take(idx)[:, None].astype(dtype, copy=False)


def predict_logits(model: KANet, ps: PatchSet, idx, batch_size: int = 64) -> np.ndarray:
    idx = np.asarray(idx)
    out = [model.forward(batch_input(ps, idx[i:i + batch_size], model.dtype), train=False)
           for i in range(0, len(idx), batch_size)]
    return np.concatenate(out) if out else np.empty((0, model.cfg.classes))


# training ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_time: float


@dataclass
class RunReport:
    records: list[EpochRecord]
    metrics: Metrics
    parameter_count: int
    best_epoch: int
    checkpoint: ckpt_io.Checkpoint
    test_size: int
    grid_updates: list[int] = field(default_factory=list)

    def text(self) -> str:
        """Deterministic key: value summary with a per-class table (no timings)."""
        m = self.metrics
        lines = [
            f"parameters: {self.parameter_count}",
            f"epochs: {len(self.records)}",
            f"best_epoch: {self.best_epoch}",
            f"grid_updates: {' '.join(map(str, self.grid_updates)) or 'none'}",
            f"test_samples: {self.test_size}",
            f"oa: {m.oa:.6f}",
            f"aa: {m.aa:.6f}",
            f"kappa: {m.kappa:.6f}",
            "",
            "class  samples  accuracy",
        ]
        for k, (n, acc) in enumerate(zip(m.confusion.sum(axis=1), m.per_class), start=1):
            lines.append(f"{k:>5}  {n:>7}  {'n/a' if np.isnan(acc) else f'{acc:.6f}'}")
        return "\n".join(lines) + "\n"


def _run_config(net: NetworkConfig, cfg: TrainConfig, patch: int, ratios, pad_mode: str) -> dict:
    return {"network": net.to_dict(), "train": asdict(cfg),
            "data": {"patch": patch, "ratios": list(ratios), "pad_mode": pad_mode}}


def train(cube: LabeledCube, patch: int, ratios, cfg: TrainConfig, network: dict | None = None,
          out_dir=None, pad_mode: str = "reflect") -> RunReport:
    """Train a KANet on the labeled pixels of ``cube`` and keep the best-validation weights.

    Deterministic for a given cube, configuration and ``cfg.seed``. When
    ``out_dir`` is given it receives ``best.kanc``, ``epochs.csv``,
    ``report.txt`` and ``timings.csv`` (wall-clock seconds per epoch).
    """
    data = prepare_data(cube, patch, ratios, cfg.seed, pad_mode)
    overrides = dict(network or {})
    for key in ("patch", "classes"):
        if key in overrides:
            raise ConfigError(f"{key} is derived from the cube and --patch; remove it from the config")
    net = NetworkConfig(**overrides, patch=(patch, patch, cube.shape[2]), classes=data.classes)
    dtype = resolve_dtype(cfg.precision)
    model = KANet(net, seed=cfg.seed, dtype=dtype)
    opt = Adam.from_config(cfg)
    shuffle_seq, calib_seq, grid_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    calib_rng = np.random.default_rng(calib_seq)
    calib_idx = np.sort(calib_rng.choice(data.train, size=min(cfg.calibration_size, len(data.train)), replace=False))
    calib = batch_input(data.patches, calib_idx, dtype)
    labels = data.patches.labels
    run_config = _run_config(net, cfg, patch, ratios, pad_mode)

    records: list[EpochRecord] = []
    grid_updates: list[int] = []
    best = (-1.0, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = data.train[shuffle_rng.permutation(len(data.train))]
        loss_sum = correct = 0.0
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            logits = model.forward(batch_input(data.patches, idx, dtype), train=True)
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
            model.backward(dlogits)
            opt.step(*model_parameters(model))
            loss_sum += loss * len(idx)
            correct += np.sum(np.argmax(logits, axis=1) + 1 == labels[idx])
        if cfg.grid_update_due(epoch):
            model.update_grids(calib, net.grid_update, seed=int(grid_seq.generate_state(1)[0]) + epoch)
            opt.reset(".spline_weight")
            grid_updates.append(epoch)
        if len(data.val):
            v_logits = predict_logits(model, data.patches, data.val)
            val_loss, _ = cross_entropy(v_logits, labels[data.val])
            val_acc = float(np.mean(np.argmax(v_logits, axis=1) + 1 == labels[data.val]))
        else:
            val_loss, val_acc = float("nan"), float("nan")
        rec = EpochRecord(epoch, loss_sum / len(order), float(correct) / len(order), float(val_loss), val_acc,
                          time.perf_counter() - start)
        records.append(rec)
        log.info("epoch %d  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  (%.1fs)", epoch,
                 rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.wall_time)
        # without a validation split the latest epoch is kept
        score = val_acc if len(data.val) else float(epoch)
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in ckpt_io.model_tensors(model).items()})

    _, best_epoch, tensors = best
    ckpt_io.load_tensors(model, tensors)
    checkpoint = ckpt_io.Checkpoint(run_config, data.mean, data.std, tensors)
    if len(data.test):
        pred = np.argmax(predict_logits(model, data.patches, data.test), axis=1) + 1
        metrics = compute_metrics(labels[data.test], pred, data.classes)
    else:
        raise DomainError("the test split is empty; adjust the split ratios")
    report = RunReport(records, metrics, count_parameters(model), best_epoch, checkpoint, len(data.test), grid_updates)
    if out_dir is not None:
        write_run(Path(out_dir), report)
    return report


def write_run(out: Path, report: RunReport) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(out / "best.kanc", report.checkpoint)
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in report.records:
            w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.train_acc:.6f}", f"{r.val_loss:.8f}", f"{r.val_acc:.6f}"])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_seconds"])
        for r in report.records:
            w.writerow([r.epoch, f"{r.wall_time:.3f}"])
    (out / "report.txt").write_text(report.text())


# evaluation ----------------------------------------------------------------

@dataclass
class Evaluation:
    metrics: Metrics
    raster: np.ndarray
    splits: dict[str, Metrics]


def evaluate(checkpoint: ckpt_io.Checkpoint, cube: LabeledCube, raster_path=None) -> Evaluation:
    """Eval-mode inference over every labeled pixel of ``cube``.

    Also reports metrics on each stored split (train/val/test) recomputed
    from the checkpoint's ratios and seed. The raster holds the predicted
    class at labeled pixels and 0 elsewhere.
    """
    net = checkpoint.network
    data_cfg = checkpoint.config["data"]
    if tuple(net.patch[2:]) != (cube.shape[2],):
        raise DimensionError(f"checkpoint expects {net.patch[2]} bands, cube has {cube.shape[2]}")
    if cube.classes > net.classes:
        raise DimensionError(f"cube has {cube.classes} classes, checkpoint was trained for {net.classes}")
    model = ckpt_io.restore_model(checkpoint)
    ps = extract_patches(standardize(cube, checkpoint.mean, checkpoint.std), data_cfg["patch"], data_cfg["pad_mode"])
    pred = np.argmax(predict_logits(model, ps, np.arange(len(ps))), axis=1) + 1
    raster = np.zeros(cube.labels.shape, dtype=np.int64)
    raster[ps.provenance[:, 0], ps.provenance[:, 1]] = pred
    metrics = compute_metrics(ps.labels, pred, net.classes)
    seed = checkpoint.config["train"]["seed"]
    splits = {}
    for name, idx in zip(("train", "val", "test"), stratified_split(ps.labels, data_cfg["ratios"], seed)):
        if len(idx):
            splits[name] = compute_metrics(ps.labels[idx], pred[idx], net.classes)
    if raster_path is not None:
        write_pgm(raster_path, raster)
    return Evaluation(metrics, raster, splits)
