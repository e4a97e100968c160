"""Hyperspectral cubes: storage, padding, patch extraction, splits, metrics.

A cube is an ``(H, W, L)`` reflectance array with an ``(H, W)`` label map
where 0 marks unlabeled background and 1..K are classes. Samples are the
``M x M x L`` neighborhoods of labeled pixels.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, FormatError, GeometryError, PaddingError

PAD_MODES = ("reflect", "zero")


@dataclass
class LabeledCube:
    reflectance: np.ndarray
    labels: np.ndarray
    classes: int | None = None

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance)
        self.labels = np.asarray(self.labels)
        if self.reflectance.ndim != 3:
            raise DimensionError(f"reflectance must be (H, W, L), got shape {self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise DimensionError(f"labels {self.labels.shape} do not match cube {self.reflectance.shape[:2]}")
        if min(self.reflectance.shape) < 1:
            raise DimensionError(f"cube extents must be positive, got {self.reflectance.shape}")
        if not np.all(np.isfinite(self.reflectance)):
            raise DomainError("reflectance contains non-finite values")
        top = int(self.labels.max())
        if self.labels.min() < 0:
            raise DomainError("labels must be non-negative")
        if self.classes is None:
            self.classes = top
        elif top > self.classes:
            raise DomainError(f"label {top} exceeds the declared class count {self.classes}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.reflectance.shape

    @property
    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.labels))


def pad_cube(cube: LabeledCube, pad: int, mode: str = "reflect") -> LabeledCube:
    """Pad both spatial axes by ``pad`` per side; labels are padded with 0."""
    if pad < 0:
        raise PaddingError(f"pad must be non-negative, got {pad}")
    if mode not in PAD_MODES:
        raise PaddingError(f"padding mode must be one of {PAD_MODES}, got {mode!r}")
    H, W, _ = cube.shape
    if pad >= min(H, W):
        raise PaddingError(f"pad {pad} must be smaller than the spatial extents {H}x{W}")
    if pad == 0:
        return LabeledCube(cube.reflectance.copy(), cube.labels.copy(), cube.classes)
    widths = ((pad, pad), (pad, pad), (0, 0))
    refl = np.pad(cube.reflectance, widths, mode="reflect" if mode == "reflect" else "constant")
    labels = np.pad(cube.labels, widths[:2])
    return LabeledCube(refl, labels, cube.classes)


class PatchSet:
    """Neighborhoods of labeled pixels, materialized on demand.

    Holds the padded cube and the ``(row, col)`` provenance of each sample
    in row-major order. ``take(idx)`` returns ``(len(idx), M, M, L)``.
    """

    def __init__(self, padded: np.ndarray, size: int, provenance: np.ndarray, labels: np.ndarray):
        self.padded = padded
        self.size = size
        self.provenance = provenance
        self.labels = labels
        self._windows = sliding_window_view(padded, (size, size), axis=(0, 1))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def bands(self) -> int:
        return self.padded.shape[2]

    def take(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        r, c = self.provenance[idx, 0], self.provenance[idx, 1]
        # window view is (H, W, L, M, M); reorder to (n, M, M, L)
        return np.ascontiguousarray(self._windows[r, c].transpose(0, 2, 3, 1))

    @property
    def patches(self) -> np.ndarray:
        return self.take(np.arange(len(self)))


def extract_patches(cube: LabeledCube, size: int, mode: str = "reflect") -> PatchSet:
    """One ``size x size x L`` patch per labeled pixel, centered on it."""
    if size < 1 or size % 2 == 0:
        raise GeometryError(f"patch size must be a positive odd integer, got {size}")
    padded = pad_cube(cube, (size - 1) // 2, mode)
    rows, cols = np.nonzero(cube.labels)
    provenance = np.stack([rows, cols], axis=1).astype(np.int64)
    labels = cube.labels[rows, cols].astype(np.int64)
    return PatchSet(padded.reflectance, size, provenance, labels)


def parse_ratios(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    try:
        ratios = tuple(int(p) for p in parts)
    except ValueError:
        raise DomainError(f"split must look like a:b:c with integers, got {text!r}") from None
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) == 0:
        raise DomainError(f"split needs three non-negative integers with a positive sum, got {text!r}")
    return ratios


def stratified_split(labels: np.ndarray, ratios, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class seeded shuffle; floor shares go to train and val, the rest to test.

    A class too small to give every non-empty part a sample is dealt out one
    at a time in train, val, test order instead, with a warning.
    """
    ratios = tuple(int(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) == 0:
        raise DomainError(f"ratios must be three non-negative integers with a positive sum, got {ratios}")
    labels = np.asarray(labels)
    total = sum(ratios)
    active = [i for i, r in enumerate(ratios) if r > 0]
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        if n < len(active):
            warnings.warn(f"class {int(c)} has {n} samples for {len(active)} split parts; "
                          "assigning in train, val, test order", RuntimeWarning, stacklevel=2)
            for j, part in enumerate(active[:n]):
                parts[part].append(idx[j:j + 1])
            continue
        n_train = n * ratios[0] // total
        n_val = n * ratios[1] // total
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts)


@dataclass
class Metrics:
    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray  # recall per class, NaN where the class is absent from truth


def confusion_matrix(truth, pred, classes: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise DimensionError(f"truth and prediction lengths differ: {truth.shape} vs {pred.shape}")
    for name, v in (("truth", truth), ("prediction", pred)):
        if v.size and (v.min() < 1 or v.max() > classes):
            raise DomainError(f"{name} values must lie in 1..{classes}")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise DomainError("metrics need at least one sample")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    p_o = np.trace(cm) / total
    present = rows > 0
    per_class = np.full(len(cm), np.nan)
    per_class[present] = np.diag(cm)[present] / rows[present]
    # kappa = (p_o - p_e) / (1 - p_e) scaled by total^2, in exact integers
    n = int(total)
    chance = sum(int(r) * int(c) for r, c in zip(rows, cols))
    agree = n * int(np.trace(cm))
    # chance == n^2 means a single class on both sides, which forces p_o == 1
    kappa = 1.0 if chance == n * n else (agree - chance) / (n * n - chance)
    # fsum is correctly rounded, so AA does not depend on class order
    aa = math.fsum(per_class[present]) / int(present.sum())
    return Metrics(cm, float(p_o), aa, float(kappa), per_class)


def compute_metrics(truth, pred, classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(truth, pred, classes))


def band_statistics(reflectance: np.ndarray, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and standard deviation over the given ``(row, col)`` pixels."""
    spectra = reflectance[pixels[:, 0], pixels[:, 1]].astype(np.float64)
    mean = spectra.mean(axis=0)
    std = spectra.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def standardize(cube: LabeledCube, mean: np.ndarray, std: np.ndarray) -> LabeledCube:
    if mean.shape != (cube.shape[2],) or std.shape != (cube.shape[2],):
        raise DimensionError(f"statistics for {mean.shape[0]} bands applied to a {cube.shape[2]}-band cube")
    refl = ((cube.reflectance - mean) / std).astype(np.float32)
    return LabeledCube(refl, cube.labels, cube.classes)


def synth_cube(classes: int = 5, height: int = 32, width: int = 32, bands: int = 16,
               blob_count: int = 3, noise_sigma: float = 0.05, seed: int = 0,
               labeled_fraction: float = 0.7) -> LabeledCube:
    """Synthetic cube with rectangular class regions and smooth class spectra.

    Each class signature is a seeded sum of Gaussian bumps over the band
    index. ``blob_count`` rectangles per class are painted in seeded order,
    sized so their union covers about ``labeled_fraction`` of the scene.
    """
    if classes < 2:
        raise DomainError("synth_cube needs at least 2 classes")
    if min(height, width, bands, blob_count) < 1 or noise_sigma < 0:
        raise DomainError("synth_cube extents and blob count must be positive, noise non-negative")
    rng = np.random.default_rng(seed)
    band = np.arange(bands, dtype=np.float64)

    def signature():
        s = np.full(bands, 0.1)
        for _ in range(3):
            center = rng.uniform(0, bands)
            width_ = rng.uniform(bands / 10, bands / 4)
            s += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((band - center) / width_) ** 2)
        return s

    signatures = np.stack([signature() for _ in range(classes + 1)])  # row 0 is background
    n_blobs = classes * blob_count
    area = 1.0 - (1.0 - labeled_fraction) ** (1.0 / n_blobs)
    labels = np.zeros((height, width), dtype=np.int64)
    for b in range(n_blobs):
        cls = b % classes + 1
        aspect = rng.uniform(0.6, 1.6)
        h = max(1, int(round(np.sqrt(area * aspect) * height)))
        w = max(1, int(round(np.sqrt(area / aspect) * width)))
        r0 = rng.integers(0, max(1, height - h + 1))
        c0 = rng.integers(0, max(1, width - w + 1))
        labels[r0:r0 + h, c0:c0 + w] = cls
    refl = signatures[labels] + noise_sigma * rng.standard_normal((height, width, bands))
    return LabeledCube(refl.astype(np.float32), labels, classes)


# HSC1 container ------------------------------------------------------------

MAGIC = b"HSC1"
VERSION = 1
_HEADER = struct.Struct("<4s5I")
MAX_ELEMENTS = 1 << 36


def encode_cube(cube: LabeledCube) -> bytes:
    H, W, L = cube.shape
    if cube.labels.max() > 0xFFFF:
        raise DomainError("labels must fit in 16 bits")
    header = _HEADER.pack(MAGIC, VERSION, H, W, L, int(cube.classes))
    data = np.ascontiguousarray(cube.reflectance, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(cube.labels, dtype="<u2").tobytes()
    return header + data + labels


def decode_cube(buf: bytes) -> LabeledCube:
    n = len(buf)
    if n < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {n}", n)
    magic, version, H, W, L, K = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    for offset, name, value in ((8, "H", H), (12, "W", W), (16, "L", L)):
        if value == 0:
            raise FormatError(f"{name} must be positive", offset)
    if H * W * L > MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: {H}x{W}x{L} exceeds {MAX_ELEMENTS} values", 8)
    data_end = _HEADER.size + 4 * H * W * L
    expected = data_end + 2 * H * W
    if n < expected:
        raise FormatError(f"truncated file: expected {expected} bytes, got {n}", n)
    if n > expected:
        raise FormatError(f"{n - expected} trailing bytes after the label map", expected)
    refl = np.frombuffer(buf, dtype="<f4", count=H * W * L, offset=_HEADER.size).reshape(H, W, L)
    labels = np.frombuffer(buf, dtype="<u2", count=H * W, offset=data_end).reshape(H, W)
    bad = np.flatnonzero(~np.isfinite(refl.reshape(-1)))
    if bad.size:
        raise FormatError("non-finite reflectance value", _HEADER.size + 4 * int(bad[0]))
    over = np.flatnonzero(labels.reshape(-1) > K)
    if over.size:
        raise FormatError(f"label exceeds class count {K}", data_end + 2 * int(over[0]))
    return LabeledCube(refl.astype(np.float32), labels.astype(np.int64), K)


def write_cube(path, cube: LabeledCube) -> None:
    Path(path).write_bytes(encode_cube(cube))


def read_cube(path) -> LabeledCube:
    return decode_cube(Path(path).read_bytes())


def write_pgm(path, raster: np.ndarray) -> None:
    """Binary graymap (P5) with the class index as pixel value."""
    raster = np.asarray(raster)
    maxval = max(1, int(raster.max()))
    dtype = np.uint8 if maxval < 256 else ">u2"
    header = f"P5\n{raster.shape[1]} {raster.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raster.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields = buf.split(maxsplit=4)
    if len(fields) < 5 or fields[0] != b"P5":
        raise FormatError("not a binary graymap", 0)
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = fields[4]
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(pixels, dtype=dtype, count=width * height).reshape(height, width).astype(np.int64)
