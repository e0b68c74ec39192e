"""From a raw hyperspectral cube to model-ready tensors.

Stages: PCA band reduction to 12, disjoint per-class train/test splits,
mirror-padded patch extraction, half-pixel bilinear resize to 32x32,
per-band normalization, and seeded augmentation. A synthetic cube
generator provides a desk-scale stand-in for real sensors.

Everything outside `Augmenter.augment` is RNG-free; augmentation draws
from a counter-based stream keyed by (seed, epoch, patch index), so any
worker layout reproduces the same patches.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Malformed cube/label/split files or degenerate data."""


# ---------------------------------------------------------------------------
# cube container and synthetic generation

@dataclass
class HsiCube:
    reflectance: np.ndarray  # (H, W, B) float32
    labels: np.ndarray       # (H, W) uint16, 0 = unlabeled

    def __post_init__(self):
        if self.reflectance.ndim != 3:
            raise DataError(f"reflectance must be 3-D, got {self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise DataError(
                f"label raster {self.labels.shape} does not match cube "
                f"{self.reflectance.shape[:2]}")
        if not np.isfinite(self.reflectance).all():
            raise DataError("reflectance contains non-finite values")
        present = np.unique(self.labels)
        present = present[present != 0]
        if present.size and not np.array_equal(
                present, np.arange(1, present.size + 1)):
            raise DataError(f"label ids not contiguous 1..K: {present.tolist()}")

    @property
    def shape(self):
        return self.reflectance.shape

    @property
    def n_classes(self) -> int:
        return int(self.labels.max())


def synth_cube(height: int, width: int, bands: int, n_classes: int,
               noise_std: float, seed: int) -> HsiCube:
    """Deterministic synthetic cube: smooth class signatures over a Voronoi
    label raster, plus i.i.d. Gaussian noise."""
    if n_classes < 1 or n_classes > 64:
        raise DataError(f"n_classes must be in [1, 64], got {n_classes}")
    if bands < 12:
        raise DataError(f"bands must be >= 12, got {bands}")
    if n_classes > height * width:
        raise DataError("more classes than pixels")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    t = np.linspace(0.0, 1.0, bands)
    signatures = np.empty((n_classes, bands), dtype=np.float64)
    for k in range(n_classes):
        sig = np.full(bands, 1.0 + 0.5 * rng.random())
        for harmonic in range(1, 5):
            amp = rng.uniform(0.2, 0.6) / harmonic
            phase = rng.uniform(0.0, 2.0 * np.pi)
            sig = sig + amp * np.sin(2.0 * np.pi * harmonic * t + phase)
        signatures[k] = sig

    flat_sites = rng.choice(height * width, size=n_classes, replace=False)
    sites = np.stack([flat_sites // width, flat_sites % width], axis=1)
    rows, cols = np.mgrid[0:height, 0:width]
    d2 = ((rows[..., None] - sites[:, 0]) ** 2
          + (cols[..., None] - sites[:, 1]) ** 2)
    labels = (np.argmin(d2, axis=-1) + 1).astype(np.uint16)

    cube = signatures[labels - 1]
    if noise_std > 0:
        cube = cube + rng.normal(0.0, noise_std, cube.shape)
    return HsiCube(cube.astype(np.float32), labels)


# ---------------------------------------------------------------------------
# PCA band reduction

def pca_reduce(cube: HsiCube, n_components: int = 12):
    """Project onto the top principal bands of the pixel covariance.

    Returns (reduced cube, explained-variance ratios). Eigenvector signs are
    fixed by making each vector's largest-magnitude entry positive, so the
    output is deterministic.
    """
    h, w, b = cube.shape
    if b < n_components:
        raise DataError(f"cube has {b} bands, need at least {n_components}")
    x = cube.reflectance.reshape(-1, b).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    total_var = np.trace(cov)
    if total_var <= 0:
        raise DataError("zero-variance cube; PCA undefined")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    top = eigvecs[:, :n_components]
    flips = np.sign(top[np.abs(top).argmax(axis=0), np.arange(n_components)])
    flips[flips == 0] = 1.0
    top = top * flips
    ratios = eigvals[:n_components] / eigvals.sum()
    projected = (xc @ top).reshape(h, w, n_components).astype(np.float32)
    return HsiCube(projected, cube.labels.copy()), ratios


# ---------------------------------------------------------------------------
# patches

def _reflect_index(i: int, n: int) -> int:
    # mirror about the border pixel itself (no edge duplication)
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


def extract_patch(data: np.ndarray, center, patch_size: int) -> np.ndarray:
    """Window centered on a pixel; out-of-bounds indices mirror-reflect."""
    if patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd, got {patch_size}")
    h, w = data.shape[:2]
    r0, c0 = center
    half = patch_size // 2
    rows = np.array([_reflect_index(r0 + dr, h)
                     for dr in range(-half, half + 1)])
    cols = np.array([_reflect_index(c0 + dc, w)
                     for dc in range(-half, half + 1)])
    return data[np.ix_(rows, cols)]


def resize_bilinear(patch: np.ndarray, out_hw: int = 32) -> np.ndarray:
    """Per-band bilinear resize with half-pixel-center source mapping.

    The source coordinate for output index d is (d + 0.5) * P / out - 0.5,
    clamped into the grid, which makes a same-size resize an exact identity.
    """
    p = patch.shape[0]
    if patch.shape[1] != p:
        raise ValueError(f"patch must be square, got {patch.shape}")
    coords = (np.arange(out_hw, dtype=patch.dtype) + patch.dtype.type(0.5)) \
        * patch.dtype.type(p / out_hw) - patch.dtype.type(0.5)
    coords = np.clip(coords, 0.0, p - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, p - 1)
    frac = coords - lo.astype(patch.dtype)

    rows = patch[lo] * (1 - frac)[:, None, None] + patch[hi] * frac[:, None, None]
    out = (rows[:, lo] * (1 - frac)[None, :, None]
           + rows[:, hi] * frac[None, :, None])
    return out


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    """Per-band affine normalization: x' = (x - offset) / scale."""

    mode: str                 # "standardize" | "minmax"
    offset: np.ndarray        # (bands,)
    scale: np.ndarray         # (bands,)

    def __post_init__(self):
        bad = np.nonzero(self.scale == 0)[0]
        if bad.size:
            raise DataError(
                f"band {bad[0]} has zero spread; cannot normalize "
                f"(mode={self.mode})")


def standardize_stats(train_patches: np.ndarray,
                      mean=None, std=None) -> NormStats:
    """Per-band mean/std from the training patches, or user-supplied vectors."""
    if mean is not None and std is not None:
        return NormStats("standardize", np.asarray(mean, dtype=np.float32),
                         np.asarray(std, dtype=np.float32))
    bands = train_patches.shape[-1]
    flat = train_patches.reshape(-1, bands).astype(np.float64)
    return NormStats("standardize",
                     flat.mean(axis=0).astype(np.float32),
                     flat.std(axis=0).astype(np.float32))


def minmax_stats(cube12: HsiCube) -> NormStats:
    """Per-band min/max over the whole reduced cube."""
    bands = cube12.shape[-1]
    flat = cube12.reflectance.reshape(-1, bands)
    lo = flat.min(axis=0)
    hi = flat.max(axis=0)
    return NormStats("minmax", lo, hi - lo)


def normalize(patch: np.ndarray, stats: NormStats) -> np.ndarray:
    return (patch - stats.offset) / stats.scale


# ---------------------------------------------------------------------------
# splits

@dataclass
class SplitTable:
    """Per-class train/test pixel coordinates; the two sets are disjoint."""

    train: dict = field(default_factory=dict)  # class id -> list[(r, c)]
    test: dict = field(default_factory=dict)

    def class_ids(self):
        return sorted(self.train)

    def flatten(self, which: str):
        """All (row, col, class) triples for 'train' or 'test', class-ordered."""
        table = self.train if which == "train" else self.test
        out = []
        for cls in sorted(table):
            out.extend((r, c, cls) for r, c in table[cls])
        return out


def build_split(cube: HsiCube, per_class_train_counts, seed: int) -> SplitTable:
    """Uniform per-class sampling without replacement for training; every
    remaining labeled pixel of the class goes to test."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    split = SplitTable()
    n_classes = cube.n_classes
    if isinstance(per_class_train_counts, int):
        counts = {cls: per_class_train_counts for cls in range(1, n_classes + 1)}
    else:
        counts = dict(per_class_train_counts)
    for cls in range(1, n_classes + 1):
        coords = np.argwhere(cube.labels == cls)
        want = counts.get(cls)
        if want is None:
            raise DataError(f"no training count given for class {cls}")
        if want > len(coords):
            raise DataError(
                f"class {cls} has {len(coords)} labeled pixels, "
                f"cannot draw {want} for training")
        if want == len(coords):
            warnings.warn(f"class {cls}: test set is empty "
                          f"(all {want} pixels used for training)")
        perm = rng.permutation(len(coords))
        chosen = coords[perm]
        split.train[cls] = [tuple(map(int, rc)) for rc in chosen[:want]]
        split.test[cls] = [tuple(map(int, rc)) for rc in chosen[want:]]
    return split


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    radiation_prob: float = 0.5
    mixture_prob: float = 0.25
    noise_std: float = 1.0 / 25.0
    alpha_range: tuple = (0.9, 1.1)
    mixture_keep: float = 0.75


class Augmenter:
    """Seeded training-time augmentation over normalized patches.

    Events fire independently and in a fixed draw order: horizontal flip,
    vertical flip, radiation noise (x' = alpha x + eps), mixture noise
    (x' = 0.75 x + 0.25 x_other + eps with x_other a same-class patch).
    """

    def __init__(self, pools: dict, config: AugmentConfig | None = None):
        # pools: class id -> (n_patches, hw, hw, bands) array
        self.pools = pools
        self.config = config or AugmentConfig()

    def augment(self, patch: np.ndarray, label: int,
                rng: np.random.Generator, exclude_index=None) -> np.ndarray:
        cfg = self.config
        out = patch
        if rng.random() < cfg.flip_prob:
            out = out[:, ::-1, :]
        if rng.random() < cfg.flip_prob:
            out = out[::-1, :, :]
        if rng.random() < cfg.radiation_prob:
            alpha = rng.uniform(*cfg.alpha_range)
            eps = rng.normal(0.0, cfg.noise_std, out.shape)
            out = (alpha * out + eps).astype(patch.dtype)
        if rng.random() < cfg.mixture_prob:
            pool = self.pools.get(label)
            n = 0 if pool is None else len(pool)
            candidates = [i for i in range(n) if i != exclude_index]
            if candidates:  # fewer than 2 patches in class: skip silently
                other = pool[candidates[rng.integers(len(candidates))]]
                eps = rng.normal(0.0, cfg.noise_std, out.shape)
                out = (cfg.mixture_keep * out
                       + (1.0 - cfg.mixture_keep) * other + eps).astype(patch.dtype)
        return np.ascontiguousarray(out)


_AUGMENT_STREAM = 3  # keeps augmentation apart from the trainer's streams


def patch_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Counter-based stream: one generator per (seed, epoch, patch index)."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed,
                               spawn_key=(_AUGMENT_STREAM, epoch, index)))


# ---------------------------------------------------------------------------
# file formats

CUBE_MAGIC = b"HSIC"
LABEL_MAGIC = b"HSGT"
FILE_VERSION = 1
DTYPE_F32 = 1


def write_cube(path, reflectance: np.ndarray) -> None:
    h, w, b = reflectance.shape
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<IIIIB", FILE_VERSION, h, w, b, DTYPE_F32))
        fh.write(np.ascontiguousarray(reflectance, dtype="<f4").tobytes())


def read_cube(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CUBE_MAGIC:
            raise DataError(f"{path}: bad cube magic {magic!r}")
        version, h, w, b, dtype = struct.unpack("<IIIIB", fh.read(17))
        if version != FILE_VERSION:
            raise DataError(f"{path}: unsupported cube version {version}")
        if dtype != DTYPE_F32:
            raise DataError(f"{path}: unsupported dtype id {dtype}")
        raw = fh.read(4 * h * w * b)
        if len(raw) != 4 * h * w * b:
            raise DataError(f"{path}: truncated cube data")
        data = np.frombuffer(raw, dtype="<f4")
    return data.reshape(h, w, b).copy()


def write_labels(path, labels: np.ndarray) -> None:
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<III", FILE_VERSION, h, w))
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LABEL_MAGIC:
            raise DataError(f"{path}: bad label magic {magic!r}")
        version, h, w = struct.unpack("<III", fh.read(12))
        if version != FILE_VERSION:
            raise DataError(f"{path}: unsupported label version {version}")
        raw = fh.read(2 * h * w)
        if len(raw) != 2 * h * w:
            raise DataError(f"{path}: truncated label data")
        data = np.frombuffer(raw, dtype="<u2")
    return data.reshape(h, w).copy()


def read_hsi(cube_path, label_path) -> HsiCube:
    return HsiCube(read_cube(cube_path), read_labels(label_path))


def write_split(path, split: SplitTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for which in ("train", "test"):
            for r, c, cls in split.flatten(which):
                fh.write(f"{cls} {r} {c} {which}\n")


def read_split(path) -> SplitTable:
    split = SplitTable()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4 or parts[3] not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: bad split line {line!r}")
            cls, r, c = int(parts[0]), int(parts[1]), int(parts[2])
            table = split.train if parts[3] == "train" else split.test
            table.setdefault(cls, []).append((r, c))
    return split
