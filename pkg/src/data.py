"""
src/data.py - Dataset Loading, Synthetic Generators, Colour Histograms

Every dataset ends up as an ImageDataset: (N, S, S, 3) float64 in [0, 1],
optional integer labels, and a source tag.

SOURCES:
--------
    cifar       CIFAR binary files. c10 records are 3073 bytes
                (label + 3x1024 channel-planar pixels), c100 records are
                3074 bytes (coarse + fine label; the fine label is kept)
    folder      flat folder of image files, decoded with Pillow and
                bilinearly resized to image_size; undecodable files are skipped
    synthetic   parametric desk-scale images:
                  stripes  oriented sinusoidal stripes, class = orientation
                  blobs    gaussian blobs on a background, class = blob count - 1
                  noise    per-pixel gaussian noise around a configured mean
                  checker  checkerboards, class = square size index
                All kinds draw colours from one shared palette so low-level
                colour statistics stay close across kinds.

USAGE:
------
    from src.data import DatasetSpec, load_dataset, histogram_distance

    ds = load_dataset(DatasetSpec(name='in', source='synthetic', kind='stripes', n=256))
    d = histogram_distance(ds_a, ds_b)
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.augment import resize_bilinear
from src.exceptions import ConfigError, DataError, DataFormatError, ParameterError
from src.notify import notify

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_RECORD = {'c10': 1 + CIFAR_PIXELS, 'c100': 2 + CIFAR_PIXELS}
SYNTH_KINDS = ('stripes', 'blobs', 'noise', 'checker')
SOURCES = ('synthetic', 'cifar', 'folder')
HIST_BINS = 32

PALETTE = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.60, 0.85],
    [0.95, 0.80, 0.25],
    [0.25, 0.70, 0.35],
    [0.60, 0.35, 0.75],
    [0.95, 0.55, 0.20],
    [0.15, 0.15, 0.20],
    [0.90, 0.90, 0.88],
])


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    source: str = ''

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[3] != 3 or self.images.shape[1] != self.images.shape[2]:
            raise DataError(f"{self.source or 'dataset'}: expected (N, S, S, 3) images, got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError(f"{self.source or 'dataset'}: pixel values outside [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DataError(f"{self.source}: {len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def resized(self, size: int) -> 'ImageDataset':
        if size == self.image_size:
            return self
        return ImageDataset(np.stack([resize_bilinear(img, size) for img in self.images]), self.labels, self.source)


# =============================================================================
# CIFAR BINARY
# =============================================================================

def load_cifar_bin(path, variant: str = 'c10', limit: int = None) -> ImageDataset:
    """
    Raises:
        FileNotFoundError: path missing
        DataFormatError: file size is not a whole number of records
        DataError: file holds no records
    """
    if variant not in CIFAR_RECORD:
        raise ConfigError('data.variant', f"expected one of {sorted(CIFAR_RECORD)}, got '{variant}'")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    record = CIFAR_RECORD[variant]
    if raw.size % record:
        raise DataFormatError(f"{path}: truncated {variant} record ({raw.size} bytes, record size {record})",
                              offset=(raw.size // record) * record)
    if raw.size == 0:
        raise DataError(f"{path}: no records")

    records = raw.reshape(-1, record)
    if limit:
        records = records[:limit]
    labels = records[:, record - CIFAR_PIXELS - 1].astype(np.int64)
    pixels = records[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return ImageDataset(pixels / 255.0, labels, source=f"cifar:{path.name}")


def write_cifar_bin(path, ds: ImageDataset, variant: str = 'c10', coarse_labels: Sequence[int] = None) -> Path:
    """Write ds in CIFAR binary layout (32x32 only); pixels are rounded to 8 bits."""
    if variant not in CIFAR_RECORD:
        raise ConfigError('data.variant', f"expected one of {sorted(CIFAR_RECORD)}, got '{variant}'")
    if ds.image_size != 32:
        raise DataError(f"CIFAR records hold 32x32 images, got {ds.image_size}")
    n = len(ds)
    labels = ds.labels if ds.labels is not None else np.zeros(n, dtype=np.int64)
    pixels = np.round(ds.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2).reshape(n, CIFAR_PIXELS)
    columns = [labels.astype(np.uint8)[:, None]]
    if variant == 'c100':
        coarse = np.zeros(n, dtype=np.uint8) if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
        columns.insert(0, coarse[:, None])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.concatenate(columns + [pixels], axis=1).tofile(path)
    return path


# =============================================================================
# IMAGE FOLDER
# =============================================================================

def load_image_folder(path, target_size: int, limit: int = None) -> ImageDataset:
    """Decode every regular file in a flat folder; undecodable files are skipped with a warning."""
    folder = Path(path)
    if not folder.is_dir():
        raise FileNotFoundError(f"Image folder not found: {folder}")

    images = []
    for f in sorted(p for p in folder.iterdir() if p.is_file() and not p.name.startswith('.')):
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert('RGB'), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as e:
            notify(f"Skipping undecodable image {f.name}: {e}", 'warning')
            continue
        if arr.shape[0] != target_size or arr.shape[1] != target_size:
            arr = np.clip(resize_bilinear(arr, target_size, target_size), 0.0, 1.0)
        images.append(arr)
        if limit and len(images) >= limit:
            break

    if not images:
        raise DataError(f"No decodable images in {folder}")
    return ImageDataset(np.stack(images), None, source=f"folder:{folder.name}")


# =============================================================================
# SYNTHETIC
# =============================================================================

def _two_colours(rng: np.random.Generator):
    i, j = rng.choice(len(PALETTE), size=2, replace=False)
    return PALETTE[i], PALETTE[j]


def _stripes(size: int, angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    theta = math.radians(angle_deg)
    # multiples of 90 degrees get exact 0 / +-1 so rotated classes match pixel for pixel
    c, s = round(math.cos(theta), 12), round(math.sin(theta), 12)
    period = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    y, x = np.mgrid[0:size, 0:size] + 0.5 - size / 2.0
    wave = 0.5 + 0.5 * np.sin(2.0 * math.pi * (x * c + y * s) / period + phase)
    fg, bg = _two_colours(rng)
    return wave[..., None] * fg + (1.0 - wave[..., None]) * bg


def _blobs(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    fg, bg = _two_colours(rng)
    y, x = np.mgrid[0:size, 0:size] + 0.5
    mass = np.zeros((size, size))
    for _ in range(count):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        sigma = rng.uniform(0.06, 0.12) * size
        mass = np.maximum(mass, np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma ** 2)))
    return mass[..., None] * fg + (1.0 - mass[..., None]) * bg


def _checker(size: int, square: int, rng: np.random.Generator) -> np.ndarray:
    fg, bg = _two_colours(rng)
    oy, ox = rng.integers(0, square, size=2)
    y, x = np.mgrid[0:size, 0:size]
    cells = (((y + oy) // square) + ((x + ox) // square)) % 2
    return np.where(cells[..., None] == 1, fg, bg)


def synth_dataset(kind: str, n: int, size: int = 32, seed: int = 0,
                  angles: Sequence[float] = (0.0, 45.0), max_blobs: int = 3,
                  squares: Sequence[int] = (4, 8), mean: float = 0.5, std: float = 0.15) -> ImageDataset:
    """
    Pure function of its arguments; class labels are balanced round-robin.

    Raises:
        ParameterError: n < 1 or unknown kind
    """
    if n < 1:
        raise ParameterError(f"synthetic dataset needs n >= 1, got {n}")
    if kind not in SYNTH_KINDS:
        raise ParameterError(f"Unknown synthetic kind '{kind}', expected one of {SYNTH_KINDS}")
    rng = np.random.default_rng([int(seed), SYNTH_KINDS.index(kind)])

    if kind == 'noise':
        images = np.clip(rng.normal(mean, std, size=(n, size, size, 3)), 0.0, 1.0)
        return ImageDataset(images, np.zeros(n, dtype=np.int64), source='synthetic:noise')

    n_classes = {'stripes': len(angles), 'blobs': max_blobs, 'checker': len(squares)}[kind]
    labels = np.arange(n) % n_classes
    images = np.empty((n, size, size, 3))
    for i, label in enumerate(labels):
        if kind == 'stripes':
            images[i] = _stripes(size, angles[label], rng)
        elif kind == 'blobs':
            images[i] = _blobs(size, int(label) + 1, rng)
        else:
            images[i] = _checker(size, int(squares[label]), rng)
    return ImageDataset(np.clip(images, 0.0, 1.0), labels, source=f'synthetic:{kind}')


# =============================================================================
# DISPATCH
# =============================================================================

@dataclass
class DatasetSpec:
    """One dataset entry of the experiment config."""
    name: str = 'in_dist'
    source: str = 'synthetic'
    kind: str = 'stripes'
    n: int = 256
    seed: int = 0
    path: Optional[str] = None
    variant: str = 'c10'
    limit: Optional[int] = None
    angles: List[float] = field(default_factory=lambda: [0.0, 45.0])
    mean: float = 0.5
    std: float = 0.15


def load_dataset(spec: DatasetSpec, image_size: int = 32, root: Path = None) -> ImageDataset:
    """Load or generate a dataset; file paths are resolved against root."""
    if spec.source == 'synthetic':
        return synth_dataset(spec.kind, spec.n, image_size, spec.seed, angles=spec.angles,
                             mean=spec.mean, std=spec.std)
    if not spec.path:
        raise ConfigError(f"data.{spec.name}.path", f"source '{spec.source}' needs a path")
    path = Path(spec.path).expanduser()
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    if spec.source == 'cifar':
        return load_cifar_bin(path, spec.variant, spec.limit).resized(image_size)
    if spec.source == 'folder':
        return load_image_folder(path, image_size, spec.limit)
    raise ConfigError(f"data.{spec.name}.source", f"expected one of {SOURCES}, got '{spec.source}'")


# =============================================================================
# COLOUR HISTOGRAMS
# =============================================================================

def color_histogram(ds, bins: int = HIST_BINS) -> np.ndarray:
    """(3, bins) per-channel histograms over [0, 1], each normalized to sum 1."""
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    images = ds.images if isinstance(ds, ImageDataset) else np.asarray(ds)
    flat = images.reshape(-1, 3)
    hist = np.stack([np.histogram(flat[:, c], bins=bins, range=(0.0, 1.0))[0] for c in range(3)])
    return hist / hist.sum(axis=1, keepdims=True)


def channel_l1(hist_a: np.ndarray, hist_b: np.ndarray) -> np.ndarray:
    """Per-channel L1 distance of two (3, bins) histograms, each in [0, 2]."""
    return np.abs(hist_a - hist_b).sum(axis=1)


def histogram_distance(ds_a, ds_b, bins: int = HIST_BINS) -> float:
    """Mean over channels of the L1 distance between normalized histograms (0 .. 2)."""
    return float(channel_l1(color_histogram(ds_a, bins), color_histogram(ds_b, bins)).mean())
