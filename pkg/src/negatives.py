"""
src/negatives.py - Shifting Transformations and Negative View Sampling

A negative sample is an image whose high-level semantics were shifted by a
transformation R while its low-level statistics stay close to the
in-distribution. The shift is applied first; the ordinary view pipeline
(src/augment.py) runs afterwards:

    negative = T(R(x)),   x from the in-distribution or an auxiliary set

VARIANTS:
---------
    identity          no shift (plain auxiliary images as negatives)
    rot90             k * 90 deg, k ~ U({1, 2, 3})
    rot360            k * 90 deg, k ~ U({0, 1, 2, 3})
    perm_patch        grid_n x grid_n tiles shuffled (grid_n=2 -> Perm-4, 4 -> Perm-16)
    pix_perm          every pixel position shuffled, channels move together
    sharpen           x + alpha (x - blur(x)), alpha = 1, clamped
    translate         integer shift up to max_frac * side, zero fill
    gauss_blur        strong Gaussian blur, sigma ~ U[1, 2]

A shift may be a chain of variants applied left to right (e.g.
["rot90", "sharpen", "translate"]).

SOURCES:
--------
    in_dist     shift the training sample itself
    auxiliary   shift a random auxiliary image
    combined    both, each with its own loss weight (0.5 / 0.5 by default)
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.augment import MultiCropConfig, ViewSet, gaussian_blur, make_views, resize_bilinear
from src.exceptions import ConfigError, DimensionError, ParameterError


VARIANTS = ('identity', 'rot90', 'rot360', 'perm_patch', 'pix_perm', 'sharpen', 'translate', 'gauss_blur')
SOURCES = ('in_dist', 'auxiliary', 'combined')

SHARPEN_ALPHA = 1.0
SHARPEN_SIGMA = 1.0
SHIFT_BLUR_RANGE = (1.0, 2.0)


@dataclass
class ShiftTransform:
    """One shifting transformation R."""
    variant: str = 'rot90'
    grid_n: int = 2
    max_frac: float = 0.25

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"Unknown shift variant '{self.variant}', expected one of {VARIANTS}")
        if self.grid_n < 1:
            raise ParameterError(f"grid_n must be >= 1, got {self.grid_n}")
        if not 0.0 <= self.max_frac < 1.0:
            raise ParameterError(f"max_frac must be in [0, 1), got {self.max_frac}")


@dataclass
class NegativeSource:
    """Where negatives come from. Loss weights per member live in LossConfig."""
    kind: str = 'auxiliary'

    def __post_init__(self):
        if self.kind not in SOURCES:
            raise ParameterError(f"Unknown negative source '{self.kind}', expected one of {SOURCES}")

    @property
    def members(self) -> Tuple[str, ...]:
        return ('in_dist', 'auxiliary') if self.kind == 'combined' else (self.kind,)


# =============================================================================
# SHIFTS
# =============================================================================

def rotate90(img: np.ndarray, k: int) -> np.ndarray:
    """Lossless clockwise rotation by k * 90 degrees (index permutation only)."""
    if img.shape[0] != img.shape[1]:
        raise DimensionError(f"rotate90 needs a square image, got {img.shape[:2]}")
    return np.rot90(img, k=-int(k), axes=(0, 1)).copy()


def perm_patches(img: np.ndarray, grid_n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Rearrange grid_n x grid_n equal tiles by a uniform permutation.

    The identity permutation is redrawn once, then accepted. Sides not
    divisible by grid_n are edge-padded, shuffled, and cropped back.
    """
    if grid_n == 1:
        return img.copy()
    height, width = img.shape[:2]
    pad_h = (-height) % grid_n
    pad_w = (-width) % grid_n
    work = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode='edge') if (pad_h or pad_w) else img
    th, tw = work.shape[0] // grid_n, work.shape[1] // grid_n

    n_tiles = grid_n * grid_n
    perm = rng.permutation(n_tiles)
    if np.array_equal(perm, np.arange(n_tiles)):
        perm = rng.permutation(n_tiles)

    tiles = work.reshape(grid_n, th, grid_n, tw, 3).transpose(0, 2, 1, 3, 4).reshape(n_tiles, th, tw, 3)
    shuffled = tiles[perm].reshape(grid_n, grid_n, th, tw, 3).transpose(0, 2, 1, 3, 4)
    out = shuffled.reshape(work.shape)
    return out[:height, :width].copy()


def pix_perm(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    height, width = img.shape[:2]
    flat = img.reshape(height * width, 3)
    return flat[rng.permutation(height * width)].reshape(img.shape)


def sharpen(img: np.ndarray, alpha: float = SHARPEN_ALPHA) -> np.ndarray:
    return np.clip(img + alpha * (img - gaussian_blur(img, SHARPEN_SIGMA)), 0.0, 1.0)


def sample_translation(side: int, max_frac: float, rng: np.random.Generator) -> Tuple[int, int]:
    limit = int(np.floor(max_frac * side))
    if limit == 0:
        return 0, 0
    dy, dx = rng.integers(-limit, limit + 1, size=2)
    return int(dy), int(dx)


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y + dy, x + dx] = img[y, x]; uncovered pixels are zero."""
    height, width = img.shape[:2]
    out = np.zeros_like(img)
    if abs(dy) >= height or abs(dx) >= width:
        return out
    src_y = slice(max(0, -dy), height - max(0, dy))
    src_x = slice(max(0, -dx), width - max(0, dx))
    dst_y = slice(max(0, dy), height - max(0, -dy))
    dst_x = slice(max(0, dx), width - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def translate(img: np.ndarray, max_frac: float, rng: np.random.Generator) -> np.ndarray:
    dy, dx = sample_translation(min(img.shape[:2]), max_frac, rng)
    return shift_image(img, dy, dx)


def apply_shift(img: np.ndarray, shift: Union[ShiftTransform, Sequence[ShiftTransform]],
                rng: np.random.Generator) -> np.ndarray:
    """Apply one shift or a chain of shifts, left to right."""
    if not isinstance(shift, ShiftTransform):
        out = img
        for s in shift:
            out = apply_shift(out, s, rng)
        return out

    v = shift.variant
    if v == 'identity':
        return img.copy()
    if v == 'rot90':
        return rotate90(img, int(rng.integers(1, 4)))
    if v == 'rot360':
        return rotate90(img, int(rng.integers(0, 4)))
    if v == 'perm_patch':
        return perm_patches(img, shift.grid_n, rng)
    if v == 'pix_perm':
        return pix_perm(img, rng)
    if v == 'sharpen':
        return sharpen(img)
    if v == 'translate':
        return translate(img, shift.max_frac, rng)
    return np.clip(gaussian_blur(img, float(rng.uniform(*SHIFT_BLUR_RANGE))), 0.0, 1.0)


# =============================================================================
# NEGATIVE VIEWS
# =============================================================================

def sample_negative_views(batch: Sequence[np.ndarray], source: NegativeSource,
                          shift: Union[ShiftTransform, Sequence[ShiftTransform]],
                          cfgs: MultiCropConfig, rngs: Sequence[np.random.Generator],
                          auxiliary: Optional[np.ndarray] = None,
                          n_global: int = 1, n_local: int = None) -> Dict[str, List[ViewSet]]:
    """
    Negative views for every sample of a batch.

    Args:
        batch: In-distribution images of the batch (each H x W x 3)
        source: NegativeSource; 'combined' draws from both sources independently
        shift: Shifting transform(s) applied before the view pipeline
        cfgs: View families (negatives use 1 global + n_local locals)
        rngs: One Generator per sample (per-sample seeding)
        auxiliary: (N_aux, h, w, 3) auxiliary images for auxiliary/combined

    Returns:
        {source_member: [ViewSet per sample]}

    Raises:
        ConfigError: auxiliary source requested with no auxiliary images
    """
    if len(rngs) != len(batch):
        raise ParameterError(f"Need one rng per sample, got {len(rngs)} for {len(batch)} samples")
    if 'auxiliary' in source.members and (auxiliary is None or len(auxiliary) == 0):
        raise ConfigError('data.auxiliary', "negative source needs a non-empty auxiliary dataset")

    out = {member: [] for member in source.members}
    for img, rng in zip(batch, rngs):
        for member in source.members:
            if member == 'in_dist':
                base = img
            else:
                base = auxiliary[int(rng.integers(0, len(auxiliary)))]
                if base.shape[:2] != img.shape[:2]:
                    base = resize_bilinear(base, img.shape[0], img.shape[1])
            shifted = apply_shift(base, shift, rng)
            out[member].append(make_views(shifted, cfgs, rng, n_global=n_global, n_local=n_local))
    return out
