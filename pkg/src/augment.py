"""
src/augment.py - Multi-Crop View Pipeline

Builds the positive views of one training image: M=2 global views (families
global1 / global2, alternating) and N=8 local views, each independently
cropped, flipped, colour-jittered, grey-scaled, blurred, solarized and
normalized.

Images are float arrays of shape (H, W, 3) with values in [0, 1] before
normalization.

DETERMINISM:
    Every random draw comes from the numpy Generator passed in. The trainer
    derives one Generator per (seed, epoch, sample_index, stream) through
    sample_rng(), so results never depend on worker count or batch order.

DEFAULTS (desk scale, per view family):
                         local       global1     global2
    crop scale           0.05-0.4    0.4-1.0     0.4-1.0
    output size          16          32          32
    flip prob            0.5         0.5         0.5
    jitter prob          0.8         0.8         0.8
      brightness/contrast/saturation/hue  0.4 / 0.4 / 0.2 / 0.1
    greyscale prob       0.2         0.2         0.2
    blur prob            0.5         1.0         0.1
    solarize prob        0.0         0.0         0.2
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter, map_coordinates

from src.exceptions import DimensionError, ParameterError


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

GLOBAL_LOCAL_BOUNDARY = 0.4

BLUR_SIGMA_RANGE = (0.1, 2.0)
SOLARIZE_THRESHOLD = 0.5
CROP_ATTEMPTS = 10

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

_STREAMS = {'positive': 0, 'negative': 1, 'shift': 2, 'eval': 3, 'shuffle': 4, 'bank': 5}


def sample_rng(seed: int, epoch: int, sample_index: int, stream: str = 'positive') -> np.random.Generator:
    """Independent Generator fully determined by (seed, epoch, sample_index, stream)."""
    return np.random.default_rng([int(seed), int(epoch), int(sample_index), _STREAMS[stream]])


@dataclass
class ViewFamilyConfig:
    """Augmentation parameters of one view family."""
    crop_scale_range: Tuple[float, float] = (0.4, 1.0)
    crop_ratio_range: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    output_size: int = 32
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 1.0
    solarize_prob: float = 0.0
    normalize_mean: Tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: Tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError(f"crop_scale_range must satisfy 0 <= lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ('flip_prob', 'jitter_prob', 'grayscale_prob', 'blur_prob', 'solarize_prob'):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {p}")
        if self.output_size < 4:
            raise ParameterError(f"output_size must be >= 4, got {self.output_size}")
        if any(s <= 0 for s in self.normalize_std):
            raise ParameterError(f"normalize_std must be positive, got {self.normalize_std}")


def default_local() -> ViewFamilyConfig:
    return ViewFamilyConfig(crop_scale_range=(0.05, GLOBAL_LOCAL_BOUNDARY), output_size=16, blur_prob=0.5)


def default_global1() -> ViewFamilyConfig:
    return ViewFamilyConfig(crop_scale_range=(GLOBAL_LOCAL_BOUNDARY, 1.0), output_size=32, blur_prob=1.0)


def default_global2() -> ViewFamilyConfig:
    return ViewFamilyConfig(crop_scale_range=(GLOBAL_LOCAL_BOUNDARY, 1.0), output_size=32,
                            blur_prob=0.1, solarize_prob=0.2)


@dataclass
class MultiCropConfig:
    """The three view families plus view counts."""
    local: ViewFamilyConfig = field(default_factory=default_local)
    global1: ViewFamilyConfig = field(default_factory=default_global1)
    global2: ViewFamilyConfig = field(default_factory=default_global2)
    n_global: int = 2
    n_local: int = 8

    def global_family(self, i: int) -> ViewFamilyConfig:
        return self.global1 if i % 2 == 0 else self.global2


@dataclass
class ViewSet:
    """Views produced for one image, with the sampled parameters of each."""
    globals: List[np.ndarray]
    locals: List[np.ndarray]
    provenance: List[Dict] = field(default_factory=list)


# =============================================================================
# GEOMETRY
# =============================================================================

def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"Expected an (H, W, 3) image, got shape {img.shape}")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int = None,
                    box: Tuple[float, float, float, float] = None) -> np.ndarray:
    """
    Bilinear resampling (half-pixel centres) of img, or of the box
    (top, left, height, width) inside it, to out_h x out_w.

    Same-size resampling of the whole image is an exact identity.
    """
    _check_image(img)
    out_w = out_w or out_h
    top, left, h, w = box if box is not None else (0.0, 0.0, img.shape[0], img.shape[1])
    ys = top + (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing='ij')
    coords = np.stack([grid_y, grid_x])
    out = np.empty((out_h, out_w, 3), dtype=img.dtype)
    for c in range(3):
        out[..., c] = map_coordinates(img[..., c], coords, order=1, mode='nearest')
    return out


def random_resized_crop(img: np.ndarray, scale: Tuple[float, float], out: int,
                        rng: np.random.Generator,
                        ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)) -> Tuple[np.ndarray, Dict]:
    """
    Crop a random area fraction in [scale] with aspect ratio in [ratio], resize to out x out.

    Returns (view, params). Degenerate crops are retried CROP_ATTEMPTS times,
    then the whole image is resized.
    """
    _check_image(img)
    height, width = img.shape[:2]
    if height < 4 or width < 4:
        raise DimensionError(f"random_resized_crop needs at least a 4x4 image, got {img.shape[:2]}")
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])

    for _ in range(CROP_ATTEMPTS):
        fraction = rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(fraction * area * aspect)))
        h = int(round(math.sqrt(fraction * area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            view = resize_bilinear(img, out, out, box=(top, left, h, w))
            return view, {'crop': [top, left, h, w], 'area_fraction': float(fraction), 'fallback': False}

    view = resize_bilinear(img, out, out)
    return view, {'crop': [0, 0, height, width], 'area_fraction': 1.0, 'fallback': True}


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


# =============================================================================
# PHOTOMETRIC
# =============================================================================

def grayscale(img: np.ndarray) -> np.ndarray:
    gray = img @ _GRAY_WEIGHTS
    return np.repeat(gray[..., None], 3, axis=2)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = float((img @ _GRAY_WEIGHTS).mean())
    return np.clip((img - m) * factor + m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = grayscale(img)
    return np.clip(gray + factor * (img - gray), 0.0, 1.0)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(img: np.ndarray, cfg: ViewFamilyConfig, rng: np.random.Generator) -> Tuple[np.ndarray, Dict]:
    """
    Brightness/contrast/saturation factors ~ U[1-s, 1+s], hue shift ~ U[-h, h],
    applied in a random order.
    """
    factors = {
        'brightness': rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness),
        'contrast': rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast),
        'saturation': rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation),
        'hue': rng.uniform(-cfg.hue, cfg.hue),
    }
    order = [int(i) for i in rng.permutation(4)]
    ops = [
        ('brightness', adjust_brightness),
        ('contrast', adjust_contrast),
        ('saturation', adjust_saturation),
        ('hue', adjust_hue),
    ]
    out = img
    for i in order:
        name, fn = ops[i]
        out = fn(out, factors[name])
    record = {k: float(v) for k, v in factors.items()}
    record['order'] = [ops[i][0] for i in order]
    return out, record


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Spatial Gaussian blur with kernel radius ceil(2 sigma)."""
    radius = max(1, int(math.ceil(2.0 * sigma)))
    return gaussian_filter(img, sigma=(sigma, sigma, 0.0), radius=(radius, radius, 0), mode='reflect')


def solarize(img: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img)


def normalize(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (img - np.asarray(mean)) / np.asarray(std)


# =============================================================================
# PIPELINE
# =============================================================================

def augment_view(img: np.ndarray, cfg: ViewFamilyConfig, rng: np.random.Generator) -> Tuple[np.ndarray, Dict]:
    """crop -> flip -> jitter -> greyscale -> blur -> solarize -> normalize."""
    view, record = random_resized_crop(img, cfg.crop_scale_range, cfg.output_size, rng,
                                       ratio=cfg.crop_ratio_range)
    record['flip'] = bool(rng.random() < cfg.flip_prob)
    if record['flip']:
        view = hflip(view)

    record['jitter'] = None
    if rng.random() < cfg.jitter_prob:
        view, record['jitter'] = color_jitter(view, cfg, rng)

    record['grayscale'] = bool(rng.random() < cfg.grayscale_prob)
    if record['grayscale']:
        view = grayscale(view)

    record['blur_sigma'] = None
    if rng.random() < cfg.blur_prob:
        sigma = float(rng.uniform(*BLUR_SIGMA_RANGE))
        view = np.clip(gaussian_blur(view, sigma), 0.0, 1.0)
        record['blur_sigma'] = sigma

    record['solarize'] = bool(rng.random() < cfg.solarize_prob)
    if record['solarize']:
        view = solarize(view)

    return normalize(view, cfg.normalize_mean, cfg.normalize_std), record


def make_views(img: np.ndarray, cfgs: MultiCropConfig, rng: np.random.Generator,
               n_global: int = None, n_local: int = None) -> ViewSet:
    """
    Produce n_global global views (alternating global1/global2) and n_local local views.

    Counts default to the config (2 and 8); negatives pass n_global=1.
    """
    _check_image(img)
    n_global = cfgs.n_global if n_global is None else n_global
    n_local = cfgs.n_local if n_local is None else n_local

    globals_, locals_, provenance = [], [], []
    for i in range(n_global):
        family = cfgs.global_family(i)
        view, record = augment_view(img, family, rng)
        record['family'] = 'global1' if i % 2 == 0 else 'global2'
        globals_.append(view)
        provenance.append(record)
    for _ in range(n_local):
        view, record = augment_view(img, cfgs.local, rng)
        record['family'] = 'local'
        locals_.append(view)
        provenance.append(record)
    return ViewSet(globals=globals_, locals=locals_, provenance=provenance)


def eval_view(img: np.ndarray, size: int, mean: Sequence[float] = IMAGENET_MEAN,
              std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    """Deterministic evaluation view: resize to the global size, normalize."""
    _check_image(img)
    if img.shape[0] != size or img.shape[1] != size:
        img = resize_bilinear(img, size, size)
    return normalize(img, mean, std)
