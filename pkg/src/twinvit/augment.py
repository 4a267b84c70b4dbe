"""Seed-addressable image augmentation and multi-crop view generation.

Images are float32 arrays shaped (3, H, W) with values in [0, 1].  Every view
draws from its own counter-based stream keyed by (seed, epoch, image index,
view index), so a view can be regenerated without touching any other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ParameterError
from .resample import resize_bilinear

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
_TO_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_FROM_YIQ = np.linalg.inv(_TO_YIQ)

BT_VIEWS = 2
GLOBAL_VIEWS = 2


@dataclass(frozen=True)
class AugmentConfig:
    """View geometry and photometric settings.

    Probabilities follow the usual DINO recipe: blur always on the first
    global view, blur 0.1 + solarize 0.2 on the second, blur 0.5 on locals,
    jitter 0.8 everywhere.  The two Barlow Twins views reuse the first/second
    global-view settings.  Blur sigmas are given for a 224-pixel view and
    scale with the view's side.
    """

    global_size: int = 64
    local_size: int = 24
    n_local: int = 6
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    jitter_p: float = 0.8
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_p_global1: float = 1.0
    blur_p_global2: float = 0.1
    blur_p_local: float = 0.5
    solarize_p_global2: float = 0.2
    solarize_threshold: float = 0.5

    def __post_init__(self):
        if self.global_size < 1 or self.local_size < 1 or self.n_local < 0:
            raise ConfigError("view sizes must be positive and n_local non-negative")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ConfigError(f"blur_sigma must satisfy 0 < lo <= hi, got {(lo, hi)}")


def default_local_size(global_size: int, patch_size: int) -> int:
    """global * 3/7, rounded to a whole number of patches (at least one)."""
    return max(1, round(global_size * 3 / 7 / patch_size)) * patch_size


@dataclass
class MultiCropBatch:
    """All views of one image.

    ``bt_views`` (2, 3, G, G) feed Barlow Twins; ``global_views`` (2, 3, G, G)
    and ``local_views`` (n_local, 3, L, L) feed DINO.
    """

    bt_views: np.ndarray
    global_views: np.ndarray
    local_views: np.ndarray
    provenance: tuple[int, int, int]


# --------------------------------------------------------------- geometry
def sample_crop_box(height: int, width: int, scale_range, rng: np.random.Generator,
                    ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """(top, left, h, w) of a random crop; center crop after 10 misses."""
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ParameterError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        h, w = height, width
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(img: np.ndarray, out_size: int, scale_range, rng: np.random.Generator,
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    _, height, width = img.shape
    top, left, h, w = sample_crop_box(height, width, scale_range, rng, ratio)
    crop = img[:, top:top + h, left:left + w]
    return np.clip(resize_bilinear(crop, out_size, out_size), 0.0, 1.0)


# -------------------------------------------------------------- photometric
def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * np.float32(factor), 0.0, 1.0)


def _gray(img: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, img, axes=1)[None]


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = np.float32(_gray(img).mean())
    return np.clip((img - m) * np.float32(factor) + m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = _gray(img)
    return np.clip(gray + (img - gray) * np.float32(factor), 0.0, 1.0)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate chroma by ``shift`` turns in YIQ space (gray stays gray)."""
    angle = 2 * math.pi * shift
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    mat = (_FROM_YIQ @ rot @ _TO_YIQ).astype(np.float32)
    return np.clip(np.tensordot(mat, img, axes=1), 0.0, 1.0).astype(np.float32)


def color_jitter(img: np.ndarray, strengths, rng: np.random.Generator) -> np.ndarray:
    """Random brightness, contrast, saturation (multiplicative) and hue shift.

    ``strengths`` = (brightness, contrast, saturation, hue); zero disables a
    component exactly.
    """
    b, c, s, h = strengths
    if min(b, c, s, h) < 0:
        raise ParameterError(f"jitter strengths must be non-negative, got {strengths}")
    factors = [rng.uniform(max(0.0, 1 - x), 1 + x) if x > 0 else 1.0 for x in (b, c, s)]
    shift = rng.uniform(-h, h) if h > 0 else 0.0
    out = img
    for fn, f in zip((adjust_brightness, adjust_contrast, adjust_saturation), factors):
        if f != 1.0:
            out = fn(out, f)
    if shift != 0.0:
        out = adjust_hue(out, shift)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), edge-replicate padding."""
    if not sigma > 0:
        raise ParameterError(f"blur sigma must be positive, got {sigma}")
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    _, h, w = img.shape
    x = img.astype(np.float64)
    padded = np.pad(x, ((0, 0), (r, r), (0, 0)), mode="edge")
    x = sum(k[i] * padded[:, i:i + h, :] for i in range(len(k)))
    padded = np.pad(x, ((0, 0), (0, 0), (r, r)), mode="edge")
    x = sum(k[i] * padded[:, :, i:i + w] for i in range(len(k)))
    return np.clip(x, 0.0, 1.0).astype(img.dtype)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert pixels at or above ``threshold``."""
    if not 0 <= threshold <= 1:
        raise ParameterError(f"solarize threshold must lie in [0, 1], got {threshold}")
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


# ---------------------------------------------------------------- pipeline
def _view(img, size, scale, blur_p, solarize_p, cfg: AugmentConfig, rng) -> np.ndarray:
    out = random_resized_crop(img, size, scale, rng)
    if rng.random() < cfg.jitter_p:
        out = color_jitter(out, (cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue), rng)
    if rng.random() < blur_p:
        sigma = rng.uniform(*cfg.blur_sigma) * size / 224
        out = gaussian_blur(out, sigma)
    if rng.random() < solarize_p:
        out = solarize(out, cfg.solarize_threshold)
    return out.astype(np.float32)


def view_stream(seed: int, epoch: int, index: int, view: int) -> np.random.Generator:
    return rngmod.stream(seed, rngmod.VIEW, epoch, index, view)


def make_multicrop(img: np.ndarray, cfg: AugmentConfig, seed: int, epoch: int, index: int) -> MultiCropBatch:
    """Two Barlow Twins views, two global views and ``cfg.n_local`` local views.

    View streams are numbered 0-1 (BT), 2-3 (global), 4.. (local).
    """
    img = np.asarray(img, dtype=np.float32)
    g, loc = cfg.global_size, cfg.local_size
    first = (cfg.blur_p_global1, 0.0)
    second = (cfg.blur_p_global2, cfg.solarize_p_global2)

    def make(view, size, scale, probs):
        return _view(img, size, scale, *probs, cfg, view_stream(seed, epoch, index, view))

    bt = np.stack([make(0, g, cfg.global_scale, first), make(1, g, cfg.global_scale, second)])
    glob = np.stack([make(2, g, cfg.global_scale, first), make(3, g, cfg.global_scale, second)])
    local = np.stack([make(4 + i, loc, cfg.local_scale, (cfg.blur_p_local, 0.0)) for i in range(cfg.n_local)]) \
        if cfg.n_local else np.zeros((0, 3, loc, loc), dtype=np.float32)
    return MultiCropBatch(bt, glob, local, (seed, epoch, index))
