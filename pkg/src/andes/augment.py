"""Multi-crop view generation for N-band tiles.

All stochastic choices are drawn from an explicit numpy Generator so a seeded
stream reproduces every tensor byte-exactly. Crop geometry is shared across
bands; photometric changes never move spatial content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .data import BandImage, BandStats


@dataclass(frozen=True)
class CropConfig:
    global_size: int = 224
    local_size: int = 98
    n_global: int = 2
    n_local: int = 8
    global_scale: tuple[float, float] = (0.5, 1.0)
    local_scale: tuple[float, float] = (0.2, 0.5)
    aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)

    def __post_init__(self):
        if self.n_global != 2:
            raise ValueError("exactly 2 global views are produced")
        # lo == hi is allowed so a unit range turns cropping into a plain resize.
        for name, (lo, hi) in (("global_scale", self.global_scale), ("local_scale", self.local_scale)):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")

    def validate_patch_size(self, patch_size: int) -> None:
        for name, size in (("global_size", self.global_size), ("local_size", self.local_size)):
            if size % patch_size != 0:
                raise ValueError(f"{name}={size} not divisible by patch size {patch_size}")


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric augmentation knobs: probabilities, strengths, blur sigma."""

    p_flip: float = 0.5
    p_jitter: float = 0.8
    jitter_strength: float = 0.5
    # Blur probability per view: (global 1, global 2, locals).
    p_blur: tuple[float, float, float] = (1.0, 0.1, 0.5)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_band_dropout: float = 0.2

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(p_flip=0.0, p_jitter=0.0, p_blur=(0.0, 0.0, 0.0), p_band_dropout=0.0)


@dataclass
class View:
    """One crop as float32 (bands, size, size)."""

    tensor: np.ndarray

    def __post_init__(self):
        self.tensor = np.ascontiguousarray(self.tensor, dtype=np.float32)
        if self.tensor.ndim != 3 or self.tensor.shape[1] != self.tensor.shape[2]:
            raise ValueError(f"expected square (bands, s, s) tensor, got {self.tensor.shape}")
        if not np.all(np.isfinite(self.tensor)):
            raise ValueError("view contains non-finite samples")

    @property
    def bands(self) -> int:
        return self.tensor.shape[0]

    @property
    def size(self) -> int:
        return self.tensor.shape[1]


@dataclass
class ViewSet:
    global_views: list[View] = field(default_factory=list)
    local_views: list[View] = field(default_factory=list)


def _resample_bilinear(img: np.ndarray, box: tuple[float, float, float, float], out_size: int) -> np.ndarray:
    """Bilinearly sample a (bands, H, W) float image over `box` = (top, left, h, w).

    Output pixel centers map onto the box with the half-pixel-center
    convention, so resizing a full image to its own size is an exact copy.
    """
    _, height, width = img.shape
    top, left, h, w = box
    ys = top + (np.arange(out_size) + 0.5) * (h / out_size) - 0.5
    xs = left + (np.arange(out_size) + 0.5) * (w / out_size) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ty = (ys - y0).astype(np.float32)
    tx = (xs - x0).astype(np.float32)
    y0 = np.clip(y0.astype(np.int64), 0, height - 1)
    x0 = np.clip(x0.astype(np.int64), 0, width - 1)
    y1 = np.clip(y0 + 1, 0, height - 1)
    x1 = np.clip(x0 + 1, 0, width - 1)

    row0 = img[:, y0, :][:, :, x0] * (1 - tx) + img[:, y0, :][:, :, x1] * tx
    row1 = img[:, y1, :][:, :, x0] * (1 - tx) + img[:, y1, :][:, :, x1] * tx
    out = row0 * (1 - ty)[None, :, None] + row1 * ty[None, :, None]
    return out.astype(np.float32)


def sample_crop_box(
    height: int,
    width: int,
    scale: tuple[float, float],
    aspect: tuple[float, float],
    rng: np.random.Generator,
    max_tries: int = 10,
) -> tuple[int, int, int, int]:
    """Sample an integer crop box (top, left, h, w): area uniform in
    scale*(W*H), aspect log-uniform. Falls back to a centered square after
    `max_tries` rejected proposals."""
    area = height * width
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(max_tries):
        target_area = area * rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * ar)))
        h = int(round(math.sqrt(target_area / ar)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def random_resized_crop(
    img: BandImage,
    out_size: int,
    scale: tuple[float, float],
    aspect: tuple[float, float],
    rng: np.random.Generator,
) -> View:
    """Random scale/aspect crop resampled to out_size, all bands identically."""
    box = sample_crop_box(img.height, img.width, scale, aspect, rng)
    floating = img.data.astype(np.float32) / 255.0
    return View(_resample_bilinear(floating, box, out_size))


def resize_tile(img: BandImage, out_size: int) -> View:
    """Deterministic full-image resize to out_size (values scaled to [0, 1])."""
    floating = img.data.astype(np.float32) / 255.0
    return View(_resample_bilinear(floating, (0.0, 0.0, img.height, img.width), out_size))


def hflip(view: View) -> View:
    return View(view.tensor[:, :, ::-1].copy())


def spectral_jitter(view: View, strength: float, rng: np.random.Generator) -> View:
    """Per-band affine perturbation plus a brightness gain shared by all bands.

    Gains are U(1 - 0.4*strength, 1 + 0.4*strength), offsets
    U(-0.1*strength, 0.1*strength), independent per band; output clamps to [0, 1].
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    bands = view.bands
    gains = rng.uniform(1 - 0.4 * strength, 1 + 0.4 * strength, size=bands).astype(np.float32)
    offsets = rng.uniform(-0.1 * strength, 0.1 * strength, size=bands).astype(np.float32)
    brightness = np.float32(rng.uniform(1 - 0.4 * strength, 1 + 0.4 * strength))
    out = brightness * (gains[:, None, None] * view.tensor + offsets[:, None, None])
    return View(np.clip(out, 0.0, 1.0))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3*sigma)."""
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(view: View, sigma_range: tuple[float, float], rng: np.random.Generator) -> View:
    """Separable Gaussian blur per band; sigma uniform in range, reflect padding."""
    if sigma_range[0] < 0.1:
        raise ValueError(f"sigma lower bound must be >= 0.1, got {sigma_range[0]}")
    sigma = float(rng.uniform(sigma_range[0], sigma_range[1]))
    kernel = gaussian_kernel(sigma)
    out = correlate1d(view.tensor, kernel, axis=1, mode="reflect")
    out = correlate1d(out, kernel, axis=2, mode="reflect")
    return View(out)


def band_dropout(view: View, rng: np.random.Generator) -> View:
    """Zero one uniformly chosen band."""
    b = int(rng.integers(0, view.bands))
    out = view.tensor.copy()
    out[b] = 0.0
    return View(out)


def normalize(view: View, stats: BandStats) -> View:
    if stats.bands != view.bands:
        raise ValueError(f"stats have {stats.bands} bands, view has {view.bands}")
    mean = stats.mean.astype(np.float32)[:, None, None]
    std = stats.std.astype(np.float32)[:, None, None]
    return View((view.tensor - mean) / std)


def denormalize(view: View, stats: BandStats) -> View:
    mean = stats.mean.astype(np.float32)[:, None, None]
    std = stats.std.astype(np.float32)[:, None, None]
    return View(view.tensor * std + mean)


def _augment_one(
    img: BandImage,
    out_size: int,
    scale: tuple[float, float],
    cfg: CropConfig,
    aug: AugmentConfig,
    p_blur: float,
    stats: BandStats,
    rng: np.random.Generator,
) -> View:
    view = random_resized_crop(img, out_size, scale, cfg.aspect_range, rng)
    if rng.uniform() < aug.p_flip:
        view = hflip(view)
    if rng.uniform() < aug.p_jitter:
        view = spectral_jitter(view, aug.jitter_strength, rng)
    if rng.uniform() < p_blur:
        view = gaussian_blur(view, aug.blur_sigma, rng)
    if rng.uniform() < aug.p_band_dropout:
        view = band_dropout(view, rng)
    return normalize(view, stats)


def multi_crop(
    img: BandImage,
    cfg: CropConfig,
    stats: BandStats,
    rng: np.random.Generator,
    aug: AugmentConfig | None = None,
) -> ViewSet:
    """Produce 2 global and n_local local views with per-view photometrics.

    Per view, in order: random resized crop, horizontal flip, spectral jitter,
    Gaussian blur (probability depends on view slot), band dropout, normalize.
    """
    aug = aug if aug is not None else AugmentConfig()
    vs = ViewSet()
    for g in range(cfg.n_global):
        vs.global_views.append(
            _augment_one(img, cfg.global_size, cfg.global_scale, cfg, aug, aug.p_blur[g], stats, rng)
        )
    for _ in range(cfg.n_local):
        vs.local_views.append(
            _augment_one(img, cfg.local_size, cfg.local_scale, cfg, aug, aug.p_blur[2], stats, rng)
        )
    return vs
