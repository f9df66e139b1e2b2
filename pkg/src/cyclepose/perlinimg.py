"""Mask-conditioned pseudo-microscopy images built from fractal Perlin noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import kernels

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class PerlinConfig:
    octaves: int = 4
    base_frequency: float = 1.0 / 32.0
    persistence: float = 0.5
    fg_intensity_range: tuple[float, float] = (0.5, 0.9)
    bg_intensity_range: tuple[float, float] = (0.05, 0.15)
    # a scalar or a (low, high) range sampled per image
    blur_sigma: float | tuple[float, float] = (0.5, 1.5)
    # math.inf disables the shot-noise stage
    poisson_scale: float = 200.0
    fg_texture_amplitude: float = 0.5
    bg_texture_amplitude: float = 0.05

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError("persistence must lie in (0, 1]")
        if self.base_frequency <= 0:
            raise ValueError("base_frequency must be positive")
        flo, fhi = self.fg_intensity_range
        blo, bhi = self.bg_intensity_range
        if flo > fhi or blo > bhi:
            raise ValueError("intensity ranges must be ordered (low, high)")
        if flo <= 0.5 * (blo + bhi):
            raise ValueError("foreground range must lie above the background midpoint")
        if min(_as_range(self.blur_sigma)) < 0:
            raise ValueError("blur_sigma must be >= 0")
        if not self.poisson_scale > 0:
            raise ValueError("poisson_scale must be positive")


def _as_range(value) -> tuple[float, float]:
    if isinstance(value, (tuple, list)):
        return float(value[0]), float(value[1])
    return float(value), float(value)


def _flatten_seed(seed) -> list[int]:
    if isinstance(seed, (tuple, list)):
        return [v for part in seed for v in _flatten_seed(part)]
    return [int(seed)]


def _rng(seed) -> np.random.Generator:
    # counter-based generator; streams for nearby seeds are independent
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_flatten_seed(seed))))


def perlin2d(shape: tuple[int, int], frequency: float, seed) -> np.ndarray:
    """Classic 2-D gradient noise in [-1, 1], zero on the integer lattice.

    Pixel ``(i, j)`` is evaluated at lattice coordinates ``(i*f, j*f)``.
    Gradients are random unit vectors; the quintic fade makes the field
    C1-continuous.  The raw noise is bounded by sqrt(2)/2, so it is scaled by
    sqrt(2) to span [-1, 1].
    """
    if frequency <= 0:
        raise ValueError("frequency must be positive")
    H, W = shape
    gh = int(math.floor((H - 1) * frequency)) + 2
    gw = int(math.floor((W - 1) * frequency)) + 2
    theta = _rng(seed).uniform(0.0, 2.0 * np.pi, size=(gh, gw))
    grads = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    noise = kernels.perlin_lattice(H, W, float(frequency), grads)
    return np.clip(noise * _SQRT2, -1.0, 1.0)


def fractal_perlin(shape: tuple[int, int], cfg: PerlinConfig, seed) -> np.ndarray:
    """Octave sum ``sum_o persistence**o * perlin2d(f * 2**o)`` rescaled to [0, 1]."""
    acc = np.zeros(shape, dtype=np.float64)
    for o in range(cfg.octaves):
        octave_seed = seed if o == 0 else (seed, o)
        acc += cfg.persistence ** o * perlin2d(shape, cfg.base_frequency * 2 ** o, octave_seed)
    lo, hi = acc.min(), acc.max()
    if hi - lo < 1e-12:
        return np.zeros(shape)
    return (acc - lo) / (hi - lo)


def poisson_noise(image: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Shot noise: ``Poisson(image * scale) / scale``."""
    if math.isinf(scale):
        return image.copy()
    return rng.poisson(np.clip(image, 0.0, None) * scale) / scale


def render_perlin_image(mask: np.ndarray, cfg: PerlinConfig, seed) -> np.ndarray:
    """Render a fluorescence-like image for ``mask``.

    Nuclei get a per-instance brightness modulated by fractal texture, the
    background a dim level with a faint texture of its own.  The result is
    blurred, passed through Poisson shot noise and clipped to [0, 1].
    """
    rng = _rng(seed)
    shape = mask.shape
    fg_tex = fractal_perlin(shape, cfg, (seed, 1001))
    bg_tex = fractal_perlin(shape, cfg, (seed, 1002))

    bg_level = rng.uniform(*cfg.bg_intensity_range)
    image = bg_level + cfg.bg_texture_amplitude * (bg_tex - 0.5)

    n = int(mask.max())
    if n > 0:
        levels = np.concatenate([[0.0], rng.uniform(*cfg.fg_intensity_range, size=n)])
        fg = mask > 0
        base = levels[mask[fg]]
        image[fg] = base * (1.0 - cfg.fg_texture_amplitude * (1.0 - fg_tex[fg]))

    sigma = rng.uniform(*_as_range(cfg.blur_sigma))
    if sigma > 0:
        image = ndimage.gaussian_filter(image, sigma)
    image = poisson_noise(image, cfg.poisson_scale, rng)
    return np.clip(image, 0.0, 1.0)


def fit_intensity_ranges(images: Sequence[np.ndarray], cfg: PerlinConfig | None = None,
                         percentiles: tuple[float, float] = (1.0, 99.0)) -> PerlinConfig:
    """Estimate foreground/background intensity ranges from real images.

    Each image is percentile-normalised to [0, 1] and split by Otsu's
    threshold; the spread of per-image foreground and background medians
    becomes the new ranges.
    """
    from skimage.filters import threshold_otsu

    cfg = cfg or PerlinConfig()
    fg_meds, bg_meds = [], []
    for img in images:
        lo, hi = np.percentile(img, percentiles)
        if hi <= lo:
            continue
        x = np.clip((img.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
        t = threshold_otsu(x)
        fg, bg = x[x > t], x[x <= t]
        if fg.size and bg.size:
            fg_meds.append(np.median(fg))
            bg_meds.append(np.median(bg))
    if not fg_meds:
        raise ValueError("no usable images to fit intensity ranges from")
    return replace(
        cfg,
        fg_intensity_range=(float(min(fg_meds)), float(max(fg_meds))),
        bg_intensity_range=(float(min(bg_meds)), float(max(bg_meds))),
    )
