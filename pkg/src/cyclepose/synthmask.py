"""Synthetic instance masks: randomly placed ellipses plus elastic deformation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAX_PLACEMENT_ATTEMPTS = 50


@dataclass(frozen=True)
class EllipseConfig:
    major_axis_range: tuple[int, int] = (5, 30)
    eccentricity_range: tuple[float, float] = (0.6, 0.9)
    max_overlap_fraction: float = 0.10
    count_range: tuple[int, int] = (8, 40)
    canvas_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        lo, hi = self.major_axis_range
        if not 1 <= lo <= hi < min(self.canvas_size):
            raise ValueError(f"major_axis_range {self.major_axis_range} must lie in [1, {min(self.canvas_size)})")
        elo, ehi = self.eccentricity_range
        if not 0.0 <= elo <= ehi < 1.0:
            raise ValueError(f"eccentricity_range {self.eccentricity_range} must lie in [0, 1)")
        if not 0.0 <= self.max_overlap_fraction <= 1.0:
            raise ValueError("max_overlap_fraction must lie in [0, 1]")
        clo, chi = self.count_range
        if not 0 <= clo <= chi:
            raise ValueError(f"invalid count_range {self.count_range}")
        if min(self.canvas_size) < 2:
            raise ValueError(f"canvas too small: {self.canvas_size}")


@dataclass(frozen=True)
class DeformConfig:
    grid_size_range: tuple[int, int] = (5, 15)
    variance_range: tuple[float, float] = (1.0, 5.0)

    def __post_init__(self):
        lo, hi = self.grid_size_range
        if not 2 <= lo <= hi:
            raise ValueError(f"grid_size_range {self.grid_size_range} must satisfy 2 <= low <= high")
        vlo, vhi = self.variance_range
        if not 0.0 < vlo <= vhi:
            raise ValueError(f"variance_range {self.variance_range} must be positive and ordered")


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]   # (y, x), pixels
    major_axis: float             # full length, pixels
    eccentricity: float
    angle: float                  # radians, orientation of the major axis

    @property
    def semi_axes(self) -> tuple[float, float]:
        a = 0.5 * self.major_axis
        return a, a * np.sqrt(1.0 - self.eccentricity ** 2)


def ellipse_footprint(ellipse: Ellipse, shape: tuple[int, int]) -> np.ndarray:
    """Boolean raster of the pixels whose centres fall inside ``ellipse``."""
    a, b = ellipse.semi_axes
    cy, cx = ellipse.center
    c, s = np.cos(ellipse.angle), np.sin(ellipse.angle)
    H, W = shape
    y0, y1 = max(int(np.floor(cy - a)), 0), min(int(np.ceil(cy + a)) + 1, H)
    x0, x1 = max(int(np.floor(cx - a)), 0), min(int(np.ceil(cx + a)) + 1, W)
    out = np.zeros(shape, dtype=bool)
    if y0 >= y1 or x0 >= x1:
        return out
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    out[y0:y1, x0:x1] = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return out


def accepts_overlap(candidate: np.ndarray, placed: list[np.ndarray], max_overlap_fraction: float) -> bool:
    """True if ``candidate`` overlaps every placed footprint by at most the
    allowed fraction of the smaller of the two areas."""
    area = int(candidate.sum())
    for other in placed:
        inter = int(np.count_nonzero(candidate & other))
        if inter > max_overlap_fraction * min(area, int(other.sum())):
            return False
    return True


def sample_ellipses(cfg: EllipseConfig, seed: int) -> tuple[list[Ellipse], list[np.ndarray]]:
    """Place ellipses one by one, rejecting candidates that overlap too much.

    Each ellipse gets ``MAX_PLACEMENT_ATTEMPTS`` tries before it is skipped,
    so a crowded canvas yields fewer instances instead of looping forever.
    Returns the accepted ellipses and their full (unclipped by later
    instances) footprints, in placement order.
    """
    rng = np.random.default_rng(seed)
    H, W = cfg.canvas_size
    n_target = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    ellipses: list[Ellipse] = []
    footprints: list[np.ndarray] = []
    for _ in range(n_target):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            e = Ellipse(
                center=(rng.uniform(0, H), rng.uniform(0, W)),
                major_axis=rng.uniform(*cfg.major_axis_range),
                eccentricity=rng.uniform(*cfg.eccentricity_range),
                angle=rng.uniform(0.0, np.pi),
            )
            fp = ellipse_footprint(e, (H, W))
            if not fp.any():
                continue
            if accepts_overlap(fp, footprints, cfg.max_overlap_fraction):
                ellipses.append(e)
                footprints.append(fp)
                break
    return ellipses, footprints


def rasterize(footprints: list[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int32)
    for k, fp in enumerate(footprints, start=1):
        labels[fp] = k  # later instances win shared pixels
    return labels


def sample_ellipse_mask(cfg: EllipseConfig, seed: int) -> np.ndarray:
    """Random ellipse label image, labels 1..K in placement order."""
    _, footprints = sample_ellipses(cfg, seed)
    return rasterize(footprints, cfg.canvas_size)


def sample_displacement(shape: tuple[int, int], grid_size: int, variance: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw a coarse ``grid_size x grid_size x 2`` N(0, variance) field and
    upsample each channel to ``shape`` with cubic spline interpolation.

    Returns ``(coarse, dense)`` with shapes (2, d, d) and (2, H, W).
    """
    coarse = rng.normal(0.0, np.sqrt(variance), size=(2, grid_size, grid_size))
    H, W = shape
    yy = np.linspace(0.0, grid_size - 1.0, H)
    xx = np.linspace(0.0, grid_size - 1.0, W)
    coords = np.stack(np.meshgrid(yy, xx, indexing="ij"))
    dense = np.stack([
        ndimage.map_coordinates(coarse[c], coords, order=3, mode="nearest")
        for c in range(2)
    ])
    return coarse, dense


def warp_labels(labels: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Backward-warp a label image: ``out[p] = labels[round(p + displacement[:, p])]``.

    Samples falling outside the canvas become background.
    """
    H, W = labels.shape
    grid = np.mgrid[0:H, 0:W].astype(np.float64)
    src = np.rint(grid + displacement).astype(np.int64)
    inside = (src[0] >= 0) & (src[0] < H) & (src[1] >= 0) & (src[1] < W)
    out = np.zeros_like(labels)
    out[inside] = labels[src[0][inside], src[1][inside]]
    return out


def elastic_deform(mask: np.ndarray, cfg: DeformConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    d = int(rng.integers(cfg.grid_size_range[0], cfg.grid_size_range[1] + 1))
    variance = float(rng.uniform(*cfg.variance_range))
    _, dense = sample_displacement(mask.shape, d, variance, rng)
    return warp_labels(mask, dense)


def clean_instances(labels: np.ndarray, min_area: int = 15) -> np.ndarray:
    """Keep the largest connected piece of each label, drop labels below
    ``min_area`` pixels and relabel compactly as 1..K.

    Deformation can split an instance or shrink a border-clipped one to a
    sliver; neither is a plausible nucleus.
    """
    out = np.zeros_like(labels)
    next_id = 1
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        region = labels[sl] == k
        comp, n = ndimage.label(region)
        if n > 1:
            sizes = np.bincount(comp.ravel())[1:]
            region = comp == (np.argmax(sizes) + 1)
        if region.sum() < min_area:
            continue
        out[sl][region] = next_id
        next_id += 1
    return out


def synthesize_mask(ellipse_cfg: EllipseConfig, deform_cfg: DeformConfig, seed: int,
                    min_area: int = 15) -> np.ndarray:
    """Full synthetic-mask pipeline: ellipses -> elastic deformation -> cleanup."""
    ss = np.random.SeedSequence(seed)
    s_place, s_warp = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    mask = sample_ellipse_mask(ellipse_cfg, s_place)
    mask = elastic_deform(mask, deform_cfg, s_warp)
    return clean_instances(mask, min_area=min_area)
