"""Stochastic mask augmentation for contrastive pair generation.

Each augmented view is: random resized crop (area fraction >= min_crop_ratio,
aspect in [3/4, 4/3]) -> small random rotation -> resize to the training
resolution. All resampling is nearest-neighbor and rotation fills uncovered
corners with a designated class, so no new class ids can appear.

Randomness comes from a caller-supplied numpy Generator (PCG64 via
``numpy.random.default_rng``), making every pipeline a pure function of
(mask, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maskio import SemanticMask, resize_nearest

CROP_ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_MAX_CROP_TRIES = 10


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation strengths and the output raster size.

    Defaults follow the reference recipe: crops keep at least 60% of the
    source area and rotations stay within +/-3 degrees — semantic masks are
    far less redundant than photos, so aggressive cropping destroys the
    signal instead of regularizing it.
    """

    min_crop_ratio: float = 0.6
    max_rotation_deg: float = 3.0
    out_w: int = 80
    out_h: int = 64
    fill_class: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.min_crop_ratio <= 1.0:
            raise ValueError(
                f"min_crop_ratio must be in (0, 1], got {self.min_crop_ratio}"
            )
        if self.max_rotation_deg < 0.0:
            raise ValueError(
                f"max_rotation_deg must be >= 0, got {self.max_rotation_deg}"
            )
        if self.out_w < 1 or self.out_h < 1:
            raise ValueError(f"output size must be positive, got {self.out_w}x{self.out_h}")
        if not 0 <= self.fill_class <= 254:
            raise ValueError(f"fill_class must be a valid class id, got {self.fill_class}")


def sample_crop_rect(
    width: int, height: int, min_ratio: float, rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """Draw a crop rectangle (x0, y0, w, h) with area >= min_ratio * W * H.

    Area fraction is uniform in [min_ratio, 1], aspect log-uniform in
    [3/4, 4/3]; dimensions round up so the area bound is never undershot.
    If ten draws in a row do not fit inside the source, the full frame is
    returned (the standard fallback).
    """
    lo_log, hi_log = math.log(CROP_ASPECT_RANGE[0]), math.log(CROP_ASPECT_RANGE[1])
    for _ in range(_MAX_CROP_TRIES):
        area = rng.uniform(min_ratio, 1.0) * width * height
        aspect = math.exp(rng.uniform(lo_log, hi_log))
        crop_w = math.ceil(math.sqrt(area * aspect))
        crop_h = math.ceil(math.sqrt(area / aspect))
        if crop_w <= width and crop_h <= height:
            x0 = int(rng.integers(0, width - crop_w + 1))
            y0 = int(rng.integers(0, height - crop_h + 1))
            return x0, y0, crop_w, crop_h
    return 0, 0, width, height


def random_resized_crop(
    mask: SemanticMask, min_ratio: float, rng: np.random.Generator
) -> SemanticMask:
    """Crop a random rectangle and scale it back to the source size."""
    x0, y0, crop_w, crop_h = sample_crop_rect(mask.width, mask.height, min_ratio, rng)
    crop = SemanticMask(
        mask.data[y0 : y0 + crop_h, x0 : x0 + crop_w].copy(), mask.palette_id
    )
    return resize_nearest(crop, mask.width, mask.height)


def random_rotation(
    mask: SemanticMask,
    max_deg: float,
    rng: np.random.Generator,
    fill_class: int = 0,
) -> SemanticMask:
    """Rotate about the raster center by a uniform angle in [-max_deg, +max_deg].

    Sampling is nearest-neighbor via the inverse map; source coordinates that
    fall outside the raster take ``fill_class``.
    """
    angle = float(rng.uniform(-max_deg, max_deg))
    if angle == 0.0:
        return SemanticMask(mask.data.copy(), mask.palette_id)
    h, w = mask.shape
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    xc = (np.arange(w) + 0.5) - w / 2.0
    yc = (np.arange(h) + 0.5) - h / 2.0
    xx, yy = np.meshgrid(xc, yc)
    # inverse rotation: where did this output pixel come from?
    src_x = cos_t * xx + sin_t * yy + w / 2.0
    src_y = -sin_t * xx + cos_t * yy + h / 2.0
    src_c = np.floor(src_x).astype(np.intp)
    src_r = np.floor(src_y).astype(np.intp)
    valid = (src_c >= 0) & (src_c < w) & (src_r >= 0) & (src_r < h)
    out = np.full((h, w), fill_class, dtype=np.uint8)
    out[valid] = mask.data[src_r[valid], src_c[valid]]
    return SemanticMask(out, mask.palette_id)


def augment_once(
    mask: SemanticMask, config: AugmentConfig, rng: np.random.Generator
) -> SemanticMask:
    """One augmented view: crop -> rotate -> resize to (out_h, out_w)."""
    out = random_resized_crop(mask, config.min_crop_ratio, rng)
    out = random_rotation(out, config.max_rotation_deg, rng, config.fill_class)
    return resize_nearest(out, config.out_w, config.out_h)


def make_pair(
    mask: SemanticMask,
    config: AugmentConfig,
    rng: np.random.Generator | None = None,
) -> tuple[SemanticMask, SemanticMask]:
    """Two independent augmented views of the same mask (a positive pair).

    When ``rng`` is omitted a fresh PCG64 generator is seeded from
    ``config.seed``, so the pair is a deterministic function of (mask, config).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return augment_once(mask, config, rng), augment_once(mask, config, rng)
