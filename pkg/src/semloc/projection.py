"""Perspective (gnomonic) view extraction from equirectangular panoramas.

A view is rendered by casting a ray through every output pixel center,
rotating it by the view's pitch then yaw, converting to longitude/latitude,
and sampling the panorama with nearest-neighbor lookup — class rasters must
never be interpolated.

Conventions: yaw 0 looks along the panorama's center column and increases
toward the right edge (east); pitch is positive upward; longitude wraps
horizontally, latitude +90 at the top row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .maskio import PanoramaRecord, SemanticMask, ViewRecord

DEFAULT_VIEW_W = 640
DEFAULT_VIEW_H = 480
DEFAULT_VIEW_COUNT = 12
DEFAULT_FOV_DEG = 90.0


@dataclass(frozen=True)
class ViewSpec:
    """Rendering parameters for one perspective view."""

    yaw_deg: float
    pitch_deg: float = 0.0
    fov_deg: float = DEFAULT_FOV_DEG
    out_w: int = DEFAULT_VIEW_W
    out_h: int = DEFAULT_VIEW_H

    def __post_init__(self) -> None:
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov must be in (0, 180) degrees, got {self.fov_deg}")
        if self.out_w < 1 or self.out_h < 1:
            raise ValueError(f"view size must be positive, got {self.out_w}x{self.out_h}")


def gnomonic_view(
    pano: PanoramaRecord, spec: ViewSpec, view_id: str | None = None
) -> ViewRecord:
    """Render one perspective view of ``pano``.

    The horizontal field of view is ``spec.fov_deg``; the vertical extent
    follows from the aspect ratio (square pixels). Output pixels sample the
    panorama at the cell containing the ray's longitude/latitude, which for
    equirectangular grids is exactly the nearest pixel center.
    """
    data = _render(pano.mask, spec)
    if view_id is None:
        view_id = f"{pano.id}_yaw{spec.yaw_deg:g}"
    return ViewRecord(
        id=view_id,
        parent_pano=pano.id,
        yaw_deg=spec.yaw_deg,
        fov_deg=spec.fov_deg,
        position=pano.position,
        mask=SemanticMask(data, pano.mask.palette_id),
    )


def _render(mask: SemanticMask, spec: ViewSpec) -> np.ndarray:
    pano_h, pano_w = mask.shape
    out_w, out_h = spec.out_w, spec.out_h
    focal = (out_w / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)

    u = (np.arange(out_w) + 0.5) - out_w / 2.0
    v = (np.arange(out_h) + 0.5) - out_h / 2.0
    uu, vv = np.meshgrid(u, v)
    x = uu
    y = -vv  # image rows grow downward; world y grows upward
    z = np.full_like(uu, focal)

    pitch = math.radians(spec.pitch_deg)
    if pitch != 0.0:
        cp, sp = math.cos(pitch), math.sin(pitch)
        y, z = y * cp + z * sp, -y * sp + z * cp

    yaw = math.radians(spec.yaw_deg)
    cy, sy = math.cos(yaw), math.sin(yaw)
    x, z = x * cy + z * sy, -x * sy + z * cy

    lon = np.degrees(np.arctan2(x, z)) % 360.0
    lat = np.degrees(np.arctan2(y, np.hypot(x, z)))

    cols = np.floor(lon * (pano_w / 360.0)).astype(np.intp) % pano_w
    rows = np.floor((90.0 - lat) * (pano_h / 180.0)).astype(np.intp)
    rows = np.clip(rows, 0, pano_h - 1)
    return mask.data[rows, cols]


def generate_database_views(
    pano: PanoramaRecord,
    count: int = DEFAULT_VIEW_COUNT,
    fov_deg: float = DEFAULT_FOV_DEG,
    out_w: int = DEFAULT_VIEW_W,
    out_h: int = DEFAULT_VIEW_H,
) -> list[ViewRecord]:
    """Render ``count`` views at evenly spaced yaws 0, 360/count, … .

    View ids follow ``{pano.id}_v{k:02d}`` so regeneration from the same
    panorama is id-stable.
    """
    if count < 1:
        raise ValueError(f"view count must be >= 1, got {count}")
    step = 360.0 / count
    views = []
    for k in range(count):
        spec = ViewSpec(yaw_deg=k * step, fov_deg=fov_deg, out_w=out_w, out_h=out_h)
        views.append(gnomonic_view(pano, spec, view_id=f"{pano.id}_v{k:02d}"))
    return views


def neighbors_of(view_id: str, views: Iterable[ViewRecord]) -> list[ViewRecord]:
    """All views sharing the given view's parent panorama (itself included)."""
    views = list(views)
    by_id = {v.id: v for v in views}
    if view_id not in by_id:
        raise KeyError(f"unknown view id {view_id!r}")
    parent = by_id[view_id].parent_pano
    return [v for v in views if v.parent_pano == parent]


def view_yaws(count: int = DEFAULT_VIEW_COUNT) -> Sequence[float]:
    """The yaw grid used for database views."""
    return [k * (360.0 / count) for k in range(count)]
