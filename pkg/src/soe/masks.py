"""Rectangular edit masks and their footprints on attention grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class RectMask:
    """Axis-aligned rectangle in pixel coordinates.

    The box spans ``[cx - w/2, cx + w/2] x [cy - h/2, cy + h/2]`` on the
    continuous pixel plane ``[0, img_w] x [0, img_h]``.
    """

    cx: float
    cy: float
    w: float
    h: float
    img_w: int
    img_h: int

    def __post_init__(self):
        if not (1 <= self.w <= self.img_w and 1 <= self.h <= self.img_h):
            raise GeometryError(f"mask extent {self.w}x{self.h} outside 1..image size")
        eps = 1e-9
        if (self.x0 < -eps or self.y0 < -eps or self.x1 > self.img_w + eps
                or self.y1 > self.img_h + eps):
            raise GeometryError(f"mask {self.bounds} does not lie inside "
                                f"{self.img_w}x{self.img_h} image")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, img_w: int, img_h: int) -> RectMask:
        """Build from a COCO-style top-left ``[x, y, w, h]`` box."""
        return cls(x + w / 2, y + h / 2, w, h, img_w, img_h)

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.x0, self.y0, self.x1, self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"cx": _num(self.cx), "cy": _num(self.cy), "w": _num(self.w), "h": _num(self.h),
                "img_w": self.img_w, "img_h": self.img_h}

    @classmethod
    def from_dict(cls, d: dict) -> RectMask:
        return cls(d["cx"], d["cy"], d["w"], d["h"], int(d["img_w"]), int(d["img_h"]))

    def coverage(self, out_h: int, out_w: int) -> np.ndarray:
        """Fraction of each cell of an ``out_h x out_w`` grid covered by the box."""
        ox = _axis_overlap(self.x0, self.x1, self.img_w, out_w)
        oy = _axis_overlap(self.y0, self.y1, self.img_h, out_h)
        return np.outer(oy, ox)


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def _axis_overlap(lo: float, hi: float, extent: int, cells: int) -> np.ndarray:
    size = extent / cells
    edges = np.arange(cells + 1) * size
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None) / size


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _fit(center: float, extent: float, limit: int) -> float:
    lo = center - extent / 2
    if lo < 0:
        return extent / 2
    if lo + extent > limit:
        return limit - extent / 2
    return center


def scale_mask(m: RectMask, s: float) -> RectMask:
    """Enlarge width and height by ``s`` about the centre, shifting inward at image edges."""
    if s < 1:
        raise GeometryError(f"scale factor must be >= 1, got {s}")
    if s == 1:
        return m
    w = min(max(_round_half_up(s * m.w), m.w), m.img_w)
    h = min(max(_round_half_up(s * m.h), m.h), m.img_h)
    return replace(m, cx=_fit(m.cx, w, m.img_w), cy=_fit(m.cy, h, m.img_h), w=w, h=h)


@dataclass(frozen=True)
class GridRegion:
    """Half-open cell ranges ``[r0, r1) x [c0, c1)`` on an ``H x W`` grid."""

    H: int
    W: int
    r0: int
    r1: int
    c0: int
    c1: int

    def __post_init__(self):
        if not (0 <= self.r0 < self.r1 <= self.H and 0 <= self.c0 < self.c1 <= self.W):
            raise GeometryError(f"invalid grid region {self}")

    @property
    def rows(self) -> int:
        return self.r1 - self.r0

    @property
    def cols(self) -> int:
        return self.c1 - self.c0

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.r0, self.r1), slice(self.c0, self.c1)


def project_mask_to_grid(m: RectMask, H: int, W: int) -> GridRegion:
    """Cells whose footprint is at least half covered by the mask.

    The selection is returned as its bounding rectangle. When no cell reaches
    half coverage the single cell holding the mask centre is used.
    """
    if H < 1 or W < 1:
        raise GeometryError("grid extents must be positive")
    cov = m.coverage(H, W)
    rows, cols = np.nonzero(cov >= 0.5 - 1e-12)
    if rows.size == 0:
        r = min(int(m.cy * H / m.img_h), H - 1)
        c = min(int(m.cx * W / m.img_w), W - 1)
        return GridRegion(H, W, r, r + 1, c, c + 1)
    return GridRegion(H, W, int(rows.min()), int(rows.max()) + 1,
                      int(cols.min()), int(cols.max()) + 1)


def mask_raster(m: RectMask, H: int, W: int) -> np.ndarray:
    """Area-weighted rasterisation of the mask onto an ``H x W`` grid."""
    return m.coverage(H, W)
