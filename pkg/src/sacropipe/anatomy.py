"""Segmentation-driven localization of the sacroiliac joints.

The SIJ is the seam where sacrum meets ilium, so a band around the sacrum
(its dilation) intersected with the pelvis label isolates both joints. The
two largest connected pieces of that intersection are the left and right
joints; their boxes, merged, define the anatomy-aware crop.

Boxes are half-open pixel rectangles ``(row0, col0, row1, col1)``. "Left"
and "right" refer to image columns (smaller column = left), not to patient
laterality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import CropError, LocalizationError

PELVIS, SACRUM = 1, 2
DEFAULT_RADIUS_FRACTION = 0.02
DEFAULT_MARGIN = 0.1


@dataclass(frozen=True)
class Box:
    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def height(self) -> int:
        return max(self.row1 - self.row0, 0)

    @property
    def width(self) -> int:
        return max(self.col1 - self.col0, 0)

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def center(self) -> tuple[float, float]:
        return ((self.row0 + self.row1) / 2, (self.col0 + self.col1) / 2)

    def intersection(self, other: Box) -> Box:
        return Box(max(self.row0, other.row0), max(self.col0, other.col0),
                   min(self.row1, other.row1), min(self.col1, other.col1))

    def union_box(self, other: Box) -> Box:
        return Box(min(self.row0, other.row0), min(self.col0, other.col0),
                   max(self.row1, other.row1), max(self.col1, other.col1))

    def iou(self, other: Box) -> float:
        inter = self.intersection(other).area
        union = self.area + other.area - inter
        return inter / union if union else 0.0

    def contains(self, other: Box) -> bool:
        return (self.row0 <= other.row0 and self.col0 <= other.col0
                and self.row1 >= other.row1 and self.col1 >= other.col1)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row1), slice(self.col0, self.col1)

    def shifted(self, drow: int, dcol: int) -> Box:
        return Box(self.row0 + drow, self.col0 + dcol, self.row1 + drow, self.col1 + dcol)

    def to_list(self) -> list[int]:
        return [self.row0, self.col0, self.row1, self.col1]

    @classmethod
    def from_list(cls, v) -> Box:
        return cls(*(int(x) for x in v))


@dataclass(frozen=True)
class SijBoxes:
    left: Box
    right: Box
    image_shape: tuple[int, int]
    margin_applied: float = 0.0

    def __post_init__(self):
        h, w = self.image_shape
        for b in (self.left, self.right):
            if b.row0 < 0 or b.col0 < 0 or b.row1 > h or b.col1 > w:
                raise LocalizationError(f"box {b} outside image bounds {self.image_shape}")

    @property
    def union(self) -> Box:
        return self.left.union_box(self.right)

    def to_dict(self) -> dict:
        return {"left": self.left.to_list(), "right": self.right.to_list(),
                "image_shape": list(self.image_shape), "margin_applied": self.margin_applied}

    @classmethod
    def from_dict(cls, d: dict) -> SijBoxes:
        return cls(Box.from_list(d["left"]), Box.from_list(d["right"]),
                   tuple(d["image_shape"]), float(d.get("margin_applied", 0.0)))


def disk_footprint(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean disk of integer ``radius``.

    Evaluated through the distance transform so cost does not grow with the radius.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0 or not mask.any():
        return mask.copy()
    if mask.all():
        return mask.copy()
    sq = ndimage.distance_transform_edt(~mask, return_distances=True)
    return sq <= radius


def default_radius(width: int) -> int:
    return max(1, int(round(DEFAULT_RADIUS_FRACTION * width)))


def sij_regions(seg: np.ndarray, radius: int | None = None) -> np.ndarray:
    """Label map of the two SIJ regions: 1 = image-left joint, 2 = image-right joint.

    Raises LocalizationError when fewer than two components survive.
    """
    seg = np.asarray(seg)
    if radius is None:
        radius = default_radius(seg.shape[1])
    pelvis = seg == PELVIS
    sacrum = seg == SACRUM
    if not pelvis.any() or not sacrum.any():
        raise LocalizationError("segmentation must contain both pelvis and sacrum labels")
    band = dilate(sacrum, radius) & pelvis
    comps, n = ndimage.label(band, structure=np.ones((3, 3), dtype=bool))
    if n < 2:
        raise LocalizationError(f"expected two SIJ components, found {n}")
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(comps), comps, idx)
    cols = ndimage.center_of_mass(band, comps, idx)
    col_centroid = np.array([c[1] for c in cols])
    # largest first; ties -> leftmost centroid
    order = np.lexsort((col_centroid, -areas))
    keep = idx[order[:2]]
    keep = keep[np.argsort(col_centroid[keep - 1], kind="stable")]
    out = np.zeros(seg.shape, dtype=np.uint8)
    out[comps == keep[0]] = 1
    out[comps == keep[1]] = 2
    return out


def expand_box(box: Box, margin: float, shape) -> Box:
    """Grow each side by ``margin`` times the box size along that axis, clamped to ``shape``."""
    dh, dw = margin * box.height, margin * box.width
    h, w = shape
    return Box(max(0, math.floor(box.row0 - dh + 1e-9)), max(0, math.floor(box.col0 - dw + 1e-9)),
               min(h, math.ceil(box.row1 + dh - 1e-9)), min(w, math.ceil(box.col1 + dw - 1e-9)))


def tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise LocalizationError("empty region")
    return Box(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def sij_bounding_boxes(regions: np.ndarray, margin_fraction: float = DEFAULT_MARGIN) -> SijBoxes:
    """Tight box per joint region, grown by ``margin_fraction`` of its size on each side."""
    regions = np.asarray(regions)
    if not (regions == 1).any() or not (regions == 2).any():
        raise LocalizationError("regions must contain both joints (labels 1 and 2)")
    left = expand_box(tight_box(regions == 1), margin_fraction, regions.shape)
    right = expand_box(tight_box(regions == 2), margin_fraction, regions.shape)
    if left.center[1] > right.center[1]:
        left, right = right, left
    return SijBoxes(left, right, tuple(regions.shape), margin_fraction)


def locate_sij(seg: np.ndarray, radius: int | None = None,
               margin_fraction: float = DEFAULT_MARGIN) -> SijBoxes:
    return sij_bounding_boxes(sij_regions(seg, radius), margin_fraction)


def crop_box(boxes: SijBoxes) -> Box:
    """Both joints and everything between them."""
    u = boxes.union
    if u.area == 0:
        raise CropError(f"degenerate crop box {u}")
    return u


def crop_to_sij(image: np.ndarray, boxes: SijBoxes) -> np.ndarray:
    if tuple(image.shape[:2]) != tuple(boxes.image_shape):
        raise CropError(f"image shape {image.shape} does not match box frame {boxes.image_shape}")
    return image[crop_box(boxes).slices()].copy()
