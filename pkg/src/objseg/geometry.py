"""Box and mask primitives shared across the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates, half-open convention
    (a one-pixel mask at row r, col c has the box (c, r, c+1, r+1))."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate box extents: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def clip(self, width: float, height: float) -> "Box":
        """Clamp to the image rectangle [0, width] x [0, height]."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, max(x2, x1), max(y2, y1))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks of equal shape."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def tight_box(mask: np.ndarray) -> Box:
    """Minimal half-open box covering all foreground pixels of a mask."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("tight_box of an empty mask")
    return Box(
        float(cols.min()), float(rows.min()),
        float(cols.max() + 1), float(rows.max() + 1),
    )


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner-perturbation radius keeping box IoU >= min_overlap.

    Minimum root over the three quadratic cases (both corners shifted inward,
    both outward, or the whole box translated).
    """
    if height <= 0 or width <= 0:
        raise ValueError("box extents must be positive")
    if not 0.0 < min_overlap < 1.0:
        raise ValueError("min_overlap must lie in (0, 1)")

    # translation: IoU of the box against itself shifted diagonally by r
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    sq1 = math.sqrt(b1 * b1 - 4 * a1 * c1)
    r1 = (b1 - sq1) / (2 * a1)

    # both corners shifted inward: (w-2r)(h-2r) >= min_overlap * wh
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    sq2 = math.sqrt(b2 * b2 - 4 * a2 * c2)
    r2 = (b2 - sq2) / (2 * a2)

    # both corners shifted outward: wh >= min_overlap * (w+2r)(h+2r)
    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    sq3 = math.sqrt(b3 * b3 - 4 * a3 * c3)
    r3 = (b3 + sq3) / (2 * a3)

    return max(0.0, min(r1, r2, r3))
