"""Axis-aligned boxes in feature-map coordinates (x = column, y = row)."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import ShapeError


class Box(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return max(0.0, self.width) * max(0.0, self.height)

    def validate(self, width=None, height=None):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ShapeError(f"empty box {tuple(self)}")
        if self.x0 < 0 or self.y0 < 0:
            raise ShapeError(f"box {tuple(self)} has negative coordinates")
        if (width is not None and self.x1 > width) or (height is not None and self.y1 > height):
            raise ShapeError(f"box {tuple(self)} exceeds the {width}x{height} map")
        return self

    def cells(self):
        """Integer cell span (r0, r1, c0, c1) covered by the box, half-open."""
        return (int(math.floor(self.y0)), max(int(math.ceil(self.y1)), int(math.floor(self.y0)) + 1),
                int(math.floor(self.x0)), max(int(math.ceil(self.x1)), int(math.floor(self.x0)) + 1))

    def mask(self, height, width):
        m = np.zeros((height, width), dtype=bool)
        r0, r1, c0, c1 = self.cells()
        m[max(r0, 0):min(r1, height), max(c0, 0):min(c1, width)] = True
        return m


def intersection(a, b):
    """Intersection box, or None when the boxes do not overlap."""
    x0, y0 = max(a.x0, b.x0), max(a.y0, b.y0)
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if x0 < x1 and y0 < y1:
        return Box(x0, y0, x1, y1)
    return None


def iou(a, b):
    inter = intersection(a, b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union


def clip_box(box, width, height):
    return Box(min(max(box.x0, 0.0), width), min(max(box.y0, 0.0), height),
               min(max(box.x1, 0.0), width), min(max(box.y1, 0.0), height))
