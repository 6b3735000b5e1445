"""Overlapping patch plans, reflected patch extraction and coverage bookkeeping.

Padding is added on the bottom/right edges only, by reflection about the last
row/column (the edge pixel itself is not repeated). For images smaller than the
reflection span the reflection is applied repeatedly, so any size works,
including a single pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    patch: int
    stride: int
    padded_height: int
    padded_width: int
    pad_mode: str = "reflect"

    @property
    def row_origins(self):
        return tuple(range(0, self.padded_height - self.patch + 1, self.stride))

    @property
    def col_origins(self):
        return tuple(range(0, self.padded_width - self.patch + 1, self.stride))

    @property
    def origins(self):
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self):
        return len(self.row_origins) * len(self.col_origins)


def _padded_extent(d, patch, stride):
    if d <= patch:
        return patch
    return stride * math.ceil((d - patch) / stride) + patch


def plan_tiles(height, width, patch=64, stride=32) -> TilePlan:
    if height < 1 or width < 1:
        raise ConfigError(f"empty input {height}x{width}")
    if not patch >= stride >= 1:
        raise ConfigError(f"need patch >= stride >= 1, got patch={patch} stride={stride}")
    return TilePlan(height, width, patch, stride,
                    _padded_extent(height, patch, stride),
                    _padded_extent(width, patch, stride))


def reflect_index(i, n):
    """Map any integer index onto ``[0, n)`` by mirror reflection without edge repetition."""
    if n == 1:
        return np.zeros_like(np.asarray(i))
    period = 2 * (n - 1)
    i = np.abs(np.asarray(i)) % period
    return np.where(i < n, i, period - i)


def pad_image(image, plan: TilePlan):
    """Reflect-pad ``image`` (``H x W [x C]``) to the plan's padded extent."""
    image = np.asarray(image)
    if image.shape[:2] != (plan.height, plan.width):
        raise ConfigError(f"image {image.shape[:2]} does not match plan {plan.height}x{plan.width}")
    rows = reflect_index(np.arange(plan.padded_height), plan.height)
    cols = reflect_index(np.arange(plan.padded_width), plan.width)
    return image[rows][:, cols]


def extract_patch(image, origin, plan: TilePlan):
    r, c = origin
    if r not in plan.row_origins or c not in plan.col_origins:
        raise ConfigError(f"origin {origin} is not part of the tile plan")
    image = np.asarray(image)
    rows = reflect_index(np.arange(r, r + plan.patch), plan.height)
    cols = reflect_index(np.arange(c, c + plan.patch), plan.width)
    return image[rows][:, cols]


def covering_origins(plan: TilePlan, row, col):
    """Origins of every patch containing original pixel ``(row, col)``."""
    rs = [r for r in plan.row_origins if r <= row < r + plan.patch]
    cs = [c for c in plan.col_origins if c <= col < c + plan.patch]
    return [(r, c) for r in rs for c in cs]


def _axis_counts(origins, patch, n):
    counts = np.zeros(n, dtype=np.int64)
    for o in origins:
        counts[o:min(o + patch, n)] += 1
    return counts


def coverage_count(plan: TilePlan, height=None, width=None):
    h = plan.height if height is None else height
    w = plan.width if width is None else width
    rows = _axis_counts(plan.row_origins, plan.patch, h)
    cols = _axis_counts(plan.col_origins, plan.patch, w)
    return np.outer(rows, cols)
