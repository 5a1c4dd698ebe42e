#!/usr/bin/env python3
"""
Pixel-Space Geometry Module

Boxes, points and masks in image coordinates (origin top-left) together
with the exact overlap and distance computations the reward engine and
the metrics rely on.

Conventions:
- Box corners are inclusive: a box (x1, y1, x2, y2) covers
  (x2 - x1 + 1) * (y2 - y1 + 1) pixels. With this convention
  mask_to_box and rasterize_box are exact inverses.
- Centroids are rounded to the nearest integer, ties away from zero.
- Masks are stored row-major as (height, width) float64 arrays and are
  never mutated after construction.

Mask files are 8-bit PGM read and written with Pillow, foreground 255 and
background 0; on read any value >= 128 (of 255) counts as foreground.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .errors import EngineError

BINARY_THRESHOLD = 128 / 255


class GeometryError(EngineError):
    """Base class for geometry errors"""
    pass


class InvalidBox(GeometryError):
    """Raised when box coordinates violate the Box invariants"""
    pass


class InvalidPoint(GeometryError):
    """Raised when point coordinates are negative or not integers"""
    pass


class InvalidMask(GeometryError):
    """Raised when mask dimensions or values are invalid"""
    pass


class EmptyMask(GeometryError):
    """Raised when a mask has no foreground pixel"""

    def __init__(self, message: str = "mask has no foreground pixel", target_index=None):
        super().__init__(message)
        self.target_index = target_index


class OutOfBounds(GeometryError):
    """Raised when a box does not fit inside the requested image"""
    pass


class PgmFormatError(GeometryError):
    """Raised when a mask file is not a valid 8-bit binary PGM"""
    pass


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, (bool, np.bool_))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with inclusive integer corners."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(_is_int(c) for c in coords):
            raise InvalidBox(f"box coordinates must be integers: {coords}")
        if min(coords) < 0:
            raise InvalidBox(f"box coordinates must be non-negative: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidBox(f"box corners out of order: {coords}")
        for name, value in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, int(value))

    @property
    def width(self) -> int:
        return self.x2 - self.x1 + 1

    @property
    def height(self) -> int:
        return self.y2 - self.y1 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, point: "PointXY") -> bool:
        return self.x1 <= point.x <= self.x2 and self.y1 <= point.y <= self.y2

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class PointXY:
    """Integer pixel coordinate."""

    x: int
    y: int

    def __post_init__(self):
        if not (_is_int(self.x) and _is_int(self.y)):
            raise InvalidPoint(f"point coordinates must be integers: ({self.x}, {self.y})")
        if self.x < 0 or self.y < 0:
            raise InvalidPoint(f"point coordinates must be non-negative: ({self.x}, {self.y})")
        object.__setattr__(self, "x", int(self.x))
        object.__setattr__(self, "y", int(self.y))

    def as_list(self) -> list:
        return [self.x, self.y]


@dataclass(frozen=True, eq=False)
class MaskGrid:
    """
    Row-major grid of non-negative intensities.

    Binary masks hold values in {0, 1}; saliency predictions may hold any
    non-negative real values. The backing array is read-only.
    """

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        if not (_is_int(self.width) and _is_int(self.height)) or self.width <= 0 or self.height <= 0:
            raise InvalidMask(f"mask dimensions must be positive integers: {self.width}x{self.height}")
        array = np.array(self.values, dtype=np.float64)
        if array.size != self.width * self.height:
            raise InvalidMask(
                f"mask has {array.size} values, expected {self.width * self.height}"
            )
        array = array.reshape(self.height, self.width)
        if not np.all(np.isfinite(array)) or np.any(array < 0):
            raise InvalidMask("mask values must be finite and non-negative")
        array.setflags(write=False)
        object.__setattr__(self, "values", array)

    @classmethod
    def from_array(cls, array) -> "MaskGrid":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2:
            raise InvalidMask(f"mask array must be 2-D, got shape {array.shape}")
        height, width = array.shape
        return cls(width=int(width), height=int(height), values=array)

    @classmethod
    def zeros(cls, width: int, height: int) -> "MaskGrid":
        return cls(width=width, height=height, values=np.zeros((height, width)))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def foreground(self) -> np.ndarray:
        """Boolean array of foreground pixels (values > 0)."""
        return self.values > 0

    def binarize(self, threshold: float = BINARY_THRESHOLD) -> "MaskGrid":
        """Binary copy with 1 where the intensity is at least threshold."""
        return MaskGrid.from_array((self.values >= threshold).astype(np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    __hash__ = None


# ============================================================================
# BOX AND POINT OPERATIONS
# ============================================================================

def box_intersection_area(a: Box, b: Box) -> int:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1) + 1
    ih = min(a.y2, b.y2) - max(a.y1, b.y1) + 1
    if iw <= 0 or ih <= 0:
        return 0
    return iw * ih


def box_iou(a: Box, b: Box) -> float:
    """
    Intersection over union with the inclusive pixel-area convention.

    Args:
        a: First box
        b: Second box

    Returns:
        float: |a ∩ b| / |a ∪ b| in [0, 1]; 0.0 for disjoint boxes
    """
    inter = box_intersection_area(a, b)
    if inter == 0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


def box_l1(a: Box, b: Box) -> int:
    """Sum of absolute corner coordinate differences."""
    return abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2)


def point_l1(a: PointXY, b: PointXY) -> int:
    """Manhattan distance between two points."""
    return abs(a.x - b.x) + abs(a.y - b.y)


def box_center(box: Box) -> PointXY:
    """Centre pixel of a box, using the same rounding as mask_centroid."""
    return PointXY(
        _round_half_away(box.x1 + box.x2, 2),
        _round_half_away(box.y1 + box.y2, 2),
    )


# ============================================================================
# MASK OPERATIONS
# ============================================================================

def _round_half_away(numerator: int, denominator: int) -> int:
    # exact integer rounding of numerator/denominator for non-negative values
    return (2 * numerator + denominator) // (2 * denominator)


def _binary_foreground(mask: MaskGrid) -> np.ndarray:
    if not mask.is_binary:
        raise InvalidMask("operation requires a binary mask")
    return mask.foreground()


def mask_to_box(mask: MaskGrid) -> Box:
    """
    Tightest box covering all foreground pixels.

    Raises:
        EmptyMask: If the mask has no foreground pixel
        InvalidMask: If the mask is not binary
    """
    fg = _binary_foreground(mask)
    ys, xs = np.nonzero(fg)
    if xs.size == 0:
        raise EmptyMask()
    return Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def mask_centroid(mask: MaskGrid) -> PointXY:
    """
    Mean foreground coordinate, rounded half away from zero.

    Raises:
        EmptyMask: If the mask has no foreground pixel
        InvalidMask: If the mask is not binary
    """
    fg = _binary_foreground(mask)
    ys, xs = np.nonzero(fg)
    count = int(xs.size)
    if count == 0:
        raise EmptyMask()
    return PointXY(
        _round_half_away(int(xs.sum()), count),
        _round_half_away(int(ys.sum()), count),
    )


def rasterize_box(box: Box, width: int, height: int) -> MaskGrid:
    """
    Binary mask that is 1 exactly on the pixels covered by the box.

    Raises:
        OutOfBounds: If the box does not fit inside width x height
    """
    if width <= 0 or height <= 0:
        raise OutOfBounds(f"image size must be positive: {width}x{height}")
    if box.x2 >= width or box.y2 >= height:
        raise OutOfBounds(f"box {box.as_list()} exceeds image {width}x{height}")
    values = np.zeros((height, width), dtype=np.float64)
    values[box.y1:box.y2 + 1, box.x1:box.x2 + 1] = 1.0
    return MaskGrid(width=width, height=height, values=values)


# ============================================================================
# PGM I/O
# ============================================================================

def read_pgm(path: Union[str, Path], binarize: bool = True) -> MaskGrid:
    """
    Read an 8-bit grayscale PGM mask.

    Pillow rescales files whose maxval is below 255, so intensities are
    always read on a 0..255 scale.

    Args:
        path: File path
        binarize: If True, threshold at 128/255 into {0, 1}; otherwise
            return intensities scaled to [0, 1]

    Returns:
        MaskGrid: The decoded mask

    Raises:
        PgmFormatError: If the file is missing, truncated, not a PGM or
            not 8-bit grayscale
    """
    try:
        with Image.open(path) as image:
            image.load()
            if image.format != "PPM" or image.mode != "L":
                raise PgmFormatError(f"{path}: expected an 8-bit PGM, got {image.format} mode {image.mode}")
            pixels = np.asarray(image, dtype=np.float64)
    except (OSError, ValueError, SyntaxError) as e:
        raise PgmFormatError(f"cannot read {path}: {e}") from e

    height, width = pixels.shape
    if binarize:
        values = (pixels >= 128).astype(np.float64)
    else:
        values = pixels / 255.0
    return MaskGrid(width=width, height=height, values=values)


def write_pgm(path: Union[str, Path], mask: MaskGrid) -> None:
    """
    Write a mask as an 8-bit binary PGM.

    Binary masks are written as 0/255; real-valued masks are scaled so
    that 1.0 maps to 255 and clipped above.
    """
    scaled = np.clip(np.rint(mask.values * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scaled).save(path, format="PPM")
