"""Multi-scale dense patch grids and pixel extraction."""

from dataclasses import dataclass

import numpy as np

from .errors import OutOfBoundsError

DEFAULT_SIDES = (16, 24, 32, 40)
DEFAULT_OVERLAP = 0.5


@dataclass(frozen=True)
class PatchConfig:
    """Grid parameters: square side lengths and fractional overlap."""

    sides: tuple[int, ...] = DEFAULT_SIDES
    overlap: float = DEFAULT_OVERLAP

    def __post_init__(self):
        if not self.sides or any(s < 1 for s in self.sides):
            raise ValueError("sides must be a non-empty tuple of positive ints")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")


@dataclass(frozen=True)
class PatchGeometry:
    """Top-left corner, side length, and scale index of one square patch."""

    x: int
    y: int
    side: int
    scale_index: int = 0


@dataclass
class Patch:
    geometry: PatchGeometry
    pixels: np.ndarray
    source_image_id: str = ""


def grid_stride(side: int, overlap: float) -> int:
    """Stride between neighboring patches: round(side * (1 - overlap)).

    Clamped to at least one pixel so extreme overlaps cannot stall the grid.
    """
    return max(1, int(round(side * (1.0 - overlap))))


def axis_positions(dim: int, side: int, stride: int) -> range:
    """Start offsets along one axis; empty when the patch does not fit."""
    if dim < side:
        return range(0)
    return range(0, dim - side + 1, stride)


def sample_grid(width: int, height: int,
                sides: tuple[int, ...] = DEFAULT_SIDES,
                overlap: float = DEFAULT_OVERLAP) -> list[PatchGeometry]:
    """Dense grid of patch geometries over all scales.

    Scales that do not fit contribute nothing; the list is ordered by
    (scale_index, y, x) and every patch lies fully inside the image.
    """
    config = PatchConfig(tuple(sides), overlap)
    geometries = []
    for scale_index, side in enumerate(config.sides):
        stride = grid_stride(side, config.overlap)
        for y in axis_positions(height, side, stride):
            for x in axis_positions(width, side, stride):
                geometries.append(PatchGeometry(x, y, side, scale_index))
    return geometries


def extract(image: np.ndarray, geometry: PatchGeometry,
            source_image_id: str = "") -> Patch:
    """Copy the pixel block under a geometry out of an image."""
    h, w = image.shape[:2]
    x, y, side = geometry.x, geometry.y, geometry.side
    if x < 0 or y < 0 or x + side > w or y + side > h:
        raise OutOfBoundsError(
            f"patch ({x}, {y}, side {side}) exceeds image {w}x{h}")
    return Patch(geometry, image[y:y + side, x:x + side].copy(), source_image_id)
