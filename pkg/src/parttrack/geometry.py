"""Canonical object geometry: a fixed anisotropic warp that maps the
initial bounding box to a square template of grid_side * unit feature
cells, so that one grammar grid unit covers a constant number of cells.

All parsing and learning happen in warped coordinates; results map back
to the original frame through the inverse warp.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

DEFAULT_UNIT = 2
DEFAULT_HEADROOM = 2.0
GRID_SIDE_PIXEL_CUTOFF = 80


def grid_side_for_box(box) -> int:
    """Grid side 4 for large boxes (min side >= 80 px), else 3."""
    return 4 if min(box[2], box[3]) >= GRID_SIDE_PIXEL_CUTOFF else 3


@dataclass(frozen=True)
class CanonicalGeometry:
    grid_side: int
    unit: int                 # feature cells per grid unit
    cell_size: int
    sx: float                 # original px -> warped px
    sy: float

    @property
    def object_cells(self) -> int:
        return self.grid_side * self.unit

    @property
    def object_pixels(self) -> int:
        """Canonical object side length in warped pixels at template scale."""
        return self.object_cells * self.cell_size

    def warp_image(self, image: np.ndarray) -> np.ndarray:
        H, W = image.shape[:2]
        size = (max(1, int(round(W * self.sx))), max(1, int(round(H * self.sy))))
        return cv2.resize(image, size, interpolation=cv2.INTER_AREA
                          if self.sx < 1 else cv2.INTER_LINEAR)

    def to_warped(self, box):
        x, y, w, h = box
        return (x * self.sx, y * self.sy, w * self.sx, h * self.sy)

    def to_original(self, box):
        x, y, w, h = box
        return (x / self.sx, y / self.sy, w / self.sx, h / self.sy)


def canonical_geometry(box, cell_size: int = 4, unit: int = DEFAULT_UNIT,
                       headroom: float = DEFAULT_HEADROOM,
                       grid_side: int | None = None) -> CanonicalGeometry:
    """Fix the warp from the initial box.

    `headroom` leaves room above the template scale in the pyramid so the
    object may shrink by that factor and still be matched.
    """
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise ValueError("empty box")
    if grid_side is None:
        grid_side = grid_side_for_box(box)
    target = grid_side * unit * cell_size * headroom
    return CanonicalGeometry(grid_side=grid_side, unit=unit, cell_size=cell_size,
                             sx=target / w, sy=target / h)


def crop_and_resize(image: np.ndarray, box, out_size: tuple[int, int]) -> np.ndarray:
    """Crop `box` (x, y, w, h, may extend past the frame: replicate border)
    and resize to out_size = (width, height) pixels."""
    x, y, w, h = box
    H, W = image.shape[:2]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = int(np.ceil(x + w)), int(np.ceil(y + h))
    pl, pt = max(0, -x0), max(0, -y0)
    pr, pb = max(0, x1 - W), max(0, y1 - H)
    patch = image[max(0, y0):min(H, y1), max(0, x0):min(W, x1)]
    if patch.size == 0:
        shape = (y1 - y0, x1 - x0) + image.shape[2:]
        patch = np.zeros(shape, dtype=image.dtype)
        pl = pt = pr = pb = 0
    if pl or pt or pr or pb:
        patch = cv2.copyMakeBorder(patch, pt, pb, pl, pr, cv2.BORDER_REPLICATE)
    return cv2.resize(patch, out_size, interpolation=cv2.INTER_AREA
                      if out_size[0] < patch.shape[1] else cv2.INTER_LINEAR)
