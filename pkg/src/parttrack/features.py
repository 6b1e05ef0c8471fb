"""Cell-grid appearance features and the multi-scale feature pyramid.

Per cell we concatenate HOG (31), uniform LBP (59) and, for color input,
a joint RGB histogram (64), so every terminal template correlates against
a single channel-stacked map.  Partial cells at image borders are dropped;
gradients use replicated borders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

HOG_DIM = 31
LBP_DIM = 59
COLOR_DIM = 64

EPS = 1e-9


@dataclass(frozen=True)
class FeatureConfig:
    cell_size: int = 4
    interval: int = 6
    hog: bool = True
    lbp: bool = True
    color: bool = True   # auto-disabled on single-channel input

    def channels(self, is_color: bool) -> int:
        c = 0
        if self.hog:
            c += HOG_DIM
        if self.lbp:
            c += LBP_DIM
        if self.color and is_color:
            c += COLOR_DIM
        if c == 0:
            raise ValueError("no features enabled")
        return c


@dataclass
class FeatureMap:
    data: np.ndarray      # (cells_h, cells_w, channels)
    scale: float          # image pixels per cell-unit / cell_size at this level

    @property
    def cells_h(self):
        return self.data.shape[0]

    @property
    def cells_w(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class FeaturePyramid:
    levels: list[FeatureMap]
    cell_size: int
    interval: int

    def scale(self, level: int) -> float:
        return self.levels[level].scale


def _gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 3:
        return cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
    return image


# ---------------------------------------------------------------------------
# HOG (18 contrast-sensitive + 9 insensitive orientations + 4 block-energy
# channels, block-normalized with truncation at 0.2)

_UU = np.array([math.cos(k * math.pi / 9) for k in range(9)])
_VV = np.array([math.sin(k * math.pi / 9) for k in range(9)])


def hog_cells(image: np.ndarray, cell_size: int = 4) -> np.ndarray:
    img = _gray(image).astype(np.float64)
    H, W = img.shape
    ch, cw = H // cell_size, W // cell_size
    if ch < 1 or cw < 1:
        raise ValueError("image smaller than one cell")
    img = img[:ch * cell_size, :cw * cell_size]

    padded = cv2.copyMakeBorder(img, 1, 1, 1, 1, cv2.BORDER_REPLICATE)
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    mag = np.sqrt(gx * gx + gy * gy)

    # snap to one of 18 contrast-sensitive orientations
    dots = gx[..., None] * _UU + gy[..., None] * _VV          # (H, W, 9)
    best9 = np.argmax(np.abs(dots), axis=2)
    signed = np.take_along_axis(dots, best9[..., None], axis=2)[..., 0]
    ori18 = np.where(signed >= 0, best9, best9 + 9)

    # accumulate per-cell orientation histograms (hard assignment)
    cell_idx = (np.arange(ch * cell_size) // cell_size)[:, None] * cw \
        + (np.arange(cw * cell_size) // cell_size)[None, :]
    flat = (cell_idx * 18 + ori18).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=ch * cw * 18)
    hist = hist.reshape(ch, cw, 18)

    insens = hist[..., :9] + hist[..., 9:]
    energy = np.sum(insens * insens, axis=2)

    # block energies: 2x2 cell neighborhoods around each of the 4 corners
    epad = np.pad(energy, 1, mode="edge")
    blocks = np.empty((ch, cw, 4))
    s = epad[:-1, :-1] + epad[:-1, 1:] + epad[1:, :-1] + epad[1:, 1:]
    blocks[..., 0] = s[:-1, :-1]   # top-left block
    blocks[..., 1] = s[:-1, 1:]    # top-right
    blocks[..., 2] = s[1:, :-1]    # bottom-left
    blocks[..., 3] = s[1:, 1:]     # bottom-right
    norm = 1.0 / np.sqrt(blocks + EPS)

    feat = np.zeros((ch, cw, HOG_DIM))
    tsum = np.zeros((ch, cw, 4))
    for b in range(4):
        ts = np.minimum(hist * norm[..., b:b + 1], 0.2)
        ti = np.minimum(insens * norm[..., b:b + 1], 0.2)
        feat[..., :18] += 0.5 * ts
        feat[..., 18:27] += 0.5 * ti
        tsum[..., b] = ti.sum(axis=2)
    feat[..., 27:] = 0.2357 * tsum
    return feat


# ---------------------------------------------------------------------------
# Uniform LBP, 8 neighbors at radius 1, 59-bin histogram per cell

def _uniform_lut() -> np.ndarray:
    lut = np.empty(256, dtype=np.int64)
    nxt = 0
    for code in range(256):
        bits = [(code >> k) & 1 for k in range(8)]
        transitions = sum(bits[k] != bits[(k + 1) % 8] for k in range(8))
        if transitions <= 2:
            lut[code] = nxt
            nxt += 1
        else:
            lut[code] = -1
    lut[lut == -1] = nxt  # single shared non-uniform bin
    return lut


_LBP_LUT = _uniform_lut()
LBP_ZERO_BIN = int(_LBP_LUT[0])
LBP_NONUNIFORM_BIN = int(_LBP_LUT.max())

_LBP_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, 1),
                (1, 1), (1, 0), (1, -1), (0, -1)]


def lbp_cells(image: np.ndarray, cell_size: int = 4) -> np.ndarray:
    img = _gray(image).astype(np.float64)
    H, W = img.shape
    ch, cw = H // cell_size, W // cell_size
    if ch < 1 or cw < 1:
        raise ValueError("image smaller than one cell")
    img = img[:ch * cell_size, :cw * cell_size]

    padded = cv2.copyMakeBorder(img, 1, 1, 1, 1, cv2.BORDER_REPLICATE)
    code = np.zeros(img.shape, dtype=np.int64)
    for k, (dy, dx) in enumerate(_LBP_OFFSETS):
        neigh = padded[1 + dy:1 + dy + img.shape[0], 1 + dx:1 + dx + img.shape[1]]
        code |= (neigh > img).astype(np.int64) << k
    bins = _LBP_LUT[code]

    cell_idx = (np.arange(ch * cell_size) // cell_size)[:, None] * cw \
        + (np.arange(cw * cell_size) // cell_size)[None, :]
    flat = cell_idx * LBP_DIM + bins
    hist = np.bincount(flat.ravel(), minlength=ch * cw * LBP_DIM).astype(np.float64)
    hist = hist.reshape(ch, cw, LBP_DIM)
    hist /= cell_size * cell_size
    return hist


# ---------------------------------------------------------------------------
# Joint RGB histogram, 4 bins per channel

def color_cells(image: np.ndarray, cell_size: int = 4) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("color features need a 3-channel image")
    H, W = image.shape[:2]
    ch, cw = H // cell_size, W // cell_size
    if ch < 1 or cw < 1:
        raise ValueError("image smaller than one cell")
    img = image[:ch * cell_size, :cw * cell_size]

    q = np.minimum(img.astype(np.int64) >> 6, 3)      # 256 / 4 bins
    joint = q[..., 2] * 16 + q[..., 1] * 4 + q[..., 0]  # BGR input, RGB-major bin

    cell_idx = (np.arange(ch * cell_size) // cell_size)[:, None] * cw \
        + (np.arange(cw * cell_size) // cell_size)[None, :]
    flat = cell_idx * COLOR_DIM + joint
    hist = np.bincount(flat.ravel(), minlength=ch * cw * COLOR_DIM).astype(np.float64)
    hist = hist.reshape(ch, cw, COLOR_DIM)
    hist /= cell_size * cell_size
    return hist


# ---------------------------------------------------------------------------

def compute_feature_map(image: np.ndarray, config: FeatureConfig, scale: float) -> FeatureMap:
    is_color = image.ndim == 3 and image.shape[2] == 3
    parts = []
    if config.hog:
        parts.append(hog_cells(image, config.cell_size))
    if config.lbp:
        parts.append(lbp_cells(image, config.cell_size))
    if config.color and is_color:
        parts.append(color_cells(image, config.cell_size))
    data = np.ascontiguousarray(np.concatenate(parts, axis=2))
    if not np.isfinite(data).all():
        raise ValueError("non-finite feature values")
    return FeatureMap(data=data, scale=scale)


def build_pyramid(image: np.ndarray, config: FeatureConfig = FeatureConfig(),
                  min_cells: tuple[int, int] = (1, 1)) -> FeaturePyramid:
    """Multi-scale feature maps; level l is the image rescaled by 2^(-l/interval).

    Levels too small to hold a `min_cells` = (w, h) template are omitted;
    an image without a single valid level is refused.
    """
    H, W = image.shape[:2]
    mw, mh = min_cells
    levels = []
    l = 0
    while True:
        s = 2.0 ** (l / config.interval)
        h, w = int(round(H / s)), int(round(W / s))
        if h // config.cell_size < mh or w // config.cell_size < mw:
            break
        scaled = image if l == 0 else cv2.resize(image, (w, h), interpolation=cv2.INTER_AREA)
        levels.append(compute_feature_map(scaled, config, s))
        l += 1
    if not levels:
        raise ValueError("image too small for a single %dx%d-cell level" % (mw, mh))
    return FeaturePyramid(levels=levels, cell_size=config.cell_size, interval=config.interval)


def deformation_feature(dx: float, dy: float) -> np.ndarray:
    return np.array([dx * dx, dx, dy * dy, dy], dtype=np.float64)


def crop_window(level: FeatureMap, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Row-major flattening of a w x h-cell window at cell position (x, y)."""
    if x < 0 or y < 0 or y + h > level.cells_h or x + w > level.cells_w:
        raise ValueError("crop outside level bounds")
    return level.data[y:y + h, x:x + w, :].ravel().copy()
