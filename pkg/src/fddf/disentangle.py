"""Fixed preprocessing that splits one RGB image into four branch inputs.

* moire:    level-1 Haar detail bands (LH, HL, HH) of the luma plane
* edge:     Gaussian-denoised luma followed by a 4-neighbour Laplacian
* artifact: full-range BT.601 YCrCb
* other:    the RGB image itself, scaled to [0, 1]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from fddf.errors import ImageError, ParityError, ThresholdError

BRANCHES = ("moire", "edge", "artifact", "other")

MOIRE_VAR_FLOOR = 1e-6
GAUSSIAN_SIZE = 5
GAUSSIAN_SIGMA = 1.0
LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit RGB raster stored as an ``(H, W, 3)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"expected an (H, W, 3) array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ImageError(f"expected uint8 pixels, got {px.dtype}")
        h, w = px.shape[:2]
        if h < 8 or w < 8:
            raise ImageError(f"image must be at least 8x8, got {w}x{h}")
        if h % 2 or w % 2:
            raise ImageError(f"image dimensions must be even, got {w}x{h} (pad with pad_to_even)")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, RgbImage) and np.array_equal(self.pixels, other.pixels)

    @classmethod
    def solid(cls, width: int, height: int, rgb) -> "RgbImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = np.asarray(rgb, dtype=np.uint8)
        return cls(px)


def pad_to_even(pixels: np.ndarray) -> np.ndarray:
    """Replicate the last row/column so both dimensions are even."""
    h, w = pixels.shape[:2]
    return np.pad(pixels, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")


@dataclass(frozen=True)
class Subbands:
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray


@dataclass(frozen=True)
class BranchInputs:
    moire: np.ndarray
    edge: np.ndarray
    artifact: np.ndarray
    other: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BRANCHES}


def to_grayscale(img: RgbImage) -> np.ndarray:
    """BT.601 luma in [0, 255].

    Integer weights keep neutral grays exact: (v, v, v) maps to v.
    """
    px = img.pixels.astype(np.int64)
    return (299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2]) / 1000.0


def haar_dwt_level1(plane: np.ndarray) -> tuple[np.ndarray, Subbands]:
    """Orthonormal single-level Haar analysis on 2x2 blocks ``[a b; c d]``."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ParityError(f"Haar DWT needs even dimensions, got {h}x{w}")
    a = plane[0::2, 0::2]
    b = plane[0::2, 1::2]
    c = plane[1::2, 0::2]
    d = plane[1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2  # horizontal detail
    hl = (a + b - c - d) / 2  # vertical detail
    hh = (a - b - c + d) / 2
    return ll, Subbands(lh, hl, hh)


def haar_idwt_level1(ll: np.ndarray, bands: Subbands) -> np.ndarray:
    lh, hl, hh = bands.lh, bands.hl, bands.hh
    h, w = ll.shape
    out = np.empty((2 * h, 2 * w), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def detail_energy(plane: np.ndarray) -> float:
    """Mean squared Haar detail coefficient (LH + HL + HH) per pixel."""
    _, bands = haar_dwt_level1(plane)
    total = np.sum(bands.lh**2) + np.sum(bands.hl**2) + np.sum(bands.hh**2)
    return float(total / np.asarray(plane).size)


def moire_input(img: RgbImage) -> np.ndarray:
    _, bands = haar_dwt_level1(to_grayscale(img) / 255.0)
    stack = np.stack([bands.lh, bands.hl, bands.hh])
    std = np.sqrt(max(float(stack.var()), MOIRE_VAR_FLOOR))
    return ((stack - stack.mean()) / std).astype(np.float32)


def gaussian_kernel(size: int = GAUSSIAN_SIZE, sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def laplacian(plane: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian with edge-replicate padding.

    Summed as ``(up + down) + (left + right) - 4 * centre`` so the result is
    exactly zero on constant planes.
    """
    p = np.pad(plane, 1, mode="edge")
    vert = p[:-2, 1:-1] + p[2:, 1:-1]
    horiz = p[1:-1, :-2] + p[1:-1, 2:]
    return (vert + horiz) - 4.0 * plane


def log_response(plane: np.ndarray) -> np.ndarray:
    """Gaussian blur (edge-replicate) followed by the Laplacian, same units as the input."""
    blurred = ndimage.correlate(np.asarray(plane, dtype=np.float64), gaussian_kernel(), mode="nearest")
    return laplacian(blurred)


def edge_input(img: RgbImage) -> np.ndarray:
    plane = log_response(to_grayscale(img)) / 255.0
    return np.repeat(plane[None].astype(np.float32), 3, axis=0)


def ycrcb_planes(img: RgbImage) -> np.ndarray:
    """Unscaled ``[Y, Cr, Cb]`` in [0, 255], clamped."""
    px = img.pixels.astype(np.float64)
    y = to_grayscale(img)
    cr = (px[..., 0] - y) * 0.713 + 128.0
    cb = (px[..., 2] - y) * 0.564 + 128.0
    return np.clip(np.stack([y, cr, cb]), 0.0, 255.0)


def rgb_to_ycrcb(img: RgbImage) -> np.ndarray:
    return (ycrcb_planes(img) / 255.0).astype(np.float32)


def highlight_mask(ycrcb: np.ndarray, diffuse_max: float = 170, specular_min: float = 200) -> np.ndarray:
    """Binary mask of specular pixels (``Y >= specular_min``).

    Accepts either the unscaled [0, 255] planes or the [0, 1] tensor from
    :func:`rgb_to_ycrcb`; the latter is detected by its range.
    """
    if not 0 <= diffuse_max < specular_min <= 255:
        raise ThresholdError(
            f"thresholds must satisfy 0 <= diffuse_max < specular_min <= 255, got {diffuse_max}, {specular_min}"
        )
    y = np.asarray(ycrcb, dtype=np.float64)[0]
    if y.max() <= 1.0:
        # float32 round trip through /255 can land a hair under the threshold
        y = np.round(y * 255.0, 3)
    return (y >= specular_min).astype(np.uint8)


def highlight_fraction(img: RgbImage, specular_min: float = 200) -> float:
    return float(highlight_mask(ycrcb_planes(img), specular_min=specular_min).mean())


def prepare_branch_inputs(img: RgbImage) -> BranchInputs:
    other = np.ascontiguousarray(img.pixels.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)
    return BranchInputs(
        moire=moire_input(img),
        edge=edge_input(img),
        artifact=rgb_to_ycrcb(img),
        other=other,
    )
