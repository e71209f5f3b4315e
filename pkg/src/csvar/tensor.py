"""Image tensors, the region grid and per-region variance.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``dtype=uint8``
and ``C`` in ``{1, 3}``. Batches add a leading axis: ``(N, H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csvar.errors import NonDivisibleDimensions, RegionOutOfBounds, ShapeMismatch

MIN_REGION_SIZE = 2


def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as an ImageTensor and return it as a uint8 array.

    2-D input is promoted to a single channel. Values outside [0, 255] or a
    channel count other than 1 or 3 raise :class:`ShapeMismatch`.
    """
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatch(f"expected (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ShapeMismatch("pixel values must lie in [0, 255]")
        if np.issubdtype(arr.dtype, np.floating) and not np.array_equal(arr, np.round(arr)):
            raise ShapeMismatch("pixel values must be integral")
        return arr.astype(np.uint8)
    return arr.copy() if copy else arr


def region_size(height: int, width: int) -> int:
    """Side length S of the square regions for an ``height x width`` image.

    ``S = 2 ** ceil(log2(sqrt(max(H, W))))``, floored at 2.
    """
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be positive")
    m = max(height, width)
    # ceil(log2(sqrt(m))) == ceil(log2(m) / 2); integer form avoids float edge cases
    exponent = ((m - 1).bit_length() + 1) // 2
    return max(MIN_REGION_SIZE, 1 << exponent)


def reflect_pad_to_multiple(image: np.ndarray, size: int) -> np.ndarray:
    """Pad bottom and right edges by mirroring so both dims are multiples of ``size``.

    The original image stays in the top-left corner, byte for byte. Padding
    wider than the image itself falls back to repeated symmetric reflection.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    img = as_image(image)
    h, w = img.shape[:2]
    pad_h = -h % size
    pad_w = -w % size
    if pad_h == 0 and pad_w == 0:
        return img
    mode = "reflect" if pad_h < h and pad_w < w else "symmetric"
    return np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)


@dataclass(frozen=True)
class Region:
    row: int
    col: int
    y0: int
    x0: int
    size: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.size), slice(self.x0, self.x0 + self.size)


@dataclass(frozen=True)
class RegionGrid:
    region_size: int
    rows: int
    cols: int

    @property
    def regions(self) -> list[Region]:
        s = self.region_size
        return [Region(i, j, i * s, j * s, s) for i in range(self.rows) for j in range(self.cols)]

    def __len__(self) -> int:
        return self.rows * self.cols


def partition_regions(image: np.ndarray, size: int) -> RegionGrid:
    """Tile ``image`` into non-overlapping ``size x size`` regions."""
    h, w = np.shape(image)[:2]
    if size < 1 or h % size or w % size:
        raise NonDivisibleDimensions(f"{h}x{w} image is not tiled by {size}x{size} regions")
    return RegionGrid(size, h // size, w // size)


def _variance_from_block_sums(total, total_sq, npix: int, channels: int):
    # npix**2 * var == npix * sum(x^2) - sum(x)^2, exact in int64 for npix <= 2**16
    numer = (npix * total_sq - total * total).sum(axis=-1)
    return numer / float(npix * npix * channels)


def region_variance(image: np.ndarray, region: Region) -> float:
    """Channel-averaged population variance of the pixels inside ``region``."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if region.y0 < 0 or region.x0 < 0 or region.y0 + region.size > h or region.x0 + region.size > w:
        raise RegionOutOfBounds(f"{region} does not fit a {h}x{w} image")
    block = img[region.slices].astype(np.int64).reshape(-1, img.shape[2])
    return float(_variance_from_block_sums(block.sum(axis=0), (block * block).sum(axis=0),
                                           block.shape[0], block.shape[1]))


def region_variances(images: np.ndarray, size: int) -> np.ndarray:
    """Vectorised region variances.

    Accepts one image ``(H, W, C)`` or a batch ``(N, H, W, C)`` and returns an
    array of shape ``(rows, cols)`` or ``(N, rows, cols)``. Sums are taken in
    integers, so the result is the correctly rounded exact variance and equal
    variances compare equal regardless of pixel order.
    """
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    n, h, w, c = arr.shape
    if h % size or w % size:
        raise NonDivisibleDimensions(f"{h}x{w} image is not tiled by {size}x{size} regions")
    rows, cols = h // size, w // size
    blocks = arr.reshape(n, rows, size, cols, size, c).astype(np.int64)
    total = blocks.sum(axis=(2, 4))
    total_sq = (blocks * blocks).sum(axis=(2, 4))
    out = _variance_from_block_sums(total, total_sq, size * size, c)
    return out[0] if single else out


@dataclass(frozen=True)
class VarianceMap:
    values: np.ndarray
    median: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def from_values(cls, values) -> "VarianceMap":
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 2 or vals.size == 0:
            raise ShapeMismatch("variance map must be a non-empty 2-D array")
        return cls(vals, float(np.median(vals)))


def variance_map(image: np.ndarray, grid: RegionGrid) -> VarianceMap:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[0] < grid.rows * grid.region_size or img.shape[1] < grid.cols * grid.region_size:
        raise RegionOutOfBounds("grid extends past the image")
    span = img[: grid.rows * grid.region_size, : grid.cols * grid.region_size]
    return VarianceMap.from_values(region_variances(span, grid.region_size))

