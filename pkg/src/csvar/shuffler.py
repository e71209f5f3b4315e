"""Variance-guided block partitioning and seeded block shuffling.

Randomness scheme
-----------------
Every region permutation is drawn from a 64-bit seed produced by
:func:`derive_region_seed`::

    h = mix64(master_seed + GAMMA)
    for v in (image_id, epoch, region_row, region_col, channel):
        h = mix64((h + GAMMA) ^ v)

where ``mix64`` is the SplitMix64 finaliser and all arithmetic is mod 2**64.
Each step is a bijection of ``h`` for a fixed ``v`` and of ``v`` for a fixed
``h``, so two tuples that differ in exactly one field never share a seed.

A permutation of ``n`` blocks is a Fisher-Yates shuffle of ``0..n-1``: for
``i = n-1 .. 1`` draw ``r_k = mix64(seed + k * GAMMA)`` with ``k = n - i``,
take ``j = r_k mod (i + 1)`` and swap positions ``i`` and ``j``. Output block
``p`` receives input block ``perm[p]``. Spatial-only mode draws one
permutation per region with ``channel=0``; channel-wise mode draws one per
channel plane, so a single-channel image shuffles identically in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from csvar.errors import BlockSizeMismatch, InputError, InvalidOverride, NonDivisibleDimensions
from csvar.tensor import VarianceMap, as_image, region_size, region_variances

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

SPATIAL = "spatial-only"
CHANNEL = "channel-wise"
MODES = (SPATIAL, CHANNEL)


def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_region_seed(master_seed: int, image_id: int, epoch: int,
                       region_row: int, region_col: int, channel: int) -> int:
    h = _mix64(master_seed + GAMMA)
    for v in (image_id, epoch, region_row, region_col, channel):
        h = _mix64(((h + GAMMA) & MASK64) ^ (v & MASK64))
    return h


def derive_region_seeds(master_seed: int, image_ids, epoch, rows, cols, channel) -> np.ndarray:
    """Broadcasting version of :func:`derive_region_seed`; returns uint64."""
    parts = np.broadcast_arrays(*(np.asarray(v, dtype=np.int64) for v in (image_ids, epoch, rows, cols, channel)))
    gamma = np.uint64(GAMMA)
    h = np.full(parts[0].shape, _mix64(master_seed + GAMMA), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for v in parts:
            h = _mix64_np((h + gamma) ^ v.astype(np.uint64))
    return h


def fisher_yates(n: int, seed: int) -> np.ndarray:
    """Reference scalar implementation of the block permutation."""
    perm = list(range(n))
    for k, i in enumerate(range(n - 1, 0, -1), start=1):
        j = _mix64(seed + k * GAMMA) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def fisher_yates_batch(n: int, seeds) -> np.ndarray:
    """One permutation of ``range(n)`` per seed, shape ``(len(seeds), n)``."""
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    m = seeds.size
    perm = np.tile(np.arange(n, dtype=np.int64), (m, 1))
    rows = np.arange(m)
    with np.errstate(over="ignore"):
        for k, i in enumerate(range(n - 1, 0, -1), start=1):
            r = _mix64_np(seeds + np.uint64((k * GAMMA) & MASK64))
            j = (r % np.uint64(i + 1)).astype(np.int64)
            tmp = perm[rows, j]
            perm[rows, j] = perm[:, i]
            perm[:, i] = tmp
    return perm


@dataclass(frozen=True)
class ShuffleConfig:
    """Everything needed to reproduce one obfuscated variant.

    ``dp_sigma`` selects the Gaussian-noise baseline instead of shuffling; it
    requires ``mode=None``. Use :meth:`gaussian` to build such a config.
    """

    master_seed: int
    epoch: int = 0
    mode: str | None = CHANNEL
    block_size_override: int | None = None
    dp_sigma: float | None = None

    def __post_init__(self):
        if self.epoch < 0:
            raise InputError("epoch must be non-negative")
        if self.dp_sigma is not None:
            if self.mode is not None:
                raise InputError("dp_sigma cannot be combined with a shuffle mode")
            if self.dp_sigma < 0:
                raise InputError("dp_sigma must be non-negative")
            if self.block_size_override is not None:
                raise InputError("block_size_override only applies to shuffling")
        elif self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        bs = self.block_size_override
        if bs is not None and (bs < 1 or bs & (bs - 1)):
            raise InvalidOverride(f"block size {bs} is not a power of two")

    @classmethod
    def gaussian(cls, master_seed: int, sigma: float, epoch: int = 0) -> "ShuffleConfig":
        return cls(master_seed, epoch, mode=None, dp_sigma=sigma)

    def at_epoch(self, epoch: int) -> "ShuffleConfig":
        return replace(self, epoch=epoch)

    @property
    def is_gaussian(self) -> bool:
        return self.dp_sigma is not None


@dataclass(frozen=True)
class PartitionPlan:
    region_size: int
    block_sizes: np.ndarray


def _check_override(size: int, override: int | None) -> None:
    if override is not None and (override < 1 or size % override):
        raise InvalidOverride(f"block size {override} does not divide region size {size}")


def plan_block_sizes(variances: np.ndarray, medians, size: int, override: int | None = None) -> np.ndarray:
    """Block size per region; ``variances`` is ``(..., rows, cols)``."""
    _check_override(size, override)
    variances = np.asarray(variances)
    if override is not None:
        return np.full(variances.shape, override, dtype=np.int64)
    med = np.asarray(medians, dtype=np.float64)[..., None, None]
    fine = max(size // 4, 1)
    coarse = max(size // 2, 1)
    return np.where(variances > med, fine, coarse).astype(np.int64)


def plan_partition(vmap: VarianceMap, size: int, override: int | None = None) -> PartitionPlan:
    if size < 2 or size & (size - 1):
        raise InputError(f"region size {size} must be a power of two >= 2")
    return PartitionPlan(size, plan_block_sizes(vmap.values, vmap.median, size, override))


def _permute_blocks(regions: np.ndarray, block_size: int, perms: np.ndarray) -> np.ndarray:
    """Permute BS x BS blocks inside each region.

    ``regions`` is ``(M, S, S, K)`` and ``perms`` is ``(M, nblocks)``; all K
    trailing channels move together.
    """
    m, s, _, k = regions.shape
    g = s // block_size
    blocks = regions.reshape(m, g, block_size, g, block_size, k).transpose(0, 1, 3, 2, 4, 5)
    blocks = blocks.reshape(m, g * g, block_size, block_size, k)
    moved = np.take_along_axis(blocks, perms[:, :, None, None, None], axis=1)
    moved = moved.reshape(m, g, g, block_size, block_size, k).transpose(0, 1, 3, 2, 4, 5)
    return moved.reshape(m, s, s, k)


def _check_region(region: np.ndarray, block_size: int) -> np.ndarray:
    region = np.asarray(region)
    if region.ndim == 2:
        region = region[:, :, None]
    s = region.shape[0]
    if region.ndim != 3 or region.shape[1] != s:
        raise BlockSizeMismatch(f"region must be square, got {region.shape}")
    if block_size < 1 or s % block_size:
        raise BlockSizeMismatch(f"block size {block_size} does not divide region size {s}")
    return region


def spatial_shuffle_region(region: np.ndarray, block_size: int, seed: int) -> np.ndarray:
    region = _check_region(region, block_size)
    n = (region.shape[0] // block_size) ** 2
    perm = fisher_yates_batch(n, [seed])
    return _permute_blocks(region[None], block_size, perm)[0]


def channel_shuffle_region(region: np.ndarray, block_size: int, seeds) -> np.ndarray:
    """Permute each channel plane's blocks with its own seed."""
    region = _check_region(region, block_size)
    c = region.shape[2]
    seeds = list(seeds)
    if len(seeds) != c:
        raise InputError(f"need {c} seeds, got {len(seeds)}")
    n = (region.shape[0] // block_size) ** 2
    perms = fisher_yates_batch(n, seeds)
    planes = region.transpose(2, 0, 1)[..., None]
    return _permute_blocks(planes, block_size, perms)[..., 0].transpose(1, 2, 0)


def shuffle_batch(images: np.ndarray, config: ShuffleConfig, image_ids=None) -> np.ndarray:
    """Apply the configured shuffle to a batch ``(N, H, W, C)`` of images.

    Produces exactly what :func:`csvar_shuffle` would for each image alone;
    batching only vectorises the work.
    """
    if config.is_gaussian:
        raise InputError("config selects the Gaussian baseline; use gaussian_obfuscate")
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise InputError("expected a uint8 batch of shape (N, H, W, C)")
    n, h, w, c = images.shape
    ids = np.arange(n) if image_ids is None else np.asarray(image_ids, dtype=np.int64).reshape(-1)
    if ids.size != n:
        raise InputError("one image id per image required")
    s = region_size(h, w)
    if h % s or w % s:
        raise NonDivisibleDimensions(f"{h}x{w} image needs padding to a multiple of {s}")
    _check_override(s, config.block_size_override)
    rows, cols = h // s, w // s

    variances = region_variances(images, s)
    medians = np.median(variances.reshape(n, -1), axis=1)
    sizes = plan_block_sizes(variances, medians, s, config.block_size_override)

    regions = images.reshape(n, rows, s, cols, s, c).transpose(0, 1, 3, 2, 4, 5).copy()
    for bs in np.unique(sizes):
        bs = int(bs)
        if bs == s:
            continue
        img_i, row_i, col_i = np.nonzero(sizes == bs)
        sub = regions[img_i, row_i, col_i]
        nblocks = (s // bs) ** 2
        if config.mode == SPATIAL:
            seeds = derive_region_seeds(config.master_seed, ids[img_i], config.epoch, row_i, col_i, 0)
            sub = _permute_blocks(sub, bs, fisher_yates_batch(nblocks, seeds))
        else:
            for ch in range(c):
                seeds = derive_region_seeds(config.master_seed, ids[img_i], config.epoch, row_i, col_i, ch)
                plane = np.ascontiguousarray(sub[..., ch:ch + 1])
                sub[..., ch:ch + 1] = _permute_blocks(plane, bs, fisher_yates_batch(nblocks, seeds))
        regions[img_i, row_i, col_i] = sub
    return regions.transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


def csvar_shuffle(image: np.ndarray, config: ShuffleConfig, image_id: int = 0) -> np.ndarray:
    img = as_image(image)
    return shuffle_batch(img[None], config, [image_id])[0]


def gaussian_obfuscate(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add N(0, sigma^2) noise per value, round and clamp to [0, 255].

    Works on a single image or any batch of uint8 values.
    """
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    arr = np.asarray(image)
    if sigma == 0:
        return arr.astype(np.uint8, copy=True)
    rng = np.random.default_rng(seed)
    noisy = arr.astype(np.float64) + rng.normal(0.0, sigma, size=arr.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def obfuscate(images: np.ndarray, config: ShuffleConfig, image_ids=None) -> np.ndarray:
    """Dispatch a batch to shuffling or the Gaussian baseline.

    Gaussian noise is seeded per image from ``(master_seed, image_id, epoch)``
    so results do not depend on batch composition.
    """
    images = np.asarray(images)
    if not config.is_gaussian:
        return shuffle_batch(images, config, image_ids)
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids).reshape(-1)
    out = np.empty_like(images)
    for k, (img, i) in enumerate(zip(images, ids)):
        out[k] = gaussian_obfuscate(img, config.dp_sigma,
                                    derive_region_seed(config.master_seed, int(i), config.epoch, 0, 0, 0))
    return out
