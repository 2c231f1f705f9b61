"""Two-stage coarse-to-fine inference.

Stage 1 segments a downsampled copy of the whole volume.  Its thresholded
mask, upscaled to full resolution and dilated by a margin, decides which
fixed-size cubes of the original volume Stage 2 sees.  Stage 2 outputs are
merged by averaging overlaps; voxels outside every block stay background, so
the coarse result only ever guides and is never copied into the output.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .formats import Volume
from .tensor import ContractError, Tensor, no_grad

log = logging.getLogger(__name__)


class EmptyGuidanceWarning(UserWarning):
    """The coarse mask had no foreground, so no blocks were extracted."""


@dataclass(frozen=True)
class BlockIndex:
    origin: tuple[int, int, int]
    extent: int
    source_shape: tuple[int, int, int]

    def __post_init__(self):
        for o, n in zip(self.origin, self.source_shape):
            if o < 0 or o + self.extent > n:
                raise ContractError(f"block at {self.origin} (side {self.extent}) exceeds {self.source_shape}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.extent) for o in self.origin)

    def contains(self, voxel) -> bool:
        return all(o <= v < o + self.extent for o, v in zip(self.origin, voxel))


@dataclass(frozen=True)
class PipelineConfig:
    coarse_shape: tuple[int, int, int] = (128, 128, 64)
    block_side: int = 64
    threshold: float = 0.5
    margin: int | None = None

    @property
    def dilation(self) -> int:
        return self.block_side // 8 if self.margin is None else self.margin


# -- resampling ----------------------------------------------------------------

def _linear_weights(n_in: int, n_out: int):
    """Half-pixel-centre source positions: lo index, hi index, fraction."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def resample_linear(arr: np.ndarray, shape) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    for ax, n_out in enumerate(shape):
        lo, hi, t = _linear_weights(out.shape[ax], n_out)
        bshape = [1] * out.ndim
        bshape[ax] = n_out
        t = t.reshape(bshape)
        out = np.take(out, lo, axis=ax) * (1 - t) + np.take(out, hi, axis=ax) * t
    return out


def resample_nearest(arr: np.ndarray, shape) -> np.ndarray:
    out = np.asarray(arr)
    for ax, n_out in enumerate(shape):
        out = np.take(out, _nearest_index(out.shape[ax], n_out), axis=ax)
    return out


def downsample_volume(v: Volume, shape) -> Volume:
    """Trilinear (half-pixel centres) for intensity, nearest neighbour for labels."""
    shape = tuple(int(n) for n in shape)
    scale = [a / b for a, b in zip(v.shape, shape)]
    spacing = tuple(s * f for s, f in zip(v.spacing, scale))
    if v.is_label:
        return Volume(resample_nearest(v.data, shape).astype(np.uint8), spacing)
    return Volume(resample_linear(v.data, shape).astype(v.data.dtype), spacing)


# -- stages ----------------------------------------------------------------------

def _predict(net, arr: np.ndarray) -> np.ndarray:
    x = np.asarray(arr, dtype=np.float64)[None, None]
    with no_grad():
        return net(Tensor(x)).data[0, 0]


def coarse_segment(v, net, coarse_shape=None) -> np.ndarray:
    """Probability map at the coarse shape (the input is resampled when a shape is given)."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if coarse_shape is not None and tuple(data.shape) != tuple(coarse_shape):
        data = resample_linear(data, coarse_shape)
    return _predict(net, data)


def _tile_origins(lo: int, hi: int, side: int, n: int) -> list[int]:
    count = math.ceil((hi - lo) / side)
    return sorted({min(lo + k * side, n - side) for k in range(count)})


def guidance_mask(coarse_probs: np.ndarray, shape, threshold: float = 0.5) -> np.ndarray:
    """Thresholded coarse mask upscaled to ``shape`` by nearest neighbour."""
    return resample_nearest(np.asarray(coarse_probs) > threshold, shape)


def plan_blocks(mask: np.ndarray, block_side: int, margin: int) -> list[BlockIndex]:
    """Tile the dilated bounding region of ``mask`` and keep blocks touching the dilated mask."""
    shape = tuple(mask.shape)
    if any(block_side > n for n in shape):
        raise ContractError(f"block side {block_side} exceeds volume shape {shape}")
    if not mask.any():
        return []
    nz = np.nonzero(mask)
    lo = [max(int(a.min()) - margin, 0) for a in nz]
    hi = [min(int(a.max()) + 1 + margin, n) for a, n in zip(nz, shape)]
    axes = [_tile_origins(a, b, block_side, n) for a, b, n in zip(lo, hi, shape)]
    blocks = []
    for origin in itertools.product(*axes):
        # a block meets the cube-dilated mask iff the margin-grown block meets the mask
        grown = tuple(slice(max(o - margin, 0), min(o + block_side + margin, n)) for o, n in zip(origin, shape))
        if mask[grown].any():
            blocks.append(BlockIndex(tuple(int(o) for o in origin), block_side, shape))
    return blocks


def extract_blocks(coarse_probs: np.ndarray, original, threshold: float = 0.5, block_side: int = 64,
                   margin: int | None = None):
    """List of (BlockIndex, intensity block) guided by the coarse probabilities."""
    data = original.data if isinstance(original, Volume) else np.asarray(original)
    margin = block_side // 8 if margin is None else margin
    mask = guidance_mask(coarse_probs, data.shape, threshold)
    blocks = plan_blocks(mask, block_side, margin)
    if not blocks:
        warnings.warn("coarse mask is empty; no blocks extracted", EmptyGuidanceWarning, stacklevel=2)
        log.warning("empty coarse mask: stage 2 will return background")
    return [(b, data[b.slices]) for b in blocks]


def fine_segment_blocks(blocks, net) -> list:
    out = []
    for index, block in blocks:
        probs = _predict(net, block)
        if probs.shape != tuple(block.shape):
            raise ContractError(f"fine output {probs.shape} does not match block {block.shape}")
        out.append((index, probs))
    return out


def merge_blocks(pieces, shape, threshold: float = 0.5) -> np.ndarray:
    """Average overlapping block probabilities, threshold, background elsewhere."""
    shape = tuple(int(n) for n in shape)
    total = np.zeros(shape)
    visits = np.zeros(shape)
    for index, probs in pieces:
        if tuple(index.source_shape) != shape:
            raise ContractError(f"block source shape {index.source_shape} differs from canvas {shape}")
        for o, n in zip(index.origin, shape):
            if o < 0 or o + index.extent > n:
                raise ContractError(f"block origin {index.origin} out of bounds for {shape}")
        if np.shape(probs) != (index.extent,) * 3:
            raise ContractError(f"block data {np.shape(probs)} does not match extent {index.extent}")
        total[index.slices] += probs
        visits[index.slices] += 1
    mean = np.divide(total, visits, out=np.zeros(shape), where=visits > 0)
    return (mean > threshold).astype(np.uint8)


def two_stage_infer(v, net1, net2, config: PipelineConfig = PipelineConfig()) -> np.ndarray:
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    coarse = coarse_segment(data, net1, config.coarse_shape)
    blocks = extract_blocks(coarse, data, config.threshold, config.block_side, config.dilation)
    return merge_blocks(fine_segment_blocks(blocks, net2), data.shape, config.threshold)


def stage1_only(v, net1, config: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Coarse prediction upscaled to full resolution with the guidance rule."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    coarse = coarse_segment(data, net1, config.coarse_shape)
    return guidance_mask(coarse, data.shape, config.threshold).astype(np.uint8)
