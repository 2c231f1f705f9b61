"""Synthetic tubular volumes standing in for coronary CTA scans.

Each tube is a random cubic-spline centreline with binary branching; a voxel is
foreground when its centre lies within the local radius of a centreline.
Intensity is the contrast-scaled, Gaussian-smoothed label plus white noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .formats import Volume
from .tensor import ContractError

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class SynthError(ContractError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (64, 64, 32)
    tubes: int = 2
    branch_depth: int = 1
    radius: tuple[float, float] = (1.0, 2.0)
    contrast: float = 1.0
    noise: float = 0.1
    smoothing: float = 0.7
    fg_range: tuple[float, float] = (0.001, 0.02)
    max_retries: int = 100

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise SynthError(f"shape must be three extents >= 8, got {self.shape}")
        if self.tubes < 1 or self.branch_depth < 0:
            raise SynthError("need at least one tube and a nonnegative branch depth")
        lo, hi = self.radius
        if lo < 1.0 or hi < lo:
            raise SynthError(f"radius range must satisfy 1 <= lo <= hi, got {self.radius}")
        if not 0 < self.fg_range[0] < self.fg_range[1] < 1:
            raise SynthError(f"bad foreground range {self.fg_range}")


def _spline(rng, start, direction, length, shape, n_ctrl=4):
    """Dense samples (spacing <= 0.25 voxel) of a cubic spline wandering from ``start``."""
    pts = [np.asarray(start, dtype=float)]
    d = direction / np.linalg.norm(direction)
    step = length / (n_ctrl - 1)
    for _ in range(n_ctrl - 1):
        d = d + rng.normal(scale=0.35, size=3)
        d /= np.linalg.norm(d)
        pts.append(pts[-1] + step * d)
    ctrl = np.array(pts)
    t = np.linspace(0.0, 1.0, n_ctrl)
    curve = CubicSpline(t, ctrl, axis=0)
    n = max(8, int(np.ceil(4 * length * 1.5)))
    return curve(np.linspace(0.0, 1.0, n))


def _segments(rng, spec: SynthSpec):
    """Yield (tube id, centreline samples, radius) for every tube and branch."""
    shape = np.array(spec.shape, dtype=float)
    lo, hi = spec.radius
    for tube in range(spec.tubes):
        start = rng.uniform(0.2, 0.8, size=3) * (shape - 1)
        pending = [(start, rng.normal(size=3), 0.6 * shape.min(), rng.uniform(lo, hi), spec.branch_depth)]
        while pending:
            s, d, length, r, depth = pending.pop(0)
            pts = _spline(rng, s, d, length, spec.shape)
            yield tube, pts, r
            if depth > 0:
                # binary split at the far end: two children leaving at diverging angles
                tip = pts[-1]
                heading = pts[-1] - pts[-4]
                for sgn in (-1.0, 1.0):
                    kink = np.cross(heading, rng.normal(size=3))
                    child = heading / np.linalg.norm(heading) + sgn * 0.8 * kink / np.linalg.norm(kink)
                    pending.append((tip, child, 0.6 * length, max(lo, 0.8 * r), depth - 1))


def _rasterise(spec: SynthSpec, rng) -> tuple[np.ndarray, int]:
    grid = np.stack(np.meshgrid(*(np.arange(n) for n in spec.shape), indexing="ij"), axis=-1)
    label = np.zeros(spec.shape, dtype=bool)
    owner = np.full(spec.shape, -1)
    for tube, pts, r in _segments(rng, spec):
        lo = np.maximum(np.floor(pts.min(axis=0) - r), 0).astype(int)
        hi = np.minimum(np.ceil(pts.max(axis=0) + r) + 1, spec.shape).astype(int)
        if np.any(hi <= lo):
            continue
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        dist, _ = cKDTree(pts).query(grid[box].reshape(-1, 3), distance_upper_bound=r + 1e-9)
        hit = (dist <= r).reshape(hi - lo)
        clash = hit & (owner[box] >= 0) & (owner[box] != tube)
        if clash.any():
            return label, -1
        label[box] |= hit
        owner[box][hit] = tube
    return label, spec.tubes


def synth_generate(spec: SynthSpec) -> tuple[Volume, Volume]:
    """Deterministic (intensity, label) pair; retries until the label is valid."""
    rng = np.random.default_rng(spec.seed)
    n_vox = int(np.prod(spec.shape))
    for _ in range(spec.max_retries):
        label, tubes = _rasterise(spec, rng)
        if tubes < 0:
            continue
        frac = label.sum() / n_vox
        if not spec.fg_range[0] <= frac <= spec.fg_range[1]:
            continue
        _, count = ndimage.label(label, structure=CONNECTIVITY_26)
        if count != spec.tubes:
            continue
        smooth = ndimage.gaussian_filter(label.astype(np.float64), spec.smoothing)
        intensity = spec.contrast * smooth + rng.normal(scale=spec.noise, size=spec.shape)
        return Volume.intensity(intensity), Volume.label(label)
    raise SynthError(f"no valid volume after {spec.max_retries} attempts (foreground target {spec.fg_range})")


def component_count(label) -> int:
    arr = label.data if isinstance(label, Volume) else np.asarray(label)
    return int(ndimage.label(arr.astype(bool), structure=CONNECTIVITY_26)[1])
