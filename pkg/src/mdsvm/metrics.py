"""Overlap and surface-distance metrics: Dice, Hausdorff, average Hausdorff.

Surface points are foreground voxels with at least one background
six-neighbour (voxels outside the grid count as background).  Distances are
between voxel centres, scaled by spacing when it is known and in voxel units
otherwise.

Two evaluation paths share one squared-distance formula: an exhaustive
pairwise oracle and a k-d tree path that only uses the tree to shortlist
candidates.  Both end with identical per-point minimum squared distances,
so the final values agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .formats import Volume
from .tensor import ContractError


class UndefinedMetricError(ContractError):
    """Raised when a surface distance is requested for an empty mask."""


def _mask_and_spacing(v):
    if isinstance(v, Volume):
        return v.data.astype(bool), v.known_spacing
    arr = np.asarray(v)
    if arr.ndim != 3:
        raise ContractError(f"label volume must be 3-D, got {arr.shape}")
    return arr.astype(bool), None


def dice_coefficient(a, b) -> float:
    ma, _ = _mask_and_spacing(a)
    mb, _ = _mask_and_spacing(b)
    if ma.shape != mb.shape:
        raise ContractError(f"shape mismatch {ma.shape} vs {mb.shape}")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


@dataclass(frozen=True)
class SurfacePointSet:
    """Boundary voxel indices in lexicographic order, plus the spacing to scale them by."""

    indices: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def points(self) -> np.ndarray:
        s = np.ones(3) if self.spacing is None else np.asarray(self.spacing, dtype=float)
        return self.indices * s


def extract_surface(v) -> SurfacePointSet:
    mask, spacing = _mask_and_spacing(v)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return SurfacePointSet(np.argwhere(mask & ~interior).astype(np.int64), spacing)


def _sq_dist(p: np.ndarray, q: np.ndarray, spacing) -> np.ndarray:
    """Squared distances for broadcastable integer index arrays (..., 3)."""
    d = (p - q).astype(np.float64)
    if spacing is not None:
        d = d * np.asarray(spacing, dtype=np.float64)
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def _min_sq_oracle(src: np.ndarray, dst: np.ndarray, spacing, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        out[i:i + chunk] = _sq_dist(src[i:i + chunk, None, :], dst[None, :, :], spacing).min(axis=1)
    return out


def _min_sq_tree(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    s = np.ones(3) if spacing is None else np.asarray(spacing, dtype=float)
    tree = cKDTree(dst * s)
    qpts = src * s
    approx, _ = tree.query(qpts, k=1)
    # shortlist everything within a slightly inflated nearest radius, then rescore exactly
    radius = approx * (1.0 + 1e-9) + 1e-9
    out = np.empty(len(src))
    for i, cand in enumerate(tree.query_ball_point(qpts, radius)):
        out[i] = _sq_dist(src[i], dst[np.sort(cand)], spacing).min()
    return out


def _directed(a, b, method: str):
    sa, sb = extract_surface(a), extract_surface(b)
    if len(sa) == 0 or len(sb) == 0:
        raise UndefinedMetricError("surface distance undefined for an empty mask")
    if sa.spacing != sb.spacing:
        raise ContractError(f"spacing mismatch {sa.spacing} vs {sb.spacing}")
    if method == "oracle":
        fn = _min_sq_oracle
    elif method == "tree":
        fn = _min_sq_tree
    else:
        raise ContractError(f"unknown metric method {method!r}")
    return (np.sqrt(fn(sa.indices, sb.indices, sa.spacing)),
            np.sqrt(fn(sb.indices, sa.indices, sa.spacing)))


def _check_shapes(a, b):
    ma, _ = _mask_and_spacing(a)
    mb, _ = _mask_and_spacing(b)
    if ma.shape != mb.shape:
        raise ContractError(f"shape mismatch {ma.shape} vs {mb.shape}")


def hausdorff(a, b, method: str = "tree") -> float:
    _check_shapes(a, b)
    dab, dba = _directed(a, b, method)
    return float(max(dab.max(), dba.max()))


def average_hausdorff(a, b, method: str = "tree") -> float:
    """max(mean_a min_b d, mean_b min_a d)."""
    _check_shapes(a, b)
    dab, dba = _directed(a, b, method)
    return float(max(dab.mean(), dba.mean()))


def surface_metrics(pred, gt, method: str = "tree") -> tuple[float, float, float]:
    """(DSC, HD, AHD) computed with a single pair of surface extractions."""
    _check_shapes(pred, gt)
    dsc = dice_coefficient(pred, gt)
    dab, dba = _directed(pred, gt, method)
    return dsc, float(max(dab.max(), dba.max())), float(max(dab.mean(), dba.mean()))


def format_case_line(dsc: float, hd: float, ahd: float) -> str:
    return f"DSC {dsc:.4f} HD {hd:.4f} AHD {ahd:.4f}"


def format_report(rows) -> str:
    """Tab-separated ``case_id DSC HD AHD`` lines followed by a MEAN row."""
    lines = [f"{cid}\t{d:.4f}\t{h:.4f}\t{a:.4f}" for cid, d, h, a in rows]
    if rows:
        m = np.mean([[d, h, a] for _, d, h, a in rows], axis=0)
        lines.append(f"MEAN\t{m[0]:.4f}\t{m[1]:.4f}\t{m[2]:.4f}")
    return "\n".join(lines)
