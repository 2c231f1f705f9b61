"""Axis-specific snake convolutions and their multidirectional fusion.

A snake kernel is a 1-D stencil of ``2*c_max + 1`` taps laid along one axis.
The two off-axis coordinates of each tap drift by a cumulative sum of bounded
per-step offsets, walked outward from the centre tap, so neighbouring taps can
never be more than ``1 + offset_scale`` apart in any component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Conv3d, GroupNorm, Module, he_uniform
from .tensor import ContractError, Tensor, concat, matmul, parameter, relu, stack, tanh

AXES = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class SnakeKernelSpec:
    axis: str
    c_max: int = 4
    in_channels: int = 1
    out_channels: int = 1
    offset_scale: float = 1.0

    def __post_init__(self):
        if self.axis not in AXES:
            raise ContractError(f"snake axis must be one of X, Y, Z; got {self.axis!r}")
        if self.c_max < 0:
            raise ContractError("c_max must be nonnegative")
        if self.offset_scale <= 0:
            raise ContractError("offset_scale must be positive")

    @property
    def taps(self) -> int:
        return 2 * self.c_max + 1

    @property
    def axis_index(self) -> int:
        return AXES[self.axis]

    @property
    def off_axes(self) -> tuple[int, int]:
        a = self.axis_index
        return tuple(i for i in range(3) if i != a)


def cumulation_matrix(c_max: int) -> np.ndarray:
    """Map per-step offsets to signed cumulative displacements per tap.

    Tap ``c + s`` accumulates steps ``c+1 .. c+s``; tap ``c - s`` accumulates
    steps ``c-1 .. c-s`` with the opposite orientation.  The centre tap is
    never displaced.
    """
    k = 2 * c_max + 1
    m = np.zeros((k, k))
    for t in range(k):
        if t > c_max:
            m[t, c_max + 1:t + 1] = 1.0
        elif t < c_max:
            m[t, t:c_max] = -1.0
    return m


def predict_offsets(features: Tensor, spec: SnakeKernelSpec, predictor: Conv3d) -> Tensor:
    """Raw per-step offsets, shape (B, 2*taps, H, W, D), each in [-scale, scale]."""
    out = tanh(predictor(features))
    return out * spec.offset_scale if spec.offset_scale != 1.0 else out


def cumulate_offsets(raw: Tensor, spec: SnakeKernelSpec) -> Tensor:
    """Absolute tap coordinates, shape (B, taps, 3, H, W, D)."""
    B, ch, H, W, D = raw.shape
    k = spec.taps
    if ch != 2 * k:
        raise ContractError(f"expected {2 * k} offset channels, got {ch}")
    m = Tensor(cumulation_matrix(spec.c_max))
    grid = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), np.arange(D, dtype=float),
                       indexing="ij")
    comps: list[Tensor | None] = [None, None, None]
    a = spec.axis_index
    steps = (np.arange(k) - spec.c_max).reshape(1, k, 1, 1, 1)
    comps[a] = Tensor(np.broadcast_to(grid[a][None, None] + steps, (B, k, H, W, D)))
    for j, ax in enumerate(spec.off_axes):
        part = raw[:, j * k:(j + 1) * k].transpose(0, 2, 3, 4, 1)
        disp = F.linear(part, m).transpose(0, 4, 1, 2, 3)
        comps[ax] = disp + grid[ax][None, None]
    return stack(comps, axis=2)


def snake_conv_axis(features: Tensor, spec: SnakeKernelSpec, weight: Tensor, bias: Tensor | None,
                    coords: Tensor) -> Tensor:
    """Sample every tap at its deformed position and contract with the 1-D kernel."""
    B, cin, H, W, D = features.shape
    k = spec.taps
    if weight.shape != (spec.out_channels, cin, k):
        raise ContractError(f"snake weight must be ({spec.out_channels}, {cin}, {k}), got {weight.shape}")
    n = H * W * D
    pts = coords.transpose(0, 1, 3, 4, 5, 2).reshape(B, k * n, 3)
    sampled = F.grid_sample_trilinear(features, pts, integer_axes=(spec.axis_index,)).reshape(B, cin * k, n)
    out = matmul(weight.reshape(spec.out_channels, cin * k), sampled)
    if bias is not None:
        out = out + bias.reshape(1, spec.out_channels, 1)
    return out.reshape(B, spec.out_channels, H, W, D)


class SnakeConv(Module):
    def __init__(self, rng, spec: SnakeKernelSpec):
        self._spec = spec
        self.predictor = Conv3d(rng, spec.in_channels, 2 * spec.taps, 3, zero_init=True)
        self.weight = he_uniform(rng, (spec.out_channels, spec.in_channels, spec.taps),
                                 spec.in_channels * spec.taps)
        self.bias = parameter(np.zeros(spec.out_channels))

    @property
    def spec(self) -> SnakeKernelSpec:
        return self._spec

    def offsets(self, x: Tensor) -> Tensor:
        return predict_offsets(x, self._spec, self.predictor)

    def forward(self, x: Tensor) -> Tensor:
        coords = cumulate_offsets(self.offsets(x), self._spec)
        return snake_conv_axis(x, self._spec, self.weight, self.bias, coords)


class MdsConvBlock(Module):
    """Standard 3x3x3 branch plus X/Y/Z snake branches, fused by 1x1x1 conv, GN, ReLU."""

    def __init__(self, rng, cin: int, cout: int, c_max: int = 4, offset_scale: float = 1.0):
        self.standard = Conv3d(rng, cin, cout, 3)
        self.snakes = [SnakeConv(rng, SnakeKernelSpec(ax, c_max, cin, cout, offset_scale)) for ax in "XYZ"]
        self.fuse = Conv3d(rng, 4 * cout, cout, 1)
        self.norm = GroupNorm(cout)

    def branches(self, x: Tensor) -> list[Tensor]:
        return [self.standard(x)] + [s(x) for s in self.snakes]

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.fuse(concat(self.branches(x), axis=1))))


def mdsconv_forward(features: Tensor, block: MdsConvBlock) -> Tensor:
    return block(features)
