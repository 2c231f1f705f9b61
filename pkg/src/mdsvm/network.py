"""MDSVM-UNet assembly: MDSConv encoder, RVM bottleneck, nested dense skips, RVM decoder.

For a ladder of ``n`` channel widths (levels ``0 .. n-1``):

* encoder levels ``0 .. n-2`` are MDSConv blocks (max-pooled between levels);
  level ``n-1`` is the RVM bottleneck;
* skip node ``X[i][j]`` (``i + j <= n-1``, ``j >= 1``) is a dense convolutional
  block over ``[X[i][0..j-1], up(X[i+1][j-1])]``; the skip handed to the
  decoder at level ``i`` is ``X[i][n-1-i]``;
* decoder levels ``n-1 .. 2`` are ``up(RVM(skip + P))`` with the RVM
  projection halving the width, level 1 is a 3x3x3 conv block, and the head
  restores full resolution, adds the level-0 skip and maps to class
  probabilities through a 1x1x1 conv and a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .nn import Conv3d, ConvNormAct, ConvTranspose3d, Module
from .snake import MdsConvBlock
from .ssm import RvmLayer
from .tensor import ContractError, Tensor, as_tensor, concat, sigmoid

PAPER_LADDER = (16, 32, 64, 128, 256)
PAPER_PARAMETERS = 26.7e6


class ConfigError(ContractError):
    pass


@dataclass
class NetworkConfig:
    ladder: tuple[int, ...] = PAPER_LADDER
    in_channels: int = 1
    out_classes: int = 1
    c_max: int = 4
    offset_scale: float = 1.0
    expand: int = 2
    state_dim: int = 16
    # conv layers per skip-lattice node; 1 gives a plain conv+GN+ReLU node
    dense_layers: int = 6
    dense_skips: bool = True
    head: str = "upsample"

    def __post_init__(self):
        self.ladder = tuple(int(c) for c in self.ladder)
        if len(self.ladder) < 2:
            raise ConfigError("ladder needs at least two levels")
        for a, b in zip(self.ladder, self.ladder[1:]):
            if b != 2 * a:
                raise ConfigError(f"ladder must double at each level, got {self.ladder}")
        if self.head not in ("upsample", "transpose"):
            raise ConfigError(f"head must be 'upsample' or 'transpose', got {self.head!r}")
        if self.dense_layers < 1:
            raise ConfigError("dense_layers must be >= 1")
        for c in self.ladder:
            F.gn_groups(c)

    @property
    def levels(self) -> int:
        return len(self.ladder)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_input_shape(self, spatial) -> None:
        for axis, n in zip("HWD", spatial):
            if n % self.divisor:
                raise ConfigError(f"axis {axis} extent {n} not divisible by {self.divisor}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ladder"] = list(self.ladder)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def toy_config(**overrides) -> NetworkConfig:
    base = dict(ladder=(4, 8, 16, 32, 64), c_max=4, state_dim=8, dense_layers=1)
    base.update(overrides)
    return NetworkConfig(**base)


class DenseNode(Module):
    """Densely connected conv layers; each layer sees the input and all earlier outputs."""

    def __init__(self, rng, cin: int, cout: int, layers: int):
        self.layers = [ConvNormAct(rng, cin + m * cout, cout) for m in range(layers)]

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            feats.append(layer(feats[0] if len(feats) == 1 else concat(feats, axis=1)))
        return feats[-1]


class Network(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0):
        self._config = config
        rng = np.random.default_rng(seed)
        ch = config.ladder
        n = config.levels
        self.encoder = [MdsConvBlock(rng, config.in_channels if i == 0 else ch[i - 1], ch[i], config.c_max,
                                     config.offset_scale) for i in range(n - 1)]
        self.bottleneck = RvmLayer(rng, ch[n - 2], ch[n - 1], config.expand, config.state_dim)
        self.skips = {}
        if config.dense_skips:
            for i in range(n - 1):
                for j in range(1, n - i):
                    self.skips[f"{i}_{j}"] = DenseNode(rng, j * ch[i] + ch[i + 1], ch[i], config.dense_layers)
        self.decoder = {str(lvl): RvmLayer(rng, ch[lvl], ch[lvl - 1], config.expand, config.state_dim)
                        for lvl in range(n - 1, 1, -1)}
        self.final_conv = ConvNormAct(rng, ch[1], ch[0])
        if config.head == "transpose":
            self.head_up = ConvTranspose3d(rng, ch[0], ch[0], 2)
        else:
            self.head_up = Conv3d(rng, ch[0], ch[0], 3)
        self.classifier = Conv3d(rng, ch[0], config.out_classes, 1)

    @property
    def config(self) -> NetworkConfig:
        return self._config

    def encoder_forward(self, x: Tensor) -> list[Tensor]:
        self._config.check_input_shape(x.shape[2:])
        feats = [self.encoder[0](x)]
        for block in self.encoder[1:]:
            feats.append(block(F.pool_max3d(feats[-1])))
        feats.append(self.bottleneck(F.pool_max3d(feats[-1])))
        return feats

    def dense_skip(self, feats: list[Tensor]) -> list[Tensor]:
        """Skip tensor per level ``0 .. n-2`` (level ``n-1`` is the bottleneck)."""
        n = self._config.levels
        if not self._config.dense_skips:
            return list(feats[:-1])
        nodes = {(i, 0): f for i, f in enumerate(feats)}
        for j in range(1, n):
            for i in range(0, n - j):
                inputs = [nodes[(i, k)] for k in range(j)] + [F.upsample_trilinear(nodes[(i + 1, j - 1)])]
                nodes[(i, j)] = self.skips[f"{i}_{j}"](concat(inputs, axis=1))
        return [nodes[(i, n - 1 - i)] for i in range(n - 1)]

    def decoder_forward(self, skips: list[Tensor], bottleneck: Tensor) -> Tensor:
        n = self._config.levels
        ch = self._config.ladder
        p = bottleneck
        for lvl in range(n - 1, 1, -1):
            x = p if lvl == n - 1 else _add_checked(skips[lvl], p, lvl)
            if x.shape[1] != ch[lvl]:
                raise ContractError(f"decoder level {lvl}: expected {ch[lvl]} channels, got {x.shape[1]}")
            p = F.upsample_trilinear(self.decoder[str(lvl)](x))
        x = p if n == 2 else _add_checked(skips[1], p, 1)
        p = self.final_conv(x)
        if self._config.head == "transpose":
            p = self.head_up(p)
        else:
            p = self.head_up(F.upsample_trilinear(p))
        return sigmoid(self.classifier(_add_checked(skips[0], p, 0)))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        feats = self.encoder_forward(x)
        return self.decoder_forward(self.dense_skip(feats), feats[-1])

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data) for name, p in self.named_parameters()]

    def load_state(self, records) -> None:
        params = dict(self.named_parameters())
        names = [name for name, _ in records]
        if set(names) != set(params):
            missing = sorted(set(params) - set(names))[:3]
            extra = sorted(set(names) - set(params))[:3]
            raise ContractError(f"checkpoint does not match network (missing {missing}, unexpected {extra})")
        for name, arr in records:
            if params[name].shape != arr.shape:
                raise ContractError(f"parameter {name}: shape {arr.shape} != {params[name].shape}")
            params[name].data[...] = arr


def _add_checked(skip: Tensor, p: Tensor, level: int) -> Tensor:
    if skip.shape != p.shape:
        raise ContractError(f"decoder level {level}: skip {skip.shape} vs decoder {p.shape}")
    return skip + p


def build(config: NetworkConfig, seed: int = 0) -> Network:
    return Network(config, seed)


def parameter_count(config: NetworkConfig) -> int:
    return build(config, 0).num_parameters()
