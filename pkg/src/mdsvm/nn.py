"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, parameter, relu


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, prefix + key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in value:
            yield from _walk(value[k], f"{name}.{k}")


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


class Conv3d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int = 3, padding: int | None = None,
                 bias: bool = True, zero_init: bool = False):
        shape = (cout, cin, kernel, kernel, kernel)
        if zero_init:
            self.weight = parameter(np.zeros(shape))
        else:
            self.weight = he_uniform(rng, shape, cin * kernel ** 3)
        self.bias = parameter(np.zeros(cout)) if bias else None
        self._padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, padding=self._padding)


class ConvTranspose3d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int = 2):
        self.weight = he_uniform(rng, (cin, cout, kernel, kernel, kernel), cin * kernel ** 3)
        self.bias = parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose3d(x, self.weight, self.bias, stride=2)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True):
        bound = 1.0 / np.sqrt(cin)
        self.weight = parameter(rng.uniform(-bound, bound, size=(cout, cin)))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None):
        self._groups = F.gn_groups(channels) if groups is None else groups
        self.gain = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self._groups, self.gain, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gain = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class ConvNormAct(Module):
    """3x3x3 conv -> GroupNorm -> ReLU."""

    def __init__(self, rng, cin: int, cout: int):
        self.conv = Conv3d(rng, cin, cout, 3)
        self.norm = GroupNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.conv(x)))
