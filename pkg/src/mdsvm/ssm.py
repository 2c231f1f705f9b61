"""Selective state-space scan, the dual-branch VSSM, and the residual RVM layer.

Discretisation is zero-order hold on the state matrix with the Euler
simplification for the input matrix:

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D * u_t

The scan runs in the row-major (h, w, d) flattening order of the volume.
"""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .nn import LayerNorm, Linear, Module, he_uniform
from .tensor import ContractError, Tensor, as_tensor, exp, parameter, silu, softplus

SCAN_METHODS = ("associative", "chunked", "sequential")


# -- linear recurrence kernels:  h_t = a_t * h_{t-1} + b_t  along axis 1 ------

def _recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    acc = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        acc = a[:, t] * acc + b[:, t]
        h[:, t] = acc
    return h


def _recurrence_associative(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hillis-Steele doubling over the affine maps h -> a*h + b; log2(L) sweeps."""
    a = a.copy()
    b = b.copy()
    L = b.shape[1]
    s = 1
    while s < L:
        b[:, s:] = b[:, s:] + a[:, s:] * b[:, :-s]
        a[:, s:] = a[:, s:] * a[:, :-s]
        s *= 2
    return b


def _recurrence_chunked(a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Associative scan inside fixed-size chunks, sequential carry between them."""
    L = b.shape[1]
    h = np.empty_like(b)
    carry = np.zeros_like(b[:, 0])
    for start in range(0, L, chunk):
        sl = slice(start, min(start + chunk, L))
        bb = b[:, sl].copy()
        bb[:, 0] = bb[:, 0] + a[:, start] * carry
        h[:, sl] = _recurrence_associative(a[:, sl], bb)
        carry = h[:, sl.stop - 1]
    return h


_KERNELS = {
    "associative": _recurrence_associative,
    "chunked": _recurrence_chunked,
    "sequential": _recurrence_sequential,
}


def linear_recurrence(a: np.ndarray, b: np.ndarray, method: str = "associative", reverse: bool = False):
    if method not in _KERNELS:
        raise ContractError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}")
    if not reverse:
        return _KERNELS[method](a, b)
    # h_t = a_{t+1} h_{t+1} + b_t, solved as a forward scan on flipped time
    a_next = np.concatenate([a[:, 1:], np.zeros_like(a[:, :1])], axis=1)
    return _KERNELS[method](a_next[:, ::-1], b[:, ::-1])[:, ::-1]


def selective_scan_kernel(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor | None = None,
                          method: str = "associative") -> Tensor:
    """Selective scan with analytic backward.

    Shapes: u, delta (batch, L, E); A (E, N); B, C (batch, L, N); D (E,).
    A must be negative for a decaying state.
    """
    u, delta, A, B, C = (as_tensor(t) for t in (u, delta, A, B, C))
    D = None if D is None else as_tensor(D)
    if u.ndim != 3 or delta.shape != u.shape:
        raise ContractError(f"u and delta must share a (batch, L, E) shape; got {u.shape}, {delta.shape}")
    nb, L, E = u.shape
    N = A.shape[1]
    if A.shape != (E, N) or B.shape != (nb, L, N) or C.shape != (nb, L, N):
        raise ContractError(f"scan shape mismatch: A {A.shape}, B {B.shape}, C {C.shape} for u {u.shape}")
    if L < 1:
        raise ContractError("scan needs L >= 1")
    for name, t in (("u", u), ("delta", delta), ("B", B), ("C", C)):
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"selective_scan: non-finite values in {name}")
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data
    decay = np.exp(dd[..., None] * Ad)  # (nb, L, E, N)
    drive = (dd * ud)[..., None] * Bd[:, :, None, :]
    h = linear_recurrence(decay, drive, method)
    y = np.einsum("blen,bln->ble", h, Cd)
    if D is not None:
        y = y + D.data * ud

    def backward(gy):
        g = linear_recurrence(decay, gy[..., None] * Cd[:, :, None, :], method, reverse=True)
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        g_decay = g * h_prev * decay
        gB_sum = np.einsum("blen,bln->ble", g, Bd)
        g_delta = np.einsum("blen,en->ble", g_decay, Ad) + gB_sum * ud
        g_u = gB_sum * dd
        if D is not None:
            g_u = g_u + gy * D.data
        g_A = np.einsum("blen,ble->en", g_decay, dd)
        g_B = np.einsum("blen,ble->bln", g, dd * ud)
        g_C = np.einsum("ble,blen->bln", gy, h)
        res = [g_u, g_delta, g_A, g_B, g_C]
        if D is not None:
            res.append((gy * ud).sum(axis=(0, 1)))
        return tuple(res)

    parents = [u, delta, A, B, C] + ([D] if D is not None else [])
    return Tensor.from_op(y, parents, backward)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """Input-dependent step, input and output projections plus the decay matrix."""

    def __init__(self, rng, channels: int, state_dim: int = 16, dt_rank: int | None = None,
                 use_skip: bool = True):
        self._rank = dt_rank or max(1, math.ceil(channels / 32))
        self._state_dim = state_dim
        self.x_proj = Linear(rng, channels, self._rank + 2 * state_dim, bias=False)
        self.dt_proj = Linear(rng, self._rank, channels)
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
        self.dt_proj.bias = parameter(_inverse_softplus(dt))
        self.A_log = parameter(np.tile(np.log(np.arange(1, state_dim + 1, dtype=float)), (channels, 1)))
        self.D = parameter(np.ones(channels)) if use_skip else None

    @property
    def state_dim(self) -> int:
        return self._state_dim

    def project(self, u: Tensor):
        """Return (delta, A, B, C) for a (batch, L, E) input sequence."""
        r, n = self._rank, self._state_dim
        xdbl = self.x_proj(u)
        delta = softplus(self.dt_proj(xdbl[..., :r]))
        return delta, -exp(self.A_log), xdbl[..., r:r + n], xdbl[..., r + n:]


def selective_scan(u: Tensor, params: SsmParams, method: str = "associative") -> Tensor:
    delta, A, B, C = params.project(u)
    return selective_scan_kernel(u, delta, A, B, C, params.D, method)


class VssmBlock(Module):
    def __init__(self, rng, channels: int, expand: int = 2, state_dim: int = 16):
        e = expand * channels
        self.in_ssm = Linear(rng, channels, e)
        self.dw_weight = he_uniform(rng, (e, 1, 3, 3, 3), 27)
        self.dw_bias = parameter(np.zeros(e))
        self.ssm = SsmParams(rng, e, state_dim)
        self.norm = LayerNorm(e)
        self.in_gate = Linear(rng, channels, e)
        self.out = Linear(rng, e, channels)
        self._scan_method = "associative"

    def forward(self, w_in: Tensor, spatial_shape) -> Tensor:
        nb, L, _ = w_in.shape
        H, W, D = spatial_shape
        if L != H * W * D:
            raise ContractError(f"sequence length {L} does not match spatial shape {tuple(spatial_shape)}")
        x = self.in_ssm(w_in)
        e = x.shape[-1]
        vol = x.transpose(0, 2, 1).reshape(nb, e, H, W, D)
        x = F.dwconv3d(vol, self.dw_weight, self.dw_bias).reshape(nb, e, L).transpose(0, 2, 1)
        branch1 = self.norm(selective_scan(silu(x), self.ssm, self._scan_method))
        branch2 = silu(self.in_gate(w_in))
        return self.out(branch1 * branch2)


def vssm_forward(w_in: Tensor, block: VssmBlock, spatial_shape) -> Tensor:
    return block(w_in, spatial_shape)


class RvmLayer(Module):
    """LN -> VSSM with scaled residual, then LN -> projection to ``out_channels``."""

    def __init__(self, rng, channels: int, out_channels: int | None = None, expand: int = 2, state_dim: int = 16):
        out_channels = channels if out_channels is None else out_channels
        self.norm_in = LayerNorm(channels)
        self.vssm = VssmBlock(rng, channels, expand, state_dim)
        self.scale = parameter(np.ones(channels))
        self.norm_out = LayerNorm(channels)
        self.proj = Linear(rng, channels, out_channels)

    def forward(self, x: Tensor) -> Tensor:
        nb, c, H, W, D = x.shape
        seq = x.reshape(nb, c, H * W * D).transpose(0, 2, 1)
        mixed = self.vssm(self.norm_in(seq), (H, W, D)) + seq * self.scale
        out = self.proj(self.norm_out(mixed))
        return out.transpose(0, 2, 1).reshape(nb, out.shape[-1], H, W, D)


def rvm_forward(x_in: Tensor, layer: RvmLayer) -> Tensor:
    return layer(x_in)
