"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

FD_STEP = 1e-4


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, step: float = FD_STEP,
                   max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``fn()`` w.r.t. ``target.data``.

    With ``max_entries`` set, only a random subset of coordinates is probed;
    returns ``(indices, values)`` over the flattened array.
    """
    flat = target.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    vals = np.empty(idx.size)
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            vals[j] = (up - down) / (2 * step)
    return idx, vals


SCALE_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy normalised by the larger gradient magnitude.

    The normaliser is floored at ``SCALE_FLOOR`` so that gradients which are
    identically zero (e.g. a bias feeding a normalisation) compare as absolute
    errors rather than noise over noise.
    """
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), SCALE_FLOOR)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = FD_STEP,
                    max_entries: int | None = None, seed: int = 0) -> float:
    """Relative error between backward() and finite differences over all ``inputs``.

    Probed entries of every input are pooled into one gradient vector before
    normalising, so the error is measured against the overall gradient scale.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for t in inputs:
        grad = np.zeros(t.shape) if t.grad is None else t.grad
        idx, vals = numerical_grad(fn, t, step, max_entries, rng)
        analytic.append(grad.reshape(-1)[idx])
        numeric.append(vals)
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def projected(fn: Callable[[], Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """Turn a tensor-valued ``fn`` into a scalar loss via a fixed random projection."""
    from .tensor import tsum

    cache: dict[str, np.ndarray] = {}

    def loss():
        out = fn()
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed).standard_normal(out.shape)
        return tsum(out * Tensor(cache["w"]))

    return loss
