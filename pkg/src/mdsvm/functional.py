"""Volumetric layer primitives on top of :mod:`mdsvm.tensor`.

Layout convention is ``(batch, channel, H, W, D)`` with ``D`` fastest.
Convolutions are evaluated tap by tap as batched matrix products, which keeps
peak memory at one shifted copy of the input instead of a full im2col buffer.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, as_tensor

GN_EPS = 1e-5
LN_EPS = 1e-5


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ContractError(f"expected 3 values, got {v}")
    return v


def _out_extent(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _tap_slice(tap, stride, dilation, out_sp):
    return tuple(slice(t * d, t * d + s * (o - 1) + 1, s) for t, s, d, o in zip(tap, stride, dilation, out_sp))


def _corr(xp, w, stride, dilation, out_sp, groups):
    B, cin = xp.shape[:2]
    cout, cg = w.shape[:2]
    og = cout // groups
    n = int(np.prod(out_sp))
    wg = w.reshape(groups, og, cg, *w.shape[2:])
    out = np.zeros((B, groups, og, n))
    depthwise = og == 1 and cg == 1
    for tap in itertools.product(*(range(k) for k in w.shape[2:])):
        xs = xp[(slice(None), slice(None)) + _tap_slice(tap, stride, dilation, out_sp)]
        xs = xs.reshape(B, groups, cg, n)
        wt = wg[(Ellipsis,) + tap]
        if depthwise:
            out += wt.reshape(1, groups, 1, 1) * xs
        else:
            out += wt @ xs
    return out.reshape(B, cout, *out_sp)


def _corr_input_grad(gout, w, stride, dilation, xp_shape, groups):
    B = gout.shape[0]
    out_sp = gout.shape[2:]
    cout, cg = w.shape[:2]
    og = cout // groups
    n = int(np.prod(out_sp))
    wg = w.reshape(groups, og, cg, *w.shape[2:])
    g = gout.reshape(B, groups, og, n)
    dxp = np.zeros(xp_shape)
    depthwise = og == 1 and cg == 1
    for tap in itertools.product(*(range(k) for k in w.shape[2:])):
        wt = wg[(Ellipsis,) + tap]
        if depthwise:
            part = wt.reshape(1, groups, 1, 1) * g
        else:
            part = np.swapaxes(wt, -1, -2) @ g
        dxp[(slice(None), slice(None)) + _tap_slice(tap, stride, dilation, out_sp)] += part.reshape(
            B, groups * cg, *out_sp)
    return dxp


def _corr_weight_grad(xp, gout, w_shape, stride, dilation, groups):
    B = gout.shape[0]
    out_sp = gout.shape[2:]
    cout, cg = w_shape[:2]
    og = cout // groups
    n = int(np.prod(out_sp))
    g = gout.reshape(B, groups, og, n)
    dw = np.zeros((groups, og, cg) + tuple(w_shape[2:]))
    depthwise = og == 1 and cg == 1
    for tap in itertools.product(*(range(k) for k in w_shape[2:])):
        xs = xp[(slice(None), slice(None)) + _tap_slice(tap, stride, dilation, out_sp)].reshape(B, groups, cg, n)
        if depthwise:
            dw[(Ellipsis,) + tap] = np.einsum("bgn,bgn->g", g[:, :, 0], xs[:, :, 0])[:, None, None]
        else:
            dw[(Ellipsis,) + tap] = (g @ np.swapaxes(xs, -1, -2)).sum(axis=0)
    return dw.reshape(w_shape)


# -- stride-1 fast path ------------------------------------------------------
# On the padded grid every tap is a constant shift of the flattened volume, so
# im2col reduces to contiguous slice copies.  Columns are built in chunks of
# output positions and contracted with one GEMM per chunk; outputs live on the
# whole padded grid and are cropped afterwards.

_COL_BUDGET = 1 << 22


def _flat_offsets(kshape, dilation, pshape):
    _, pw, pd = pshape
    return [((a * dilation[0]) * pw + b * dilation[1]) * pd + c * dilation[2]
            for a, b, c in itertools.product(*(range(k) for k in kshape))]


def _flat_padded(xp, extra):
    B, C = xp.shape[:2]
    n = int(np.prod(xp.shape[2:]))
    flat = np.zeros((B, C, n + extra))
    flat[:, :, :n] = xp.reshape(B, C, n)
    return flat


def _chunks(n, rows):
    step = max(4096, _COL_BUDGET // max(rows, 1))
    return [(p, min(p + step, n)) for p in range(0, n, step)]


def _im2col(src, offs, p0, p1, out):
    cg = src.shape[0]
    for t, off in enumerate(offs):
        out[t * cg:(t + 1) * cg, :p1 - p0] = src[:, off + p0:off + p1]
    return out[:, :p1 - p0]


def _s1_setup(shape5, w_shape, dilation, groups):
    cout, cg = w_shape[:2]
    pshape = shape5[2:]
    n = int(np.prod(pshape))
    offs = _flat_offsets(w_shape[2:], dilation, pshape)
    return cout // groups, cg, pshape, n, offs


def _wmat(w, groups):
    # (Cout, cg, k, k, k) -> (groups, og, T*cg) with tap-major columns
    cout, cg = w.shape[:2]
    return w.reshape(groups, cout // groups, cg, -1).transpose(0, 1, 3, 2).reshape(groups, cout // groups, -1)


def _crop(full, out_sp):
    return full[(slice(None), slice(None)) + tuple(slice(0, o) for o in out_sp)]


def _corr_s1(xp, w, dilation, out_sp, groups):
    B = xp.shape[0]
    og, cg, pshape, n, offs = _s1_setup(xp.shape, w.shape, dilation, groups)
    flat = _flat_padded(xp, offs[-1]).reshape(B, groups, cg, -1)
    out = np.empty((B, groups, og, n))
    if og == 1 and cg == 1:
        wt = w.reshape(groups, -1)
        out[:] = 0.0
        for t, off in enumerate(offs):
            out[:, :, 0] += wt[:, t].reshape(1, groups, 1) * flat[:, :, 0, off:off + n]
    else:
        wm = _wmat(w, groups)
        rows = len(offs) * cg
        spans = _chunks(n, rows)
        buf = np.empty((rows, spans[0][1] - spans[0][0]))
        for b in range(B):
            for g in range(groups):
                for p0, p1 in spans:
                    out[b, g, :, p0:p1] = wm[g] @ _im2col(flat[b, g], offs, p0, p1, buf)
    return _crop(out.reshape((B, og * groups) + tuple(pshape)), out_sp)


def _embed(g, pshape):
    full = np.zeros(g.shape[:2] + tuple(pshape))
    full[(slice(None), slice(None)) + tuple(slice(0, o) for o in g.shape[2:])] = g
    return full


def _corr_input_grad_s1(gout, w, dilation, xp_shape, groups):
    B = gout.shape[0]
    og, cg, pshape, n, offs = _s1_setup(xp_shape, w.shape, dilation, groups)
    if og == 1 and cg == 1:
        g = _embed(gout, pshape).reshape(B, groups, 1, n)
        dflat = np.zeros((B, groups, 1, n + offs[-1]))
        wt = w.reshape(groups, -1)
        for t, off in enumerate(offs):
            dflat[:, :, 0, off:off + n] += wt[:, t].reshape(1, groups, 1) * g[:, :, 0]
        return dflat[..., :n].reshape(xp_shape)
    wm = _wmat(w, groups)
    T = len(offs)
    dx = np.empty((B, groups, cg, n))
    if og <= 2 * cg:
        # gather form: dx[p] = sum_t W_t^T g[p - off_t], read from a front-padded g
        top = offs[-1]
        gp = np.zeros((B, groups, og, n + top))
        gp[..., top:] = _embed(gout, pshape).reshape(B, groups, og, n)
        rev = [top - off for off in offs]
        wflip = wm.reshape(groups, og, T, cg).transpose(0, 3, 2, 1).reshape(groups, cg, T * og)
        spans = _chunks(n, T * og)
        buf = np.empty((T * og, spans[0][1] - spans[0][0]))
        for b in range(B):
            for gi in range(groups):
                for p0, p1 in spans:
                    dx[b, gi, :, p0:p1] = wflip[gi] @ _im2col(gp[b, gi], rev, p0, p1, buf)
        return dx.reshape(xp_shape)
    g = _embed(gout, pshape).reshape(B, groups, og, n)
    dflat = np.zeros((B, groups, cg, n + offs[-1]))
    for b in range(B):
        for gi in range(groups):
            dst = dflat[b, gi]
            for p0, p1 in _chunks(n, T * cg):
                cols = wm[gi].T @ g[b, gi, :, p0:p1]
                for t, off in enumerate(offs):
                    dst[:, off + p0:off + p1] += cols[t * cg:(t + 1) * cg]
    return dflat[..., :n].reshape(xp_shape)


def _corr_weight_grad_s1(xp, gout, w_shape, dilation, groups):
    B = xp.shape[0]
    og, cg, pshape, n, offs = _s1_setup(xp.shape, w_shape, dilation, groups)
    flat = _flat_padded(xp, offs[-1]).reshape(B, groups, cg, -1)
    g = _embed(gout, pshape).reshape(B, groups, og, n)
    T = len(offs)
    if og == 1 and cg == 1:
        dw = np.empty((groups, T))
        for t, off in enumerate(offs):
            dw[:, t] = np.einsum("bgn,bgn->g", g[:, :, 0], flat[:, :, 0, off:off + n])
        return dw.reshape(w_shape)
    rows = T * cg
    dwm = np.zeros((groups, og, rows))
    spans = _chunks(n, rows)
    buf = np.empty((rows, spans[0][1] - spans[0][0]))
    for b in range(B):
        for gi in range(groups):
            for p0, p1 in spans:
                dwm[gi] += g[b, gi, :, p0:p1] @ _im2col(flat[b, gi], offs, p0, p1, buf).T
    # undo the tap-major column layout
    return dwm.reshape(groups, og, T, cg).transpose(0, 1, 3, 2).reshape(w_shape)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1,
           groups: int = 1) -> Tensor:
    """Cross-correlation over the regular grid, zero padded."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be 5-D (B,C,H,W,D), got shape {x.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"conv3d weight must be 5-D, got shape {weight.shape}")
    stride, padding, dilation = _triple(stride), _triple(padding), _triple(dilation)
    if min(stride) < 1 or min(padding) < 0 or min(dilation) < 1:
        raise ContractError("stride/dilation must be positive and padding nonnegative")
    B, cin = x.shape[:2]
    cout, cg = weight.shape[:2]
    if cin % groups or cout % groups:
        raise ContractError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cg * groups != cin:
        raise DimensionError(f"channel axis: input has {cin} channels, weight expects {cg * groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias axis: expected ({cout},), got {bias.shape}")
    out_sp = tuple(_out_extent(n, k, s, p, d) for n, k, s, p, d in
                   zip(x.shape[2:], weight.shape[2:], stride, padding, dilation))
    for axis, o in zip("HWD", out_sp):
        if o < 1:
            raise DimensionError(f"conv3d: axis {axis} too small for kernel")
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pads) if any(padding) else x.data
    w = weight.data
    unit = stride == (1, 1, 1)
    if unit:
        out = _corr_s1(xp, w, dilation, out_sp, groups)
    else:
        out = _corr(xp, w, stride, dilation, out_sp, groups)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            if unit:
                dxp = _corr_input_grad_s1(g, w, dilation, xp.shape, groups)
            else:
                dxp = _corr_input_grad(g, w, stride, dilation, xp.shape, groups)
            crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
            gx = dxp[crop]
        if weight.requires_grad:
            if unit:
                gw = _corr_weight_grad_s1(xp, g, w.shape, dilation, groups)
            else:
                gw = _corr_weight_grad(xp, g, w.shape, stride, dilation, groups)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=2) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout, kh, kw, kd), no padding."""
    stride = _triple(stride)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError("conv_transpose3d expects 5-D input and weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"channel axis: input has {x.shape[1]}, weight expects {weight.shape[0]}")
    B = x.shape[0]
    cout = weight.shape[1]
    out_sp = tuple((n - 1) * s + k for n, s, k in zip(x.shape[2:], stride, weight.shape[2:]))
    w = weight.data
    out = _corr_input_grad(x.data, w, stride, (1, 1, 1), (B, cout) + out_sp, 1)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _corr(g, w, stride, (1, 1, 1), x.shape[2:], 1)
        if weight.requires_grad:
            gw = _corr_weight_grad(g, x.data, w.shape, stride, (1, 1, 1), 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def dwconv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=None) -> Tensor:
    """Depthwise convolution; ``weight`` is (C, 1, k, k, k)."""
    if weight.ndim != 5 or weight.shape[1] != 1 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"dwconv3d weight must be ({x.shape[1]}, 1, k, k, k), got {weight.shape}")
    if padding is None:
        padding = tuple(k // 2 for k in weight.shape[2:])
    return conv3d(x, weight, bias, padding=padding, groups=x.shape[1])


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis; ``weight`` is (Cout, Cin)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: trailing axis {x.shape[-1]} != weight input width {weight.shape[1]}")
    xd, w = x.data, weight.data
    out = xd @ w.T
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise DimensionError(f"linear bias must be ({w.shape[0]},), got {bias.shape}")
        out = out + bias.data

    def backward(g):
        gx = g @ w if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


# -- normalization ------------------------------------------------------------

def _standardize_rows(x2: np.ndarray, eps: float):
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _standardize_rows_grad(g2, xhat, inv):
    return inv * (g2 - g2.mean(axis=1, keepdims=True) - xhat * (g2 * xhat).mean(axis=1, keepdims=True))


def group_norm(x: Tensor, num_groups: int, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = GN_EPS) -> Tensor:
    B, C = x.shape[:2]
    if num_groups < 1 or C % num_groups:
        raise ContractError(f"group_norm: {C} channels not divisible by {num_groups} groups")
    xhat, inv = _standardize_rows(x.data.reshape(B * num_groups, -1), eps)
    xhat = xhat.reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gd = gain.data.reshape(bshape) if gain is not None else 1.0
    out = xhat * gd
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        res = [None]
        if x.requires_grad:
            rows = (g * gd).reshape(B * num_groups, -1)
            res[0] = _standardize_rows_grad(rows, xhat.reshape(B * num_groups, -1), inv).reshape(x.shape)
        if gain is not None:
            res.append((g * xhat).sum(axis=red) if gain.requires_grad else None)
        if bias is not None:
            res.append(g.sum(axis=red) if bias.requires_grad else None)
        return tuple(res)

    parents = [x] + [t for t in (gain, bias) if t is not None]
    return Tensor.from_op(out, parents, backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the trailing (channel) axis."""
    C = x.shape[-1]
    rows = x.data.reshape(-1, C)
    xhat, inv = _standardize_rows(rows, eps)
    gd = gain.data if gain is not None else 1.0
    out = xhat * gd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        res = [_standardize_rows_grad(g2 * gd, xhat, inv).reshape(x.shape) if x.requires_grad else None]
        if gain is not None:
            res.append((g2 * xhat).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            res.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(res)

    parents = [x] + [t for t in (gain, bias) if t is not None]
    return Tensor.from_op(out, parents, backward)


def normalize(x: Tensor, kind: str, gain: Tensor | None = None, bias: Tensor | None = None,
              num_groups: int | None = None) -> Tensor:
    if kind == "group_norm":
        if num_groups is None:
            raise ContractError("group_norm needs num_groups")
        return group_norm(x, num_groups, gain, bias)
    if kind == "layer_norm":
        return layer_norm(x, gain, bias)
    raise ContractError(f"unknown normalization {kind!r}")


def gn_groups(channels: int, cap: int = 8) -> int:
    groups = min(cap, channels)
    if channels % groups:
        raise ContractError(f"{channels} channels not divisible by {groups} GN groups")
    return groups


# -- resampling -----------------------------------------------------------------

def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    prev = np.take(a, np.maximum(np.arange(n) - 1, 0), axis=axis)
    nxt = np.take(a, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    n = shape[axis] // 2
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    idx = [slice(None)] * out.ndim
    # even[i] pulls 0.25 from a[i-1] (clamped); odd[i] pulls 0.25 from a[i+1] (clamped)
    idx[axis] = slice(0, n - 1)
    lo = tuple(idx)
    idx[axis] = slice(1, n)
    hi = tuple(idx)
    out[lo] += 0.25 * even[hi]
    out[hi] += 0.25 * odd[lo]
    idx[axis] = slice(0, 1)
    out[tuple(idx)] += 0.25 * even[tuple(idx)]
    idx[axis] = slice(n - 1, n)
    out[tuple(idx)] += 0.25 * odd[tuple(idx)]
    return out


def upsample_trilinear(x: Tensor, scale: int = 2) -> Tensor:
    """Double every spatial extent with half-pixel-centre trilinear weights."""
    if scale != 2:
        raise ContractError("only scale 2 is supported")
    out = x.data
    for ax in (2, 3, 4):
        out = _up2_axis(out, ax)

    def backward(g):
        for ax in (4, 3, 2):
            g = _up2_axis_adjoint(g, ax)
        return (g,)

    return Tensor.from_op(out, (x,), backward)


def pool_max3d(x: Tensor) -> Tensor:
    """2x2x2 max pool, stride 2; ties route to the first index in window order."""
    B, C, H, W, D = x.shape
    for axis, n in zip("HWD", (H, W, D)):
        if n % 2:
            raise DimensionError(f"pool_max3d: axis {axis} has odd extent {n}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2, D // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    win = win.reshape(B, C, H // 2, W // 2, D // 2, 8)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H // 2, W // 2, D // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gw.reshape(B, C, H, W, D),)

    return Tensor.from_op(out, (x,), backward)


# -- deformable sampling --------------------------------------------------------

def _corner_plan(coords: np.ndarray, sizes, integer_axes=()):
    """Clamp coordinates and return per-axis (lo, hi, frac, inside) arrays.

    For an axis listed in ``integer_axes`` only the low corner is kept
    (``hi is None``).
    """
    plan = []
    for ax, n in enumerate(sizes):
        c = coords[..., ax]
        inside = (c >= 0) & (c <= n - 1)
        cc = np.clip(c, 0, n - 1)
        if ax in integer_axes:
            lo = cc.astype(np.int64)
            if not np.array_equal(lo, cc):
                raise ContractError(f"grid_sample_trilinear: axis {ax} coordinates are not integral")
            plan.append((lo, None, np.zeros(c.shape), inside))
            continue
        if n > 1:
            lo = np.minimum(np.floor(cc).astype(np.int64), n - 2)
            hi = lo + 1
        else:
            lo = np.zeros(c.shape, dtype=np.int64)
            hi = lo
        plan.append((lo, hi, cc - lo, inside))
    return plan


def grid_sample_trilinear(x: Tensor, coords: Tensor, integer_axes: tuple[int, ...] = ()) -> Tensor:
    """Sample ``x`` (B,C,H,W,D) at fractional voxel coordinates (B,M,3).

    Out-of-range coordinates are clamped to the border voxel; the coordinate
    gradient is zero wherever clamping engaged.  Axes in ``integer_axes`` must
    carry integral coordinates; they are sampled with a single corner and get
    no coordinate gradient.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    if x.ndim != 5 or coords.ndim != 3 or coords.shape[2] != 3 or coords.shape[0] != x.shape[0]:
        raise DimensionError(f"grid_sample_trilinear: input {x.shape}, coords {coords.shape}")
    B, C, H, W, D = x.shape
    M = coords.shape[1]
    if not np.all(np.isfinite(coords.data)):
        raise ContractError("grid_sample_trilinear: non-finite coordinates")
    (hl, hh, th, ih), (wl, wh, tw, iw), (dl, dh, td, id_) = _corner_plan(coords.data, (H, W, D), integer_axes)
    flat = x.data.reshape(B, C, H * W * D)
    corners = []
    out = np.zeros((B, C, M))
    def pairs(lo, hi, t):
        return ((lo, 1 - t, -1.0),) if hi is None else ((lo, 1 - t, -1.0), (hi, t, 1.0))

    for (a, ta, sa), (b, tb, sb), (c, tc, sc) in itertools.product(pairs(hl, hh, th), pairs(wl, wh, tw),
                                                                   pairs(dl, dh, td)):
        idx = (a * W + b) * D + c
        vals = np.stack([flat[i].take(idx[i], axis=1) for i in range(B)])
        out += (ta * tb * tc)[:, None, :] * vals
        corners.append((idx, ta, tb, tc, vals, (sa, sb, sc)))

    def backward(g):
        gx = gc = None
        if x.requires_grad:
            base = (np.arange(B * C) * (H * W * D)).reshape(B, C, 1)
            idx_all = np.concatenate([(base + idx[:, None, :]).ravel() for idx, *_ in corners])
            val_all = np.concatenate([(g * (ta * tb * tc)[:, None, :]).ravel() for _, ta, tb, tc, *_ in corners])
            gx = np.bincount(idx_all, weights=val_all, minlength=B * C * H * W * D).reshape(x.shape)
        if coords.requires_grad:
            gc = np.zeros((B, M, 3))
            for _, ta, tb, tc, vals, (sa, sb, sc) in corners:
                s = np.einsum("bcm,bcm->bm", g, vals) if C > 1 else g[:, 0] * vals[:, 0]
                gc[..., 0] += sa * tb * tc * s
                gc[..., 1] += sb * ta * tc * s
                gc[..., 2] += sc * ta * tb * s
            for ax, inside in enumerate((ih, iw, id_)):
                gc[..., ax] = 0.0 if ax in integer_axes else gc[..., ax] * inside
        return gx, gc

    return Tensor.from_op(out, (x, coords), backward)
