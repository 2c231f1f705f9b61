"""Self-check suites run by ``mdsvm verify``.

Each check returns ``(name, passed, detail)``.  The suites are quick,
reduced-size versions of the property tests in the test tree.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import functional as F
from . import losses, metrics, pipeline
from .formats import Volume, decode_checkpoint, decode_volume, encode_checkpoint, encode_volume
from .gradcheck import check_gradients, projected
from .snake import MdsConvBlock, SnakeKernelSpec, cumulate_offsets, snake_conv_axis
from .ssm import RvmLayer, VssmBlock, selective_scan_kernel
from .tensor import Tensor, concat, relu, sigmoid, silu, softplus, tanh

GRAD_TOL = 1e-4
# Composed blocks with ReLU and trilinear kinks: a 1e-4 step occasionally straddles one.
KINKED_STEP = 1e-6


def _rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def _grad_cases(rng):
    x = _rand(rng, 1, 2, 4, 4, 4)
    w = _rand(rng, 3, 2, 3, 3, 3)
    b = _rand(rng, 3)
    yield "conv3d", projected(lambda: F.conv3d(x, w, b, padding=1)), [x, w, b]
    dw = _rand(rng, 2, 1, 3, 3, 3)
    yield "dwconv3d", projected(lambda: F.dwconv3d(x, dw)), [x, dw]
    pts = Tensor(rng.uniform(0.1, 2.9, (1, 10, 3)) + 0.05, requires_grad=True)
    yield "grid_sample", projected(lambda: F.grid_sample_trilinear(x, pts)), [x, pts]
    gain, bias = _rand(rng, 2), _rand(rng, 2)
    yield "group_norm", projected(lambda: F.group_norm(x, 2, gain, bias)), [x, gain, bias]
    seq = _rand(rng, 1, 5, 4)
    lw, lb = _rand(rng, 3, 4), _rand(rng, 3)
    yield "linear", projected(lambda: F.linear(seq, lw, lb)), [seq, lw, lb]
    yield "layer_norm", projected(lambda: F.layer_norm(seq)), [seq]
    yield "upsample", projected(lambda: F.upsample_trilinear(x)), [x]
    yield "activations", projected(lambda: silu(x) + tanh(x) + sigmoid(x) + softplus(x) + relu(x + 0.05)), [x]
    yield "concat", projected(lambda: concat([x, x * 2.0], axis=1)), [x]
    u, d = _rand(rng, 1, 6, 3), Tensor(rng.uniform(0.1, 1.0, (1, 6, 3)), requires_grad=True)
    A = Tensor(-rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    Bm, Cm, D = _rand(rng, 1, 6, 4), _rand(rng, 1, 6, 4), _rand(rng, 3)
    yield "selective_scan", projected(lambda: selective_scan_kernel(u, d, A, Bm, Cm, D)), [u, d, A, Bm, Cm, D]
    p = Tensor(rng.uniform(0.05, 0.95, (4, 4, 4)), requires_grad=True)
    g = (rng.random((4, 4, 4)) > 0.5).astype(float)
    yield "dice_loss", lambda: losses.dice_loss(p, g), [p]
    yield "focal_loss", lambda: losses.focal_loss(p, g), [p]
    blk = MdsConvBlock(rng, 2, 4, c_max=2)
    for s in blk.snakes:
        # keep sampled coordinates off the integer lattice where trilinear kinks live
        s.predictor.weight.data[:] = 0.003 * rng.standard_normal(s.predictor.weight.shape)
        s.predictor.bias.data[:] = np.arctanh(0.35)
    xb = _rand(rng, 1, 2, 6, 6, 6)
    yield "mdsconv", projected(lambda: blk(xb)), [xb] + blk.parameters(), KINKED_STEP
    vssm = VssmBlock(rng, 3, state_dim=3)
    wv = _rand(rng, 1, 8, 3)
    yield "vssm", projected(lambda: vssm(wv, (2, 2, 2))), [wv] + vssm.parameters()
    rvm = RvmLayer(rng, 4, 4, state_dim=4)
    xr = _rand(rng, 1, 4, 2, 2, 2)
    yield "rvm", projected(lambda: rvm(xr)), [xr] + rvm.parameters()


def suite_gradcheck(seeds: int = 1):
    results = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, inputs, *step in _grad_cases(rng):
            err = check_gradients(fn, inputs, *step, max_entries=24, seed=seed)
            results.append((f"grad {name} seed {seed}", err < GRAD_TOL, f"rel err {err:.2e}"))
    return results


def _unrolled_scan(u, delta, A, B, C, D):
    nb, L, E = u.shape
    y = np.zeros_like(u)
    for b in range(nb):
        h = np.zeros((E, A.shape[1]))
        for t in range(L):
            h = np.exp(delta[b, t][:, None] * A) * h + (delta[b, t] * u[b, t])[:, None] * B[b, t][None, :]
            y[b, t] = h @ C[b, t] + D * u[b, t]
    return y


def suite_oracle(cases: int = 10):
    results = []
    rng = np.random.default_rng(123)
    worst = 0.0
    chunk = 0.0
    for _ in range(cases):
        L, E, N = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        u = rng.standard_normal((1, L, E))
        d = rng.uniform(0.01, 1.0, (1, L, E))
        A = -rng.uniform(0.1, 2.0, (E, N))
        B, C, D = rng.standard_normal((1, L, N)), rng.standard_normal((1, L, N)), rng.standard_normal(E)
        ref = _unrolled_scan(u, d, A, B, C, D)
        got = selective_scan_kernel(u, d, A, B, C, D).data
        worst = max(worst, float(np.abs(got - ref).max()))
        seq = selective_scan_kernel(u, d, A, B, C, D, method="sequential").data
        chk = selective_scan_kernel(u, d, A, B, C, D, method="chunked").data
        chunk = max(chunk, float(np.abs(seq - chk).max()))
    results.append(("scan vs unrolled recurrence", worst <= 1e-12, f"max abs {worst:.1e}"))
    results.append(("chunked vs sequential scan", chunk <= 1e-9, f"max abs {chunk:.1e}"))

    mismatch = 0
    for _ in range(cases):
        shape = tuple(int(n) for n in rng.integers(2, 9, 3))
        a = rng.random(shape) > 0.7
        b = rng.random(shape) > 0.7
        if not a.any() or not b.any():
            continue
        for fn in (metrics.hausdorff, metrics.average_hausdorff):
            if fn(a, b, method="oracle") != fn(a, b, method="tree"):
                mismatch += 1
    results.append(("HD/AHD tree path vs exhaustive oracle", mismatch == 0, f"{mismatch} mismatches"))
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[0, 0, 0] = b[3, 4, 0] = True
    hand = metrics.hausdorff(a, b) == 5.0 and metrics.average_hausdorff(a, b) == 5.0
    results.append(("hand case distance 5", hand, "HD = AHD = 5.0" if hand else "mismatch"))

    deg = 0.0
    for axis in "XYZ":
        spec = SnakeKernelSpec(axis, 2, 2, 3)
        x = rng.standard_normal((1, 2, 5, 6, 4))
        w = rng.standard_normal((3, 2, 5))
        coords = cumulate_offsets(Tensor(np.zeros((1, 10, 5, 6, 4))), spec)
        got = snake_conv_axis(Tensor(x), spec, Tensor(w), None, coords).data
        deg = max(deg, float(np.abs(got - _clamped_conv1d(x, w, spec.axis_index)).max()))
    results.append(("snake zero-offset degeneracy", deg <= 1e-10, f"max abs {deg:.1e}"))
    return results


def _clamped_conv1d(x, w, axis):
    k = w.shape[2]
    c = k // 2
    n = x.shape[2 + axis]
    out = np.zeros((x.shape[0], w.shape[0]) + x.shape[2:])
    for t in range(k):
        idx = np.clip(np.arange(n) + t - c, 0, n - 1)
        shifted = np.take(x, idx, axis=2 + axis)
        out += np.einsum("oi,bi...->bo...", w[:, :, t], shifted)
    return out


def suite_pipeline(cases: int = 5):
    rng = np.random.default_rng(7)
    ok_complete = ok_merge = ok_guidance = ok_perm = True
    for _ in range(cases):
        shape = (32, 32, 16)
        probs = np.zeros((16, 16, 8))
        for _ in range(int(rng.integers(1, 4))):
            c = rng.integers(0, (16, 16, 8))
            probs[c[0], c[1], c[2]] = 0.9
        image = rng.standard_normal(shape)
        blocks = pipeline.extract_blocks(probs, image, 0.5, 8, 1)
        mask = pipeline.guidance_mask(probs, shape)
        cover = np.zeros(shape, bool)
        for idx, blk in blocks:
            cover[idx.slices] = True
            ok_merge &= np.array_equal(blk, image[idx.slices])
        dil = ndimage.binary_dilation(mask, np.ones((3, 3, 3), bool))
        ok_complete &= bool(np.all(cover[dil]))
        pieces = [(idx, rng.random(blk.shape)) for idx, blk in blocks]
        merged = pipeline.merge_blocks(pieces, shape)
        ok_guidance &= not np.any(merged[~cover])
        perm = [pieces[i] for i in rng.permutation(len(pieces))]
        ok_perm &= np.array_equal(merged, pipeline.merge_blocks(perm, shape))
    vol = Volume.intensity(rng.standard_normal((4, 5, 6)), (0.5, 0.5, 1.0))
    lab = Volume.label(rng.random((4, 5, 6)) > 0.5)
    rt = all(np.array_equal(decode_volume(encode_volume(v)).data, v.data) for v in (vol, lab))
    recs = [("a", rng.standard_normal((2, 3))), ("b.c", rng.standard_normal(4))]
    back, _ = decode_checkpoint(encode_checkpoint(recs, {"k": 1}))
    rt &= all(n1 == n2 and np.array_equal(a1, a2) for (n1, a1), (n2, a2) in zip(recs, back))
    return [
        ("extraction completeness", ok_complete, f"{cases} cases"),
        ("block contents match source", ok_merge, f"{cases} cases"),
        ("guidance-only output", ok_guidance, f"{cases} cases"),
        ("merge permutation invariance", ok_perm, f"{cases} cases"),
        ("format round trips", rt, "MDSV + MDSVCKPT"),
    ]


SUITES = {"gradcheck": suite_gradcheck, "oracle": suite_oracle, "pipeline": suite_pipeline}


def run(name: str):
    if name == "all":
        return [r for fn in SUITES.values() for r in fn()]
    return SUITES[name]()


def format_table(results) -> str:
    width = max((len(n) for n, _, _ in results), default=10)
    return "\n".join(f"{'PASS' if ok else 'FAIL'}  {n:<{width}}  {detail}" for n, ok, detail in results)
