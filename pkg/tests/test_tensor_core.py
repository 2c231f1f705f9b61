import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdsvm import functional as F
from mdsvm.gradcheck import check_gradients, projected, relative_error
from mdsvm.tensor import (ContractError, DimensionError, Tensor, activation, combine, concat, exp, log, matmul,
                          no_grad, relu, sigmoid, silu, softplus, tanh, tsum)


def rnd(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def naive_conv3d(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct seven-loop cross-correlation used as an oracle."""
    B, cin, H, W, D = x.shape
    cout, cg, kh, kw, kd = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    oh = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    od = (D + 2 * padding - dilation * (kd - 1) - 1) // stride + 1
    out = np.zeros((B, cout, oh, ow, od))
    og = cout // groups
    for o in range(cout):
        g = o // og
        for i, j, k in itertools.product(range(oh), range(ow), range(od)):
            patch = xp[:, g * cg:(g + 1) * cg,
                       i * stride:i * stride + dilation * (kh - 1) + 1:dilation,
                       j * stride:j * stride + dilation * (kw - 1) + 1:dilation,
                       k * stride:k * stride + dilation * (kd - 1) + 1:dilation]
            out[:, o, i, j, k] = np.sum(patch * w[o], axis=(1, 2, 3, 4))
        if b is not None:
            out[:, o] += b[o]
    return out


# -- conv3d ------------------------------------------------------------------

def test_conv_zero_input_gives_zero():
    w = np.random.default_rng(0).standard_normal((1, 1, 3, 3, 3))
    out = F.conv3d(Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(w), Tensor(np.zeros(1)))
    assert np.all(out.data == 0)


def test_conv_identity_kernel_is_exact():
    x = np.random.default_rng(1).standard_normal((1, 1, 5, 4, 6))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    out = F.conv3d(Tensor(x), Tensor(w), padding=1)
    assert np.array_equal(out.data, x)


def test_conv_all_ones_hand_sum():
    x = np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2)
    out = F.conv3d(Tensor(x), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert out.shape == (1, 1, 1, 1, 1) and out.data.item() == 28.0


@pytest.mark.parametrize("stride,padding,dilation,groups", [
    (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (2, 0, 1, 2), (1, 0, 1, 1),
])
def test_conv_matches_direct_loops(stride, padding, dilation, groups):
    rng = np.random.default_rng(stride * 7 + padding * 3 + dilation + groups)
    x = rng.standard_normal((2, 4, 5, 6, 4))
    w = rng.standard_normal((6, 4 // groups, 3, 3, 3))
    b = rng.standard_normal(6)
    got = F.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation, groups).data
    assert np.allclose(got, naive_conv3d(x, w, b, stride, padding, dilation, groups), atol=1e-12)


def test_conv_shape_errors_name_the_axis():
    x = Tensor(np.zeros((1, 3, 4, 4, 4)))
    with pytest.raises(DimensionError, match="channel"):
        F.conv3d(x, Tensor(np.zeros((2, 2, 3, 3, 3))))
    with pytest.raises(DimensionError, match="axis D"):
        F.conv3d(Tensor(np.zeros((1, 1, 4, 4, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_transposed_conv_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 3, 2, 3, 2))
    w = rng.standard_normal((3, 2, 2, 2, 2))
    y = rng.standard_normal((1, 2, 4, 6, 4))
    up = F.conv_transpose3d(Tensor(x), Tensor(w)).data
    down = F.conv3d(Tensor(y), Tensor(w), stride=2).data
    assert np.isclose(np.sum(up * y), np.sum(down * x), atol=1e-12)


# -- depthwise conv ------------------------------------------------------------

def test_dwconv_center_one_is_identity():
    x = np.random.default_rng(4).standard_normal((1, 3, 4, 4, 4))
    w = np.zeros((3, 1, 3, 3, 3))
    w[:, 0, 1, 1, 1] = 1
    assert np.array_equal(F.dwconv3d(Tensor(x), Tensor(w)).data, x)


def test_dwconv_all_ones_counts_27():
    x = np.full((1, 2, 5, 5, 5), 1.5)
    out = F.dwconv3d(Tensor(x), Tensor(np.ones((2, 1, 3, 3, 3)))).data
    assert out[0, 1, 2, 2, 2] == 27 * 1.5


def test_dwconv_channels_are_independent():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)))
    base = F.dwconv3d(Tensor(x), w).data
    x2 = x.copy()
    x2[0, 0] += rng.standard_normal((4, 4, 4))
    assert np.array_equal(F.dwconv3d(Tensor(x2), w).data[0, 1], base[0, 1])


# -- grid sample -------------------------------------------------------------------

def clamp_then_interpolate(vol, p):
    """Scalar oracle: clamp the coordinate, then blend the eight neighbours."""
    H, W, D = vol.shape
    c = [min(max(v, 0.0), n - 1) for v, n in zip(p, (H, W, D))]
    lo = [min(int(math.floor(v)), max(n - 2, 0)) for v, n in zip(c, (H, W, D))]
    t = [v - l for v, l in zip(c, lo)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        idx = [min(l + k, n - 1) for l, k, n in zip(lo, corner, (H, W, D))]
        wgt = np.prod([tt if k else 1 - tt for tt, k in zip(t, corner)])
        total += wgt * vol[tuple(idx)]
    return total


def test_grid_sample_on_grid_is_exact():
    x = np.random.default_rng(6).standard_normal((1, 2, 3, 3, 3))
    out = F.grid_sample_trilinear(Tensor(x), Tensor(np.array([[[1.0, 1.0, 1.0]]])))
    assert np.array_equal(out.data[0, :, 0], x[0, :, 1, 1, 1])


def test_grid_sample_midpoint():
    x = np.zeros((1, 1, 2, 1, 1))
    x[0, 0, 1] = 2.0
    out = F.grid_sample_trilinear(Tensor(x), Tensor(np.array([[[0.5, 0.0, 0.0]]])))
    assert out.data.item() == 1.0


def test_grid_sample_border_clamp_matches_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 1, 4, 3, 5))
    pts = np.concatenate([[[-3.0, 0.0, 0.0]], rng.uniform(-2, 6, (40, 3))])[None]
    out = F.grid_sample_trilinear(Tensor(x), Tensor(pts)).data[0, 0]
    ref = [clamp_then_interpolate(x[0, 0], p) for p in pts[0]]
    assert out[0] == x[0, 0, 0, 0, 0]
    assert np.allclose(out, ref, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_grid_sample_integer_coords_reproduce_values(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 4, 5))
    idx = np.stack([rng.integers(0, n, 12) for n in (3, 4, 5)], axis=-1)
    out = F.grid_sample_trilinear(Tensor(x), Tensor(idx[None].astype(float))).data[0]
    assert np.array_equal(out, x[0][:, idx[:, 0], idx[:, 1], idx[:, 2]])


def test_grid_sample_integer_axis_fast_path_matches_general():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 5, 5, 5))
    pts = rng.uniform(-1, 5, (1, 30, 3))
    pts[..., 1] = np.round(pts[..., 1])
    a = F.grid_sample_trilinear(Tensor(x), Tensor(pts)).data
    b = F.grid_sample_trilinear(Tensor(x), Tensor(pts), integer_axes=(1,)).data
    assert np.allclose(a, b, atol=1e-14)
    with pytest.raises(ContractError):
        F.grid_sample_trilinear(Tensor(x), Tensor(pts), integer_axes=(0,))


# -- activations and normalisation ---------------------------------------------------

def test_activation_values():
    v = Tensor(np.array([-1.0, 2.0, 0.0, 1.0]))
    assert list(relu(v).data) == [0.0, 2.0, 0.0, 1.0]
    s = silu(v).data
    assert s[2] == 0.0
    assert abs(s[3] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-15
    assert abs(s[3] - 0.7310585786300049) < 1e-12
    assert np.array_equal(activation(v, "silu").data, s)
    with pytest.raises(ContractError):
        activation(v, "gelu")


def test_sigmoid_and_softplus_are_stable_at_extremes():
    v = Tensor(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(sigmoid(v).data)) and np.all(np.isfinite(softplus(v).data))
    assert softplus(v).data[1] == 800.0


def test_group_norm_constant_input_is_zero():
    out = F.group_norm(Tensor(np.full((1, 4, 2, 2, 2), 3.0)), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(out.data == 0)


def test_group_norm_two_value_closed_form():
    x = np.array([-1.0, 1.0]).reshape(1, 1, 2, 1, 1)
    out = F.group_norm(Tensor(x), 1).data.ravel()
    c = 1.0 / math.sqrt(1.0 + 1e-5)
    assert np.allclose(out, [-c, c], atol=1e-15)


def test_group_norm_statistics_and_errors():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 8, 3, 3, 2)) * 4 + 1
    out = F.group_norm(Tensor(x), 4).data.reshape(2, 4, -1)
    var = x.reshape(2, 4, -1).var(axis=-1, keepdims=True)
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    assert np.allclose(out.var(axis=-1, keepdims=True), var / (var + 1e-5), atol=1e-10)
    with pytest.raises(ContractError):
        F.group_norm(Tensor(x), 3)
    assert F.gn_groups(16) == 8 and F.gn_groups(4) == 4


def test_layer_norm_and_normalize_shapes():
    x = Tensor(np.random.default_rng(10).standard_normal((2, 5, 6)))
    assert F.normalize(x, "layer_norm").shape == x.shape
    y = Tensor(np.random.default_rng(11).standard_normal((1, 4, 2, 2, 2)))
    assert F.normalize(y, "group_norm", num_groups=2).shape == y.shape


# -- linear, upsample, pool, combine -----------------------------------------------------

def test_linear_examples():
    x = Tensor(np.array([[1.0, 2.0]]))
    assert np.array_equal(F.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    assert np.array_equal(F.linear(x, Tensor(np.zeros((3, 2))), Tensor(np.array([1.0, 2, 3]))).data, [[1, 2, 3]])
    assert np.array_equal(F.linear(x, Tensor(np.array([[1.0, 1.0], [0.0, 1.0]]))).data, [[3.0, 2.0]])


def test_upsample_constant_and_ramp():
    c = F.upsample_trilinear(Tensor(np.full((1, 1, 2, 3, 2), 4.0))).data
    assert c.shape == (1, 1, 4, 6, 4) and np.all(c == 4.0)
    ramp = np.arange(4, dtype=float).reshape(1, 1, 4, 1, 1) * np.ones((1, 1, 4, 2, 2))
    up = F.upsample_trilinear(Tensor(ramp)).data[0, 0, :, 0, 0]
    # output i sits at source (i + 0.5) / 2 - 0.5, clamped to [0, 3]
    src = np.clip((np.arange(8) + 0.5) / 2 - 0.5, 0, 3)
    assert np.allclose(up, src, atol=1e-15)


def test_pool_max_values_and_gradient_routing():
    x = np.arange(8, dtype=float).reshape(1, 1, 2, 2, 2)
    t = Tensor(x, requires_grad=True)
    out = F.pool_max3d(t)
    assert out.data.item() == 7.0
    tsum(out).backward()
    expected = np.zeros_like(x)
    expected[0, 0, 1, 1, 1] = 1
    assert np.array_equal(t.grad, expected)
    tie = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    tsum(F.pool_max3d(tie)).backward()
    assert tie.grad[0, 0, 0, 0, 0] == 1 and tie.grad.sum() == 1
    with pytest.raises(DimensionError):
        F.pool_max3d(Tensor(np.ones((1, 1, 3, 2, 2))))


def test_combine_kinds():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((1, 16, 2, 2, 2)))
    assert np.array_equal(combine(x, Tensor(np.zeros(x.shape)), "add").data, x.data)
    assert np.array_equal(combine(x, Tensor(np.ones(x.shape)), "hadamard").data, x.data)
    parts = concat([x, x, x, x], axis=1)
    assert parts.shape[1] == 64
    with pytest.raises(ContractError):
        combine(x, Tensor(np.zeros((1, 8, 2, 2, 2))), "add")
    with pytest.raises(DimensionError):
        concat([x, Tensor(np.zeros((1, 16, 3, 2, 2)))], axis=1)


# -- autodiff engine ---------------------------------------------------------------

def test_backward_simple_rules():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    tsum(x).backward()
    assert np.array_equal(x.grad, np.ones(3))
    x.grad = None
    tsum(x * x).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * 3.0
    tsum(y + y * y).backward()
    # d/dx (3x + 9x^2) = 3 + 18x
    assert x.grad.item() == 3 + 18 * 2.0


def test_non_scalar_backward_is_rejected():
    with pytest.raises(ContractError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_ops_are_pure():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    a = F.conv3d(Tensor(x), Tensor(w), padding=1).data
    b = F.conv3d(Tensor(x.copy()), Tensor(w.copy()), padding=1).data
    assert np.array_equal(a, b)


def test_check_finite_flags_nan():
    with pytest.raises(ContractError):
        Tensor(np.array([1.0, np.nan])).check_finite()


def test_relative_error_floor_handles_zero_gradients():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-4
    assert relative_error(np.ones(3), -np.ones(3)) == 2.0


OPS = {
    "conv3d": lambda r: ((x := rnd(r, 1, 2, 4, 4, 3)), (w := rnd(r, 3, 2, 3, 3, 3)), (b := rnd(r, 3)),
                         lambda: F.conv3d(x, w, b, padding=1)),
    "conv3d_strided": lambda r: ((x := rnd(r, 1, 2, 5, 4, 4)), (w := rnd(r, 2, 1, 3, 3, 3)), (b := rnd(r, 2)),
                                 lambda: F.conv3d(x, w, b, stride=2, padding=1, groups=2)),
    "conv_transpose3d": lambda r: ((x := rnd(r, 1, 2, 2, 2, 2)), (w := rnd(r, 2, 3, 2, 2, 2)), (b := rnd(r, 3)),
                                   lambda: F.conv_transpose3d(x, w, b)),
    "dwconv3d": lambda r: ((x := rnd(r, 1, 3, 3, 4, 3)), (w := rnd(r, 3, 1, 3, 3, 3)), (b := rnd(r, 3)),
                           lambda: F.dwconv3d(x, w, b)),
    "linear": lambda r: ((x := rnd(r, 2, 3, 4)), (w := rnd(r, 5, 4)), (b := rnd(r, 5)),
                         lambda: F.linear(x, w, b)),
    "group_norm": lambda r: ((x := rnd(r, 2, 4, 2, 3, 2)), (g := rnd(r, 4)), (b := rnd(r, 4)),
                             lambda: F.group_norm(x, 2, g, b)),
    "layer_norm": lambda r: ((x := rnd(r, 2, 3, 5)), (g := rnd(r, 5)), (b := rnd(r, 5)),
                             lambda: F.layer_norm(x, g, b)),
    "upsample": lambda r: ((x := rnd(r, 1, 2, 2, 3, 2)), lambda: F.upsample_trilinear(x)),
    "pool_max": lambda r: ((x := rnd(r, 1, 2, 4, 4, 2)), lambda: F.pool_max3d(x)),
    "grid_sample": lambda r: ((x := rnd(r, 1, 2, 3, 4, 3)),
                              (c := Tensor(r.uniform(-0.8, 3.8, (1, 15, 3)) + 0.013, requires_grad=True)),
                              lambda: F.grid_sample_trilinear(x, c)),
    "relu": lambda r: ((x := rnd(r, 3, 4)), lambda: relu(x)),
    "silu": lambda r: ((x := rnd(r, 3, 4)), lambda: silu(x)),
    "sigmoid": lambda r: ((x := rnd(r, 3, 4)), lambda: sigmoid(x)),
    "tanh": lambda r: ((x := rnd(r, 3, 4)), lambda: tanh(x)),
    "softplus": lambda r: ((x := rnd(r, 3, 4)), lambda: softplus(x)),
    "exp_log": lambda r: ((x := rnd(r, 3, 4)), lambda: log(exp(x) + 1.0)),
    "matmul": lambda r: ((a := rnd(r, 2, 3, 4)), (b := rnd(r, 4, 2)), lambda: matmul(a, b)),
    "hadamard_concat": lambda r: ((a := rnd(r, 1, 2, 2, 2, 2)), (b := rnd(r, 1, 2, 2, 2, 2)),
                                  lambda: concat([combine(a, b, "hadamard"), combine(a, b, "add")], axis=1)),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_primitive_gradient_single_seed(op):
    *inputs, fn = OPS[op](np.random.default_rng(100))
    assert check_gradients(projected(fn), inputs) < 1e-4
