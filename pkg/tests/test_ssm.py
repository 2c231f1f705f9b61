import numpy as np
import pytest

from mdsvm import functional as F
from mdsvm.gradcheck import check_gradients, projected
from mdsvm.ssm import (RvmLayer, SsmParams, VssmBlock, linear_recurrence, rvm_forward, selective_scan,
                       selective_scan_kernel, vssm_forward)
from mdsvm.tensor import ContractError, Tensor, silu


def unroll(u, delta, A, B, C, D=None):
    y = np.zeros_like(u)
    for b in range(u.shape[0]):
        h = np.zeros(A.shape)
        for t in range(u.shape[1]):
            h = np.exp(delta[b, t][:, None] * A) * h + (delta[b, t] * u[b, t])[:, None] * B[b, t]
            y[b, t] = h @ C[b, t] + (0 if D is None else D * u[b, t])
    return y


def random_scan(rng, L=12, E=3, N=4, nb=1):
    return (rng.standard_normal((nb, L, E)), rng.uniform(0.05, 1.0, (nb, L, E)), -rng.uniform(0.1, 2, (E, N)),
            rng.standard_normal((nb, L, N)), rng.standard_normal((nb, L, N)), rng.standard_normal(E))


def test_zero_input_zero_output():
    rng = np.random.default_rng(0)
    u, d, A, B, C, D = random_scan(rng)
    assert np.all(selective_scan_kernel(np.zeros_like(u), d, A, B, C, D).data == 0)


def test_cumulative_sum_case_exact():
    u = np.arange(1.0, 9.0).reshape(1, 8, 1)
    ones = np.ones((1, 8, 1))
    for method in ("associative", "chunked", "sequential"):
        y = selective_scan_kernel(u, ones, np.zeros((1, 1)), ones, ones, method=method).data
        assert np.array_equal(y[0, :, 0], np.cumsum(u[0, :, 0]))


def test_single_step_closed_form():
    y = selective_scan_kernel(np.full((1, 1, 1), 3.0), np.full((1, 1, 1), 0.5), np.full((1, 1), -1.0),
                              np.ones((1, 1, 1)), np.full((1, 1, 1), 2.0), np.zeros(1))
    assert y.data.item() == 3.0


@pytest.mark.parametrize("method", ["associative", "chunked", "sequential"])
def test_matches_unrolled_recurrence(method):
    rng = np.random.default_rng(1)
    for _ in range(5):
        args = random_scan(rng, L=int(rng.integers(1, 150)), nb=2)
        assert np.abs(selective_scan_kernel(*args, method=method).data - unroll(*args)).max() <= 1e-12


def test_reverse_recurrence_matches_loop():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (2, 9, 3)), rng.standard_normal((2, 9, 3))
    ref = np.zeros_like(b)
    acc = np.zeros((2, 3))
    for t in range(8, -1, -1):
        acc = b[:, t] + (a[:, t + 1] * acc if t < 8 else 0)
        ref[:, t] = acc
    for method in ("associative", "chunked", "sequential"):
        assert np.allclose(linear_recurrence(a, b, method, reverse=True), ref, atol=1e-13)


def test_causality():
    rng = np.random.default_rng(3)
    u, d, A, B, C, D = random_scan(rng, L=20)
    base = selective_scan_kernel(u, d, A, B, C, D).data
    u2 = u.copy()
    u2[0, 11] += 5.0
    moved = selective_scan_kernel(u2, d, A, B, C, D).data
    assert np.array_equal(moved[0, :11], base[0, :11])
    assert not np.array_equal(moved[0, 11:], base[0, 11:])


def test_linearity_in_u():
    rng = np.random.default_rng(4)
    u, d, A, B, C, D = random_scan(rng, L=30)
    v = rng.standard_normal(u.shape)
    lhs = selective_scan_kernel(2.5 * u - 0.5 * v, d, A, B, C, D).data
    rhs = 2.5 * selective_scan_kernel(u, d, A, B, C, D).data - 0.5 * selective_scan_kernel(v, d, A, B, C, D).data
    assert np.abs(lhs - rhs).max() < 1e-10


def test_state_bound_on_constant_parameters():
    # |h_t| <= sup|dt*B*u| / (1 - sup exp(dt*A)) for constant dt, A, B and |u| <= 1
    rng = np.random.default_rng(5)
    L, N = 400, 3
    dt, A = 0.3, -np.array([[0.5, 1.0, 2.0]])
    u = rng.uniform(-1, 1, (1, L, 1))
    B = np.ones((1, L, N))
    h = linear_recurrence(np.broadcast_to(np.exp(dt * A), (1, L, 1, N)).copy(),
                          (dt * u)[..., None] * B[:, :, None, :])
    bound = dt * 1.0 / (1 - np.exp(dt * A).max())
    assert np.abs(h).max() <= bound


def test_non_finite_input_rejected():
    rng = np.random.default_rng(6)
    u, d, A, B, C, D = random_scan(rng)
    u[0, 3, 1] = np.nan
    with pytest.raises(ContractError):
        selective_scan_kernel(u, d, A, B, C, D)
    with pytest.raises(ContractError):
        selective_scan_kernel(u[:, :0], d[:, :0], A, B[:, :0], C[:, :0])


def test_scan_methods_agree():
    rng = np.random.default_rng(7)
    args = random_scan(rng, L=300, E=4, N=8)
    seq = selective_scan_kernel(*args, method="sequential").data
    for method in ("chunked", "associative"):
        assert np.abs(selective_scan_kernel(*args, method=method).data - seq).max() <= 1e-9


def test_ssm_params_invariants():
    p = SsmParams(np.random.default_rng(8), 6, state_dim=4)
    u = Tensor(np.random.default_rng(9).standard_normal((1, 5, 6)))
    delta, A, B, C = p.project(u)
    assert np.all(delta.data > 0) and np.all(-A.data > 0)
    assert B.shape == C.shape == (1, 5, 4)
    assert selective_scan(u, p).shape == (1, 5, 6)


def test_scan_gradient():
    rng = np.random.default_rng(10)
    ts = [Tensor(a, requires_grad=True) for a in random_scan(rng, L=7, E=2, N=3)]
    for method in ("associative", "chunked", "sequential"):
        assert check_gradients(projected(lambda: selective_scan_kernel(*ts, method=method)), ts) < 1e-4


def _oracle_vssm(block, w, shape):
    """Straight-line recomputation of the VSSM from primitive numpy ops."""
    nb, L, c = w.shape
    x = w @ block.in_ssm.weight.data.T + block.in_ssm.bias.data
    e = x.shape[-1]
    vol = x.transpose(0, 2, 1).reshape(nb, e, *shape)
    conv = F.dwconv3d(Tensor(vol), block.dw_weight, block.dw_bias).data.reshape(nb, e, L).transpose(0, 2, 1)
    s = conv / (1 + np.exp(-conv))
    p = block.ssm
    xdbl = s @ p.x_proj.weight.data.T
    r, n = p._rank, p.state_dim
    dt = np.logaddexp(0, xdbl[..., :r] @ p.dt_proj.weight.data.T + p.dt_proj.bias.data)
    y = unroll(s, dt, -np.exp(p.A_log.data), xdbl[..., r:r + n], xdbl[..., r + n:], p.D.data)
    mu, var = y.mean(-1, keepdims=True), y.var(-1, keepdims=True)
    w1 = (y - mu) / np.sqrt(var + 1e-5) * block.norm.gain.data + block.norm.bias.data
    g = w @ block.in_gate.weight.data.T + block.in_gate.bias.data
    w2 = g / (1 + np.exp(-g))
    return (w1 * w2) @ block.out.weight.data.T + block.out.bias.data


def test_vssm_matches_straight_line_oracle():
    rng = np.random.default_rng(11)
    block = VssmBlock(rng, 4, expand=2, state_dim=3)
    w = rng.standard_normal((1, 8, 4))
    got = vssm_forward(Tensor(w), block, (2, 2, 2)).data
    assert np.allclose(got, _oracle_vssm(block, w, (2, 2, 2)), atol=1e-12)


def test_vssm_closed_gate_and_shape():
    rng = np.random.default_rng(12)
    block = VssmBlock(rng, 4)
    block.in_gate.weight.data[:] = 0
    block.in_gate.bias.data[:] = 0
    out = block(Tensor(rng.standard_normal((1, 8, 4))), (2, 2, 2))
    assert out.shape == (1, 8, 4)
    assert np.allclose(out.data, np.broadcast_to(block.out.bias.data, out.shape), atol=0)
    with pytest.raises(ContractError):
        block(Tensor(np.zeros((1, 7, 4))), (2, 2, 2))


def test_vssm_is_flattening_order_sensitive():
    rng = np.random.default_rng(13)
    block = VssmBlock(rng, 2, state_dim=2)
    w = rng.standard_normal((1, 8, 2))
    perm = rng.permutation(8)
    a = block(Tensor(w[:, perm]), (2, 2, 2)).data
    b = block(Tensor(w), (2, 2, 2)).data[:, perm]
    assert not np.allclose(a, b)


def _zero_vssm(layer):
    for p in layer.vssm.parameters():
        p.data[:] = 0


def test_rvm_with_zeroed_vssm_reduces_to_projection():
    rng = np.random.default_rng(14)
    layer = RvmLayer(rng, 4, 6)
    _zero_vssm(layer)
    x = rng.standard_normal((1, 4, 2, 2, 2))
    seq = x.reshape(1, 4, 8).transpose(0, 2, 1)
    ln = (seq - seq.mean(-1, keepdims=True)) / np.sqrt(seq.var(-1, keepdims=True) + 1e-5)
    ref = (ln @ layer.proj.weight.data.T + layer.proj.bias.data).transpose(0, 2, 1).reshape(1, 6, 2, 2, 2)
    assert np.allclose(rvm_forward(Tensor(x), layer).data, ref, atol=1e-12)


def test_rvm_severed_residual_is_constant():
    rng = np.random.default_rng(15)
    layer = RvmLayer(rng, 4)
    _zero_vssm(layer)
    layer.scale.data[:] = 0
    out = layer(Tensor(rng.standard_normal((1, 4, 2, 2, 2)))).data
    assert np.allclose(out, layer.proj.bias.data.reshape(1, 4, 1, 1, 1) * np.ones_like(out), atol=1e-12)
    assert np.all(RvmLayer(rng, 3).scale.data == 1)


def test_rvm_gradient_1x4x2x2x2():
    rng = np.random.default_rng(16)
    layer = RvmLayer(rng, 4)
    x = Tensor(rng.standard_normal((1, 4, 2, 2, 2)), requires_grad=True)
    assert check_gradients(projected(lambda: layer(x)), [x] + layer.parameters(), max_entries=20) < 1e-4
