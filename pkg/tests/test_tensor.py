import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax, softmax
from scipy.stats import norm

from stswincl import tensor as T
from stswincl.tensor import Tensor, grad_check

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.normal(size=shape)


def const(*shape):
    return Tensor(rand(*shape))


# -- gradient checks per op ----------------------------------------------------

UNARY = {
    "exp": lambda x: T.exp(x),
    "log": lambda x: T.log(T.add(T.square(x), 0.5)),
    "sqrt": lambda x: T.sqrt(T.add(T.square(x), 0.3)),
    "square": T.square,
    "relu": T.relu,
    "gelu": T.gelu,
    "softplus": T.softplus,
    "softmax": T.softmax_lastdim,
    "log_softmax": T.log_softmax_lastdim,
    "l2_normalize": lambda x: T.l2_normalize(x, 1e-12),
    "normalize": lambda x: T.normalize(x, (-1,), 1e-5),
    "transpose": lambda x: T.transpose(x, (1, 0, 2)),
    "reshape": lambda x: T.reshape(x, (-1, 4)),
    "getitem": lambda x: x[1:, ::2],
    "take": lambda x: T.take(x, np.array([0, 2, 2, 1]), axis=1),
    "sum_axis": lambda x: T.tsum(x, axis=1),
    "mean_keep": lambda x: T.mean(x, axis=(0, 2), keepdims=True),
    "roll2d": lambda x: T.roll2d(T.reshape(x, (1, 3, 3, 4)), 1, -2),
    "upsample": lambda x: T.bilinear_upsample(T.reshape(x, (3, 3, 4)), 2),
    "pad_zeros": lambda x: T.pad2d(x, (1, 2), (0, 1)),
    "pad_edge": lambda x: T.pad2d(x, (2, 1), (1, 2), mode="edge"),
    "crop2d": lambda x: T.crop2d(x, 2, 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad(name):
    x = rand(3, 3, 4)
    w = rand(*UNARY[name](Tensor(x)).shape)  # fixed random projection of the output
    err = grad_check(lambda t: T.tsum(T.mul(UNARY[name](t), w)), x)
    assert err < 1e-5


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.add(T.square(b), 1.0)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b, (0, 2, 1))),
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("which", [0, 1])
def test_binary_grad(name, which):
    a, b = rand(2, 3, 4), rand(2, 3, 4)
    w = rand(*BINARY[name](Tensor(a), Tensor(b)).shape)
    if which == 0:
        err = grad_check(lambda t: T.tsum(T.mul(BINARY[name](t, Tensor(b)), w)), a)
    else:
        err = grad_check(lambda t: T.tsum(T.mul(BINARY[name](Tensor(a), t), w)), b)
    assert err < 1e-5


def test_broadcast_grad():
    a, b = rand(2, 3, 4), rand(3, 1)
    w = rand(2, 3, 4)
    assert grad_check(lambda t: T.tsum(T.mul(T.mul(Tensor(a), t), w)), b) < 1e-5
    assert grad_check(lambda t: T.tsum(T.mul(T.broadcast_to(t, (2, 3, 4)), w)), b) < 1e-5


@pytest.mark.parametrize("stride,padding,dilation,mode", [(1, 1, 1, "zeros"), (2, 1, 1, "zeros"),
                                                           (1, 2, 2, "edge"), (1, 0, 1, "zeros")])
def test_conv2d_grad(stride, padding, dilation, mode):
    x, k = rand(2, 6, 5, 3), rand(3, 3, 3, 2)
    f = lambda xx, kk: T.conv2d(xx, kk, stride, padding, dilation, mode)
    w = rand(*f(Tensor(x), Tensor(k)).shape)
    assert grad_check(lambda t: T.tsum(T.mul(f(t, Tensor(k)), w)), x) < 1e-5
    assert grad_check(lambda t: T.tsum(T.mul(f(Tensor(x), t), w)), k) < 1e-5


def test_norm_layers_grad():
    x, g, b = rand(2, 3, 4, 8), rand(8), rand(8)
    w = rand(2, 3, 4, 8)
    assert grad_check(lambda t: T.tsum(T.mul(T.layer_norm(t, Tensor(g), Tensor(b)), w)), x) < 1e-5
    assert grad_check(lambda t: T.tsum(T.mul(T.group_norm(t, 4, Tensor(g), Tensor(b)), w)), x) < 1e-5
    assert grad_check(lambda t: T.tsum(T.mul(T.layer_norm(Tensor(x), t, Tensor(b)), w)), g) < 1e-5


def test_linear_grad():
    x, W, b = rand(2, 5, 3), rand(3, 4), rand(4)
    out = rand(2, 5, 4)
    assert grad_check(lambda t: T.tsum(T.mul(T.linear(Tensor(x), t, Tensor(b)), out)), W) < 1e-5
    assert grad_check(lambda t: T.tsum(T.mul(T.linear(Tensor(x), Tensor(W), t), out)), b) < 1e-5


def test_grad_check_eps_bounds():
    with pytest.raises(ValueError):
        grad_check(T.tsum, rand(3), eps=1e-2)


# -- forward oracles -------------------------------------------------------------


def test_conv2d_matches_loop_oracle():
    x, k = rand(7, 6, 2), rand(3, 3, 2, 3)
    for stride, pad, dil in [(1, 1, 1), (2, 1, 1), (1, 2, 2)]:
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        ho = (xp.shape[0] - dil * 2 - 1) // stride + 1
        wo = (xp.shape[1] - dil * 2 - 1) // stride + 1
        ref = np.zeros((ho, wo, 3))
        for i in range(ho):
            for j in range(wo):
                for a in range(3):
                    for b in range(3):
                        ref[i, j] += xp[i * stride + a * dil, j * stride + b * dil] @ k[a, b]
        out = T.conv2d(Tensor(x), Tensor(k), stride, pad, dil).data
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(const(4, 4, 2), const(2, 2, 2, 1))
    with pytest.raises(ValueError):
        T.conv2d(const(4, 4, 3), const(3, 3, 2, 1))


def test_softmax_and_gelu_match_scipy():
    x = rand(4, 6)
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(x)).data, softmax(x, axis=-1), atol=1e-14)
    np.testing.assert_allclose(T.log_softmax_lastdim(Tensor(x)).data, log_softmax(x, axis=-1), atol=1e-13)
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-14)


def test_layer_norm_matches_manual():
    x = rand(3, 7)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bilinear_upsample_matches_half_pixel_formula():
    x = rand(3, 4, 2)
    f = 2
    out = T.bilinear_upsample(Tensor(x), f).data
    for p in range(6):
        for q in range(8):
            sy = min(max((p + 0.5) / f - 0.5, 0), 2)
            sx = min(max((q + 0.5) / f - 0.5, 0), 3)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, 2), min(x0 + 1, 3)
            fy, fx = sy - y0, sx - x0
            ref = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                   + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
            np.testing.assert_allclose(out[p, q], ref, atol=1e-13)


def test_roll2d_semantics():
    x = np.arange(12.0).reshape(3, 4, 1)
    out = T.roll2d(Tensor(x), 1, 2).data
    for i in range(3):
        for j in range(4):
            assert out[i, j, 0] == x[(i - 1) % 3, (j - 2) % 4, 0]


def test_edge_padding_replicates_border():
    x = rand(2, 3, 1)
    out = T.pad2d(Tensor(x), (1, 1), (2, 0), mode="edge").data
    np.testing.assert_array_equal(out, np.pad(x, ((1, 1), (2, 0), (0, 0)), mode="edge"))


def test_l2_normalize_zero_vector_is_safe():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    y = T.l2_normalize(x)
    assert np.all(y.data == 0)
    T.backward(T.tsum(y))
    assert np.isfinite(x.grad).all()


# -- tape behaviour ----------------------------------------------------------------


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.square(x)))
    T.backward(T.tsum(T.square(x)))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, T.mul(y, 2.0))
    T.backward(T.tsum(z))
    np.testing.assert_allclose(x.grad, [18.0])


def test_tape_is_in_execution_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.exp(x)
    z = T.tsum(T.mul(y, x))
    tape = T.Tape(z)
    assert tape.ops == ["exp", "mul", "sum"]
    seqs = [n.seq for _, n in tape.entries]
    assert seqs == sorted(seqs)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert y._node is None and not y.requires_grad


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(T.exp(Tensor([1.0, 2.0], requires_grad=True)))


def test_non_finite_output_raises():
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        T.log(Tensor([0.0]))


# -- serialization -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2 ** 31 - 1))
def test_tnsr_roundtrip(tmp_path_factory, dims, seed):
    arr = np.random.default_rng(seed).normal(size=tuple(dims))
    path = tmp_path_factory.mktemp("t") / "a.tnsr"
    T.save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:8] == b"TNSR0001"
    assert len(raw) == 12 + 4 * len(dims) + 8 * arr.size
    np.testing.assert_array_equal(T.load_tensor(path), arr)


def test_tnsr_rejects_bad_magic_and_size(tmp_path):
    p = tmp_path / "x.tnsr"
    T.save_tensor(p, np.ones((2, 2)))
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        T.load_tensor(p)
    p.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        T.load_tensor(p)


# -- properties ----------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_matmul_grad_property(n, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, 3)), r.normal(size=(3, m))
    w = r.normal(size=(n, m))
    assert grad_check(lambda t: T.tsum(T.mul(T.matmul(t, Tensor(b)), w)), a) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(k, c):
    x = RNG.normal(size=(3, k)) * 5
    s1 = T.softmax_lastdim(Tensor(x)).data
    s2 = T.softmax_lastdim(Tensor(x + c)).data
    np.testing.assert_allclose(s1.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(s1, s2, atol=1e-12)
