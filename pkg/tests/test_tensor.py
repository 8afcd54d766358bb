import numpy as np
import pytest

from mgabrain import tensor as T
from mgabrain.errors import ShapeMismatch, ValidationError
from mgabrain.tensor import Tensor, gradcheck


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@pytest.fixture(params=["torch", "numpy"])
def backend(request, monkeypatch):
    monkeypatch.setenv("MGABRAIN_CONV_BACKEND", request.param)
    return request.param


def test_conv_identity_kernel(rng):
    x = Tensor(rng.random((1, 3, 4, 4, 4)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1, 1))
    assert np.array_equal(T.conv3d(x, w, Tensor(np.zeros(3))).data, x.data)


def test_conv_average_kernel_on_constant(backend):
    x = Tensor(np.full((1, 1, 5, 5, 5), 2.0))
    w = Tensor(np.full((1, 1, 3, 3, 3), 1 / 27))
    out = T.conv3d(x, w).data[0, 0]
    assert np.allclose(out[1:-1, 1:-1, 1:-1], 2.0)
    assert out[0, 0, 0] == pytest.approx(2.0 * 8 / 27)
    assert out[0, 2, 2] == pytest.approx(2.0 * 18 / 27)


def test_conv_backends_agree(rng, monkeypatch):
    x, w, b = t64(rng, 2, 3, 5, 4, 6), t64(rng, 4, 3, 3, 3, 3), t64(rng, 4)
    outs = []
    for name in ("torch", "numpy"):
        monkeypatch.setenv("MGABRAIN_CONV_BACKEND", name)
        outs.append(T.conv3d(x, w, b).data)
    assert np.allclose(*outs, atol=1e-10)


@pytest.mark.parametrize("k, stride", [(3, 1), (1, 1), (1, 2)])
def test_conv_gradcheck(rng, backend, k, stride):
    x, w, b = t64(rng, 1, 2, 4, 4, 4), t64(rng, 3, 2, k, k, k), t64(rng, 3)
    assert gradcheck(lambda x, w, b: T.sum_(T.conv3d(x, w, b, stride)), [x, w, b]) <= 1e-4
    assert gradcheck(lambda x, w, b: T.conv3d(x, w, b, stride), [x, w, b]) <= 1e-4


def test_conv_errors(rng):
    x = t64(rng, 1, 2, 4, 4, 4)
    with pytest.raises(ShapeMismatch, match="ChannelMismatch"):
        T.conv3d(x, t64(rng, 3, 5, 3, 3, 3))
    with pytest.raises(ShapeMismatch, match="NonDivisibleStride"):
        T.conv3d(t64(rng, 1, 2, 5, 4, 4), t64(rng, 3, 2, 1, 1, 1), stride=2)


def test_upsample_block():
    out = T.nearest_upsample(Tensor(np.full((1, 1, 1, 1, 1), 7.0)))
    assert out.shape == (1, 1, 2, 2, 2) and np.all(out.data == 7)


def test_upsample_then_strided_identity(rng):
    x = Tensor(rng.random((2, 3, 3, 2, 4)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1, 1))
    back = T.conv3d(T.nearest_upsample(x), w, stride=2)
    assert np.array_equal(back.data, x.data)


def test_upsample_and_pool_gradcheck(rng):
    x = t64(rng, 1, 2, 2, 3, 2)
    assert gradcheck(lambda x: T.nearest_upsample(x), [x]) <= 1e-6
    y = t64(rng, 1, 2, 4, 4, 2)
    assert gradcheck(lambda y: T.avg_pool3d(y, 2), [y]) <= 1e-6


def test_activation(rng):
    x = Tensor(np.abs(rng.standard_normal((2, 3))))
    assert np.array_equal(T.activation(x).data, x.data)
    assert T.activation(Tensor(np.array([-1.0]))).data[0] == 0
    assert T.activation(Tensor(np.array([-1.0])), 0.1).data[0] == pytest.approx(-0.1)
    z = rng.standard_normal((3, 4))
    z[np.abs(z) < 0.05] = 0.5  # keep away from the kink
    for slope in (0.0, 0.2):
        assert gradcheck(lambda a: T.activation(a, slope), [Tensor(z.copy(), requires_grad=True)]) <= 1e-6


def test_elementwise_gradcheck(rng):
    a, b = t64(rng, 2, 3), t64(rng, 3)
    c = Tensor(rng.random((2, 3)) + 0.5, requires_grad=True)
    assert gradcheck(lambda a, b: T.mul(T.add(a, b), T.sub(a, b)), [a, b]) <= 1e-6
    assert gradcheck(lambda a, c: T.div(a, c), [a, c]) <= 1e-6
    assert gradcheck(lambda a: T.softmax(a, axis=-1), [a]) <= 1e-6
    m1, m2 = t64(rng, 2, 3, 4), t64(rng, 2, 4, 5)
    assert gradcheck(lambda x, y: T.matmul(x, y), [m1, m2]) <= 1e-6


def _proj(rng, cout, cin):
    return (t64(rng, cout, cin, 1, 1, 1, scale=0.5), t64(rng, cout, scale=0.1))


def test_attention_singleton_is_out_proj_of_v(rng):
    x = Tensor(rng.standard_normal((1, 4, 1, 1, 1)))
    q, kv, out_p = _proj(rng, 8, 4), _proj(rng, 16, 4), _proj(rng, 3, 8)
    out = T.multi_head_attention(x, x, q, kv, out_p, heads=2, head_dim=4)
    v = Tensor(T.conv3d(x, *kv).data[:, 8:])
    assert np.allclose(out.data, T.conv3d(v, *out_p).data, atol=1e-12)


def test_attention_uniform_keys_average_values(rng):
    q_src = Tensor(rng.standard_normal((1, 4, 2, 2, 1)))
    kv_src = Tensor(rng.standard_normal((1, 4, 3, 2, 2)))
    kw = np.zeros((8, 4, 1, 1, 1))
    kv = (Tensor(np.concatenate([kw, rng.standard_normal((8, 4, 1, 1, 1))])), Tensor(np.zeros(16)))
    out_p = _proj(rng, 5, 8)
    out, weights = T.multi_head_attention(q_src, kv_src, _proj(rng, 8, 4), kv, out_p, 2, 4, return_weights=True)
    assert np.allclose(weights.data, 1 / 12, atol=1e-12)
    v = T.conv3d(kv_src, *kv).data[:, 8:].reshape(1, 8, -1).mean(-1)
    expected = T.conv3d(Tensor(np.broadcast_to(v[:, :, None, None, None], (1, 8, 2, 2, 1)).copy()), *out_p).data
    assert np.allclose(out.data, expected, atol=1e-6)


def test_attention_rows_sum_to_one_and_gradcheck(rng):
    xq, xk = t64(rng, 2, 4, 2, 2, 1), t64(rng, 2, 6, 1, 3, 1)
    q, kv, o = _proj(rng, 8, 4), _proj(rng, 16, 6), _proj(rng, 4, 8)
    _, w = T.multi_head_attention(xq, xk, q, kv, o, 2, 4, return_weights=True)
    assert np.allclose(w.data.sum(-1), 1, atol=1e-6)

    def fn(xq, xk, qw, kvw, ow):
        return T.multi_head_attention(xq, xk, (qw, q[1]), (kvw, kv[1]), (ow, o[1]), 2, 4)

    assert gradcheck(fn, [xq, xk, q[0], kv[0], o[0]]) <= 1e-4


def test_self_attention_fused_qkv_gradcheck(rng):
    x = t64(rng, 1, 4, 2, 2, 2)
    qkv, o = _proj(rng, 24, 4), _proj(rng, 3, 8)
    fn = lambda x, w, b: T.multi_head_attention(x, x, None, (w, b), o, 2, 4)  # noqa: E731
    assert gradcheck(fn, [x, *qkv]) <= 1e-4
    with pytest.raises(ShapeMismatch):
        T.multi_head_attention(x, x, None, _proj(rng, 16, 4), o, 2, 4)


def test_positional_encoding():
    pe = T.positional_encoding((2, 2, 2), 64, 1.0, np.float64)
    assert pe.shape == (64, 2, 2, 2)
    assert np.array_equal(pe[:, 0, 0, 0], np.tile([0.0, 1.0], 32))
    k = np.arange(32)
    i1 = pe[:, 0, 0, 1]  # flattened index 1
    assert np.allclose(i1[0::2], np.sin(1 / 10000 ** (2 * k / 64)), atol=1e-9)
    assert np.allclose(i1[1::2], np.cos(1 / 10000 ** (2 * k / 64)), atol=1e-9)
    assert np.array_equal(T.positional_encoding((2, 2, 2), 64, -1.0, np.float64), -pe)
    with pytest.raises(ValidationError, match="OddChannels"):
        T.positional_encoding((2, 2, 2), 5)


def test_mse(rng):
    a = rng.random((2, 3, 4))
    assert T.mse(Tensor(a), Tensor(a)).item() == 0
    assert T.mse(Tensor(a + 1), Tensor(a)).item() == pytest.approx(1.0)
    assert gradcheck(lambda x, y: T.mse(x, y), [t64(rng, 2, 3, 4), t64(rng, 2, 3, 4)]) <= 1e-6
    with pytest.raises(ShapeMismatch):
        T.mse(Tensor(a), Tensor(a[:1]))


def test_ssim_values():
    from scipy import ndimage

    tex = ndimage.gaussian_filter(np.random.default_rng(3).standard_normal((24, 24, 24)), 1.0)
    a = ((tex - tex.min()) / np.ptp(tex))[None, None]
    assert T.ssim(Tensor(a), Tensor(a)).item() == pytest.approx(1.0, abs=1e-6)
    assert T.ssim(Tensor(a), Tensor(1 - a)).item() < 0.2
    assert -1 <= T.ssim(Tensor(a), Tensor(np.random.default_rng(0).random(a.shape))).item() <= 1


def test_ssim_gradcheck(rng):
    a = Tensor(rng.random((1, 1, 8, 8, 8)), requires_grad=True)
    b = Tensor(rng.random((1, 1, 8, 8, 8)), requires_grad=True)
    assert gradcheck(lambda a, b: T.ssim(a, b), [a, b]) <= 1e-3


def test_blur_gradcheck(rng):
    x = t64(rng, 1, 1, 5, 6, 7)
    assert gradcheck(lambda x: T.gaussian_blur3d(x, T.gaussian_kernel(3, 0.8)), [x]) <= 1e-6


def test_no_mutation_and_repeatable_backward(rng):
    x, w = t64(rng, 1, 2, 3, 3, 3), t64(rng, 2, 2, 3, 3, 3)
    before = x.data.copy()
    loss = T.sum_(T.square(T.conv3d(x, w)))
    loss.backward()
    g1 = w.grad.copy()
    w.grad = None
    loss.backward()
    assert np.array_equal(g1, w.grad)
    assert np.array_equal(before, x.data)


def test_no_grad_records_nothing(rng):
    x = t64(rng, 2, 2)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and not y._parents
