import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hintu.engine import ops
from hintu.engine.gradcheck import FunctionModule, grad_check
from hintu.engine.layers import Activation, BatchNorm2d, Conv2d, MaxPool2x, Resize, WindowStat
from hintu.engine.params import ParamStore
from hintu.engine.tensorio import dump_tensor, load_tensor
from hintu.errors import BadMagicError, ConfigError, DegenerateVarianceError, HintError, ShapeError


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for bi in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    s = b[o]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                s += xp[bi, ci, i * stride + di, j * stride + dj] * w[o, ci, di, dj]
                    out[bi, o, i, j] = s
    return out


def window_oracle(img, k, kind):
    h, w = img.shape
    r = k // 2
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            vals = [img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                    for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
            out[y, x] = max(vals) if kind == "max" else sum(vals) / (k * k)
    return out


class TestConv2d:
    def test_scalar_affine(self):
        y, _ = ops.conv2d_forward(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0), np.array([1.0]), 1, 0)
        assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 7.0

    def test_ones_kernel_pad1(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
        y, _ = ops.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        np.testing.assert_array_equal(y[0, 0], [[10, 10], [10, 10]])

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 5)])
    def test_matches_loop_oracle(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + pad + k)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        y, _ = ops.conv2d_forward(x, w, b, stride, pad)
        np.testing.assert_allclose(y, conv_oracle(x, w, b, stride, pad), atol=1e-12)

    def test_backward_random_2x3x8x8(self):
        rng = np.random.default_rng(0)
        layer = Conv2d(3, 5, 3, rng=rng)
        rep = grad_check(layer, rng.standard_normal((2, 3, 8, 8)))
        assert rep.passed and rep.max_rel_err < 1e-4

    def test_channel_mismatch_names_dims(self):
        with pytest.raises(ShapeError, match="3.*2"):
            ops.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(1), 1, 1)

    def test_affinity(self):
        rng = np.random.default_rng(3)
        w, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
        a, c = rng.standard_normal((1, 3, 6, 6)), rng.standard_normal((1, 3, 6, 6))
        f = lambda x: ops.conv2d_forward(x, w, b, 1, 1)[0]
        np.testing.assert_allclose(f(a + c), f(a) + f(c) - f(np.zeros_like(a)), atol=1e-5)


class TestBatchNorm:
    def _run(self, x, gamma, beta, train=True, rm=None, rv=None):
        c = x.shape[1]
        rm = np.zeros(c) if rm is None else rm
        rv = np.ones(c) if rv is None else rv
        return ops.batch_norm_forward(x, gamma, beta, rm, rv, train=train)[0]

    def test_constant_channel(self):
        y = self._run(np.full((2, 1, 3, 3), 4.2), np.ones(1), np.full(1, 0.5))
        np.testing.assert_allclose(y, 0.5, atol=1e-12)

    def test_two_values(self):
        y = self._run(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2), np.ones(1), np.zeros(1))
        expected = 1 / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(y.ravel(), [-expected, expected], rtol=1e-12)
        np.testing.assert_allclose(y.ravel(), [-0.999995, 0.999995], atol=1e-7)

    def test_eval_identity_stats(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
        y = self._run(x, np.ones(3), np.zeros(3), train=False)
        np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5), rtol=1e-12)
        np.testing.assert_allclose(y, x, atol=1e-4 * np.abs(x).max())

    def test_degenerate_variance(self):
        with pytest.raises(DegenerateVarianceError):
            self._run(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2))

    def test_running_stats_update(self):
        bn = BatchNorm2d(1)
        bn.forward(np.array([1.0, 3.0]).reshape(1, 1, 1, 2).astype(np.float32))
        np.testing.assert_allclose(bn.running_mean.data, [0.2])
        np.testing.assert_allclose(bn.running_var.data, [0.9 + 0.1 * 2.0])  # unbiased var of [1, 3] = 2

    @pytest.mark.parametrize("train", [True, False])
    def test_gradcheck(self, train):
        rng = np.random.default_rng(4)
        bn = BatchNorm2d(3)
        bn.gamma.data = rng.uniform(0.5, 1.5, 3).astype(np.float32)
        assert grad_check(bn, rng.standard_normal((2, 3, 4, 4)), train=train).passed


class TestActivation:
    def test_relu(self):
        y, _ = ops.activation_forward(np.array([-2.0, 0.0, 3.0]), "relu")
        np.testing.assert_array_equal(y, [0, 0, 3])

    def test_sigmoid_values(self):
        y, _ = ops.activation_forward(np.array([0.0, math.log(3)]), "sigmoid")
        np.testing.assert_allclose(y, [0.5, 0.75], rtol=1e-14)

    def test_sigmoid_stable(self):
        y = ops.sigmoid(np.array([-100.0, 100.0], dtype=np.float32))
        assert np.all(np.isfinite(y)) and 0 <= y[0] < 1e-40 and y[1] == 1.0

    @pytest.mark.parametrize("kind", ["relu", "sigmoid"])
    def test_gradcheck(self, kind):
        assert grad_check(Activation(kind), np.random.default_rng(5).standard_normal((2, 2, 3, 3))).passed


class TestWindowStat:
    @pytest.mark.parametrize("kind", ["max", "mean"])
    def test_constant(self, kind):
        x = np.full((1, 1, 5, 4), 0.3)
        y, _ = ops.window_stat_forward(x, 3, kind)
        np.testing.assert_allclose(y, x, atol=1e-15)

    def test_impulse_max(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1
        y, _ = ops.window_stat_forward(x, 3, "max")
        np.testing.assert_array_equal(y, np.ones_like(x))

    def test_impulse_mean(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1
        y, _ = ops.window_stat_forward(x, 3, "mean")
        np.testing.assert_allclose(y, np.full_like(x, 1 / 9), atol=1e-15)

    @pytest.mark.parametrize("k", [3, 5, 7])
    @pytest.mark.parametrize("kind", ["max", "mean"])
    def test_brute_force(self, k, kind):
        img = np.random.default_rng(k).random((9, 7))
        y, _ = ops.window_stat_forward(img[None, None], k, kind)
        np.testing.assert_allclose(y[0, 0], window_oracle(img, k, kind), atol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_bad_k(self, k):
        with pytest.raises(ConfigError):
            ops.window_stat_forward(np.zeros((1, 1, 4, 4)), k, "max")

    @pytest.mark.parametrize("kind,k", [("max", 3), ("mean", 3), ("mean", 5)])
    def test_gradcheck(self, kind, k):
        assert grad_check(WindowStat(k, kind), np.random.default_rng(6).standard_normal((1, 2, 6, 5))).passed

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (1, 1, 6, 6), elements=st.floats(-10, 10)))
    def test_max_dominates_mean(self, x):
        mx, _ = ops.window_stat_forward(x, 3, "max")
        mean, _ = ops.window_stat_forward(x, 3, "mean")
        assert np.all(mx >= mean - 1e-12)


class TestMaxPool:
    def test_single_block(self):
        y, _ = ops.maxpool2x_forward(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 4

    def test_constant(self):
        y, _ = ops.maxpool2x_forward(np.full((1, 2, 4, 6), 1.5))
        np.testing.assert_array_equal(y, np.full((1, 2, 2, 3), 1.5))

    def test_tie_routes_to_first(self):
        x = np.ones((1, 1, 2, 2))
        _, cache = ops.maxpool2x_forward(x)
        dx = ops.maxpool2x_backward(np.ones((1, 1, 1, 1)), cache)
        np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])

    def test_odd_dims(self):
        with pytest.raises(ShapeError):
            ops.maxpool2x_forward(np.zeros((1, 1, 3, 4)))

    def test_gradcheck(self):
        assert grad_check(MaxPool2x(), np.random.default_rng(7).standard_normal((2, 2, 6, 4))).passed


class TestResize:
    def test_identity_bitwise(self):
        x = np.random.default_rng(8).random((1, 2, 5, 7)).astype(np.float32)
        y, _ = ops.resize_bilinear_forward(x, 5, 7)
        assert np.array_equal(y, x)

    def test_single_pixel(self):
        y, _ = ops.resize_bilinear_forward(np.full((1, 1, 1, 1), 0.7), 3, 5)
        np.testing.assert_array_equal(y, np.full((1, 1, 3, 5), 0.7))

    def test_half_pixel_row(self):
        y, _ = ops.resize_bilinear_forward(np.array([[0.0, 1.0]])[None, None], 1, 4)
        np.testing.assert_allclose(y[0, 0, 0], [0, 0.25, 0.75, 1], atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-5, 5), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9))
    def test_constant_preserved_exactly(self, v, h, w, oh, ow):
        y, _ = ops.resize_bilinear_forward(np.full((1, 1, h, w), v, dtype=np.float32), oh, ow)
        assert np.all(y == np.float32(v))

    @pytest.mark.parametrize("size", [None, (5, 4), (2, 9)])
    def test_gradcheck(self, size):
        layer = Resize(scale=2) if size is None else Resize(size=size)
        assert grad_check(layer, np.random.default_rng(9).standard_normal((1, 2, 3, 4))).passed


class TestMatrices:
    def test_identity(self):
        a = np.random.default_rng(0).random((3, 4))
        np.testing.assert_array_equal(ops.matmul_forward(a, np.eye(4))[0], a)

    def test_dot(self):
        assert ops.matmul_forward(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0][0, 0] == 11

    def test_loop_oracle(self):
        rng = np.random.default_rng(10)
        a, b = rng.random((7, 5)), rng.random((5, 3))
        ref = np.array([[sum(a[i, k] * b[k, j] for k in range(5)) for j in range(3)] for i in range(7)])
        np.testing.assert_allclose(ops.matmul_forward(a, b)[0], ref, atol=1e-6)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul_forward(np.zeros((2, 3)), np.zeros((2, 3)))

    @pytest.mark.parametrize("row,expected", [([0, 0], [0.5, 0.5]), ([1000, 1000], [0.5, 0.5]),
                                              ([math.log(2), 0], [2 / 3, 1 / 3])])
    def test_softmax_examples(self, row, expected):
        p, _ = ops.softmax_rows_forward(np.array([row], dtype=np.float64))
        np.testing.assert_allclose(p[0], expected, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_properties(self, m, shift):
        p, _ = ops.softmax_rows_forward(m.copy())
        q, _ = ops.softmax_rows_forward(m + shift)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
        np.testing.assert_allclose(p, q, atol=1e-6)

    def test_gradchecks(self):
        rng = np.random.default_rng(11)
        mm = FunctionModule(ops.matmul_forward, ops.matmul_backward)
        assert grad_check(mm, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]).passed
        sm = FunctionModule(ops.softmax_rows_forward, ops.softmax_rows_backward)
        assert grad_check(sm, [rng.standard_normal((3, 5))]).passed


class TestConcat:
    def test_shape_and_content(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((1, 2, 4, 4)), rng.random((1, 3, 4, 4))
        y, split = ops.concat_channels_forward(a, b)
        assert y.shape == (1, 5, 4, 4)
        assert np.array_equal(y[:, 0], a[:, 0])
        ra, rb = ops.concat_channels_backward(y, split)
        assert np.array_equal(ra, a) and np.array_equal(rb, b)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat_channels_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


class TestGradCheck:
    def test_corrupted_backward_fails(self):
        class Doubled(Conv2d):
            def backward(self, dy):
                return super().backward(2 * dy)

        rng = np.random.default_rng(13)
        assert not grad_check(Doubled(2, 2, 3, rng=rng), rng.standard_normal((1, 2, 6, 6))).passed

    def test_conv_1x2x6x6(self):
        rng = np.random.default_rng(14)
        assert grad_check(Conv2d(2, 3, 3, rng=rng), rng.standard_normal((1, 2, 6, 6)), tol=1e-4).passed

    def test_subsample_is_seeded(self):
        rng = np.random.default_rng(15)
        layer = Conv2d(4, 4, 3, rng=rng)
        x = rng.standard_normal((2, 4, 6, 6))
        a = grad_check(layer, x, max_checks=50, seed=3)
        b = grad_check(layer, x, max_checks=50, seed=3)
        assert a.n_checked == 50 and a.max_rel_err == b.max_rel_err and a.worst == b.worst

    def test_restores_float32_params(self):
        layer = Conv2d(1, 1, 3)
        grad_check(layer, np.zeros((1, 1, 4, 4)))
        assert layer.weight.data.dtype == np.float32

    def test_backward_before_forward(self):
        with pytest.raises(HintError):
            Conv2d(1, 1, 3).backward(np.zeros((1, 1, 4, 4)))


def test_determinism_bitwise():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    a1, _ = ops.conv2d_forward(x, w, b, 1, 1)
    a2, _ = ops.conv2d_forward(x, w, b, 1, 1)
    assert np.array_equal(a1, a2)


def test_param_store_order_and_uniqueness():
    layer = Conv2d(1, 2, 3)
    store = ParamStore.from_layers(a=layer)
    assert store.names() == ["a.weight", "a.bias"]
    with pytest.raises(ConfigError):
        ParamStore([("x", layer.weight), ("x", layer.bias)])


def test_tensor_dump_roundtrip(tmp_path):
    x = np.random.default_rng(17).random((2, 3, 4, 5)).astype(np.float32)
    p = tmp_path / "t.bin"
    dump_tensor(p, x)
    raw = p.read_bytes()
    assert raw[:4] == b"TSR1" and int.from_bytes(raw[4:8], "little") == 4
    assert np.array_equal(load_tensor(p), x)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_tensor(p)
