import numpy as np
import pytest

from oracles import prior_oracle

from hintu.engine.gradcheck import grad_check
from hintu.errors import ConfigError, ShapeError, TokenLimitError
from hintu.hint import CrossAttention, HintConfig, HintModule, HintPrior, hint_prior


class TestPrior:
    def test_constant_is_zero(self):
        p = hint_prior(np.full((1, 1, 6, 5), 0.4))
        assert p.shape == (1, 2, 6, 5)
        np.testing.assert_allclose(p, 0, atol=1e-15)

    def test_center_impulse_5x5(self):
        img = np.zeros((1, 1, 5, 5))
        img[0, 0, 2, 2] = 1
        p = hint_prior(img)
        assert p[0, 0, 2, 2] == pytest.approx(8 / 9, abs=1e-12)
        assert p[0, 1, 2, 2] == 0
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    assert p[0, 1, 2 + dy, 2 + dx] == -1

    def test_isolated_peak_hollow(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0.0, 0.3, (1, 1, 9, 9))
        img[0, 0, 4, 4] = 0.9
        p = hint_prior(img)[0, 1]
        assert p[4, 4] == 0.0
        neigh = [p[4 + dy, 4 + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
        assert all(v < 0 for v in neigh)

    @pytest.mark.parametrize("k", [3, 5])
    def test_matches_oracle(self, k):
        rng = np.random.default_rng(k)
        for _ in range(10):
            img = rng.random((16, 16))
            np.testing.assert_allclose(hint_prior(img[None, None], k)[0], prior_oracle(img, k), atol=1e-12)

    def test_max_channel_nonpositive(self):
        p = hint_prior(np.random.default_rng(1).random((3, 1, 12, 12)))
        assert np.all(p[:, 1] <= 0)

    def test_shift_and_scale(self):
        img = np.random.default_rng(2).random((1, 1, 16, 16))
        base = hint_prior(img)
        np.testing.assert_allclose(hint_prior(img + 0.37), base, atol=1e-12)
        np.testing.assert_allclose(hint_prior(2.5 * img), 2.5 * base, atol=1e-12)

    def test_multichannel_layout(self):
        img = np.random.default_rng(3).random((1, 3, 8, 8))
        p = hint_prior(img)
        assert p.shape == (1, 6, 8, 8)
        np.testing.assert_allclose(p[0, 1], prior_oracle(img[0, 1])[0], atol=1e-12)
        np.testing.assert_allclose(p[0, 4], prior_oracle(img[0, 1])[1], atol=1e-12)

    def test_gradcheck(self):
        assert grad_check(HintPrior(3), np.random.default_rng(4).standard_normal((1, 2, 6, 6))).passed


class TestAttention:
    def test_constant_key_gives_uniform_average(self):
        rng = np.random.default_rng(5)
        qv = rng.standard_normal((1, 4, 3, 5))
        key = np.ones((1, 4, 3, 5))
        out = CrossAttention(1.0).forward(qv, key)
        mean = qv.reshape(1, 4, -1).mean(axis=2)
        np.testing.assert_allclose(out, np.broadcast_to(mean[:, :, None, None], out.shape), atol=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(6)
        qv, key = rng.standard_normal((1, 3, 2, 3)), rng.standard_normal((1, 3, 2, 3))
        q, k = qv.reshape(3, 6).T, key.reshape(3, 6).T
        ref = np.zeros((6, 3))
        for i in range(6):
            logits = np.array([q[i] @ k[j] / 2.0 for j in range(6)])
            wts = np.exp(logits - logits.max())
            wts /= wts.sum()
            ref[i] = sum(wts[j] * q[j] for j in range(6))
        out = CrossAttention(scale=2.0).forward(qv, key)
        np.testing.assert_allclose(out[0].reshape(3, 6).T, ref, atol=1e-12)

    def test_token_limit(self):
        with pytest.raises(TokenLimitError, match="max_tokens"):
            CrossAttention(1.0, max_tokens=15).forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)))

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        assert grad_check(CrossAttention(1.5), [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, 3, 3))]).passed


class TestConfig:
    @pytest.mark.parametrize("kw", [{"k": 2}, {"k": 1}, {"mode": "bogus"}, {"c_base": 0}, {"attn_scale": "x"}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            HintConfig(**kw)

    def test_scale(self):
        assert HintConfig(c_i=4).scale == 2.0
        assert HintConfig(c_base=16, attn_scale="cbase").scale == 4.0


class TestModule:
    def _module(self, **kw):
        return HintModule(HintConfig(c_base=8, **kw), np.random.default_rng(0))

    @pytest.mark.parametrize("mode", ["hintu", "hinto", "off"])
    def test_output_shape(self, mode):
        out = self._module(mode=mode).forward(np.random.default_rng(1).random((2, 1, 8, 8)).astype(np.float32))
        assert out.shape == (2, 8, 8, 8) and out.dtype == np.float32

    def test_off_is_widening_block(self):
        m = self._module(mode="off")
        img = np.random.default_rng(2).random((1, 1, 8, 8)).astype(np.float32)
        assert np.array_equal(m.forward(img, train=False), m.m_x.forward(img, train=False))

    def test_stages(self):
        m = self._module()
        img = np.random.default_rng(3).random((1, 1, 8, 8)).astype(np.float32)
        parts = m.forward_all(img)
        assert parts["prior"].shape == (1, 2, 8, 8)
        assert parts["hint"].shape == parts["embedded"].shape == parts["x"].shape == (1, 8, 8, 8)
        np.testing.assert_array_equal(m.forward(img, train=False), parts["x"])

    def test_constant_image(self):
        m = self._module()
        parts = m.forward_all(np.full((1, 1, 8, 8), 0.5, dtype=np.float32))
        np.testing.assert_allclose(parts["prior"], 0, atol=1e-7)
        hint = parts["hint"][0]
        np.testing.assert_allclose(hint, hint[:, :1, :1] * np.ones_like(hint), atol=1e-6)
        # zero padding in the 3x3 convs makes the border differ; the interior is flat
        x = parts["x"][0, :, 1:-1, 1:-1]
        np.testing.assert_allclose(x, x[:, :1, :1] * np.ones_like(x), atol=1e-5)

    def test_hinto_strict_drops_image_branch(self):
        strict = self._module(mode="hinto", hinto_strict=True)
        loose = self._module(mode="hinto")
        assert strict.m_f._children["0"].conv.weight.data.shape[1] == 8
        assert loose.m_f._children["0"].conv.weight.data.shape[1] == 16

    def test_shape_errors(self):
        m = self._module()
        with pytest.raises(ShapeError):
            m.forward(np.zeros((1, 2, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            m.initial_hint(np.zeros((1, 3, 8, 8), dtype=np.float32))

    @pytest.mark.parametrize("mode", ["hintu", "hinto", "off"])
    def test_gradcheck(self, mode):
        rng = np.random.default_rng(11)
        m = HintModule(HintConfig(c_base=4, mode=mode), rng)
        rep = grad_check(m, rng.random((2, 1, 6, 6)), max_checks=400)
        assert rep.max_rel_err < 1e-4, rep.worst
