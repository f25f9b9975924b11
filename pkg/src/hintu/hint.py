"""
Local-residual hint path placed in front of the segmentation backbone.

The prior has two channels per image channel: the pixel minus its k x k
window mean, and the pixel minus its k x k window max (replicate padding,
window includes the centre).  A stack of conv blocks turns the prior into
the initial hint ``H``; single-head cross-attention against a projection of
the image embeds it, and a pointwise MLP fuses the result with a widened
copy of the image to give the backbone input ``X``.
"""

from dataclasses import dataclass

import numpy as np

from hintu.engine import ops
from hintu.engine.layers import ConvBlock, Layer, Sequential, WindowStat
from hintu.errors import ConfigError, ShapeError, TokenLimitError

MODES = ("hintu", "hinto", "off")


@dataclass
class HintConfig:
    k: int = 3
    c_i: int = 1
    c_base: int = 32
    mode: str = "hintu"
    max_tokens: int = 16384
    attn_scale: str = "ci"  # "ci" divides logits by sqrt(c_i); "cbase" by sqrt(c_base)
    hinto_strict: bool = False

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ConfigError(f"hint mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 3 or self.k % 2 == 0:
            raise ConfigError(f"hint window k must be odd and >= 3, got {self.k}")
        if self.c_i < 1 or self.c_base < 1:
            raise ConfigError("c_i and c_base must be >= 1")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.attn_scale not in ("ci", "cbase"):
            raise ConfigError(f"attn_scale must be 'ci' or 'cbase', got {self.attn_scale!r}")

    @property
    def scale(self):
        return float(np.sqrt(self.c_i if self.attn_scale == "ci" else self.c_base))


def hint_prior(image, k=3):
    """Two-channel local-residual prior (no parameters)."""
    out, _ = _prior_forward(image, k)
    return out


def _prior_forward(image, k):
    mean, mean_cache = ops.window_stat_forward(image, k, "mean")
    mx, max_cache = ops.window_stat_forward(image, k, "max")
    return np.concatenate([image - mean, image - mx], axis=1), (mean_cache, max_cache)


class HintPrior(Layer):
    def __init__(self, k):
        super().__init__()
        self.k = k
        self.mean = WindowStat(k, "mean")
        self.max = WindowStat(k, "max")

    def forward(self, x, train=True):
        self._cache = x.shape[1]
        return np.concatenate([x - self.mean.forward(x), x - self.max.forward(x)], axis=1)

    def backward(self, dy):
        c = self._need_cache()
        d_mean, d_max = dy[:, :c], dy[:, c:]
        return d_mean - self.mean.backward(d_mean) + d_max - self.max.backward(d_max)


class CrossAttention(Layer):
    """softmax(Q K^T / scale) V with Q = V, one token per pixel."""

    def __init__(self, scale=1.0, max_tokens=16384):
        super().__init__()
        self.scale = scale
        self.max_tokens = max_tokens
        # (t, t) work buffers are large; keep them between calls
        self._probs = None
        self._work = None

    def _buffer(self, current, shape, dtype):
        if current is None or current.shape != shape or current.dtype != dtype:
            return np.empty(shape, dtype=dtype)
        return current

    def forward(self, qv, key, train=True):
        n, c, h, w = qv.shape
        if key.shape != qv.shape:
            raise ShapeError(f"attention: query {qv.shape} and key {key.shape} differ")
        t = h * w
        if t > self.max_tokens:
            raise TokenLimitError(
                f"attention over {h}x{w} = {t} tokens exceeds max_tokens={self.max_tokens}; "
                "use a smaller input resolution, raise max_tokens, or run with mode 'off'"
            )
        dtype = np.result_type(qv, key)
        qs = qv.reshape(n, c, t).transpose(0, 2, 1).astype(dtype)
        ks = key.reshape(n, c, t).transpose(0, 2, 1).astype(dtype)
        self._probs = probs = self._buffer(self._probs, (n, t, t), dtype)
        out = np.empty_like(qs)
        for b in range(n):
            logits = np.matmul(qs[b], ks[b].T, out=probs[b])
            if self.scale != 1.0:
                logits /= self.scale
            ops.softmax_rows_forward(logits, overwrite=True)
            np.matmul(probs[b], qs[b], out=out[b])
        self._cache = (qs, ks, probs, qv.shape)
        return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, c, h, w))

    def backward(self, dy):
        qs, ks, probs, shape = self._need_cache()
        n, c, h, w = shape
        t = h * w
        douts = dy.reshape(n, c, t).transpose(0, 2, 1).astype(qs.dtype)
        self._work = work = self._buffer(self._work, (t, t), qs.dtype)
        dq = np.empty_like(qs)
        dk = np.empty_like(ks)
        for b in range(n):
            p = probs[b]
            dv = p.T @ douts[b]
            dp = np.matmul(douts[b], qs[b].T, out=work)
            ds = ops.softmax_rows_backward(dp, p, overwrite=True)
            if self.scale != 1.0:
                ds /= self.scale
            dq[b] = ds @ ks[b] + dv
            dk[b] = ds.T @ qs[b]
        back = lambda a: np.ascontiguousarray(a.transpose(0, 2, 1).reshape(shape))
        return back(dq), back(dk)


class HintModule(Layer):
    """Learned hint path.  Produces ``c_base`` channels in every mode."""

    def __init__(self, config, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg = config
        ci, cb = cfg.c_i, cfg.c_base
        self.m_x = self.add_child("m_x", ConvBlock(ci, cb, 3, rng))
        if cfg.mode == "off":
            return
        self.prior = HintPrior(cfg.k)
        self.m_a = self.add_child("m_a", Sequential(ConvBlock(2 * ci, cb, 3, rng), ConvBlock(cb, cb, 3, rng)))
        if cfg.mode == "hintu":
            self.m_p = self.add_child("m_p", ConvBlock(ci, cb, 3, rng))
        else:
            # HintO: queries/values come from the hint itself
            self.m_q = self.add_child("m_q", ConvBlock(cb, cb, 3, rng))
        self.attn = CrossAttention(cfg.scale, cfg.max_tokens)
        self.m_h = self.add_child("m_h", ConvBlock(cb, cb, 3, rng))
        fuse_in = cb if (cfg.mode == "hinto" and cfg.hinto_strict) else 2 * cb
        self.m_f = self.add_child("m_f", Sequential(ConvBlock(fuse_in, cb, 1, rng), ConvBlock(cb, cb, 1, rng)))

    @property
    def _strict(self):
        return self.config.mode == "hinto" and self.config.hinto_strict

    def _check_input(self, image):
        if image.ndim != 4 or image.shape[1] != self.config.c_i:
            raise ShapeError(f"hint input must be (n, {self.config.c_i}, h, w), got {image.shape}")

    # the four stages, usable on their own

    def initial_hint(self, prior, train=True):
        if prior.shape[1] != 2 * self.config.c_i:
            raise ShapeError(f"prior must have {2 * self.config.c_i} channels, got {prior.shape[1]}")
        return self.m_a.forward(prior, train)

    def embed(self, image, hint, train=True):
        qv = self.m_p.forward(image, train) if self.config.mode == "hintu" else self.m_q.forward(hint, train)
        return self.m_h.forward(self.attn.forward(qv, hint, train), train)

    def fuse(self, image, embedded, train=True):
        if self._strict:
            return self.m_f.forward(embedded, train)
        xi = self.m_x.forward(image, train)
        if xi.shape[2:] != embedded.shape[2:]:
            raise ShapeError(f"fuse: spatial dims differ, {xi.shape[2:]} vs {embedded.shape[2:]}")
        cat, self._split = ops.concat_channels_forward(xi, embedded)
        return self.m_f.forward(cat, train)

    def forward(self, image, train=True):
        self._check_input(image)
        if self.config.mode == "off":
            return self.m_x.forward(image, train)
        prior = self.prior.forward(image, train)
        hint = self.initial_hint(prior, train)
        embedded = self.embed(image, hint, train)
        return self.fuse(image, embedded, train)

    def forward_all(self, image, train=False):
        """Forward pass that also returns the intermediate tensors."""
        self._check_input(image)
        if self.config.mode == "off":
            x = self.m_x.forward(image, train)
            return {"x": x}
        prior = self.prior.forward(image, train)
        hint = self.initial_hint(prior, train)
        embedded = self.embed(image, hint, train)
        return {"prior": prior, "hint": hint, "embedded": embedded, "x": self.fuse(image, embedded, train)}

    def backward(self, dx_out):
        if self.config.mode == "off":
            return self.m_x.backward(dx_out)
        dcat = self.m_f.backward(dx_out)
        if self._strict:
            d_img, d_emb = 0.0, dcat
        else:
            d_xi, d_emb = ops.concat_channels_backward(dcat, self._split)
            d_img = self.m_x.backward(d_xi)
        d_att = self.m_h.backward(d_emb)
        d_qv, d_hint = self.attn.backward(d_att)
        if self.config.mode == "hintu":
            d_img = d_img + self.m_p.backward(d_qv)
        else:
            d_hint = d_hint + self.m_q.backward(d_qv)
        d_prior = self.m_a.backward(d_hint)
        return d_img + self.prior.backward(d_prior)
