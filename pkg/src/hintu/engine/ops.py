"""
Dense NCHW kernels with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Arrays are plain ``numpy``
arrays laid out as (batch, channel, height, width).  Computation happens in
the dtype of the inputs, so float64 inputs give a float64 pass for gradient
checking.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hintu.errors import ConfigError, DegenerateVarianceError, ShapeError


def _check_rank4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d_forward(x, weight, bias, stride=1, pad=0):
    _check_rank4(x)
    _check_rank4(weight, "weight")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {oc} output channels")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")

    if kh == 1 and kw == 1 and pad == 0 and stride == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
        # (n, oh, ow, c, kh, kw) flattened to one row per output pixel
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.reshape(oc, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, stride, pad, bias is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dy, cache):
    x_shape, cols, weight, stride, pad, has_bias = cache
    n, c, h, w = x_shape
    oc, ic, kh, kw = weight.shape
    _, _, oh, ow = dy.shape
    dmat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
    dweight = (dmat.T @ cols).reshape(weight.shape)
    dbias = dmat.sum(axis=0) if has_bias else None
    dcols = dmat @ weight.reshape(oc, -1)

    if kh == 1 and kw == 1 and pad == 0 and stride == 1:
        dx = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dweight, dbias

    dcols = dcols.reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dweight, dbias


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def batch_norm_forward(x, gamma, beta, running_mean, running_var, train=True,
                       momentum=0.1, eps=1e-5):
    """Per-channel normalization over (n, h, w).

    In train mode the running statistics are updated in place (unbiased
    variance, PyTorch convention).
    """
    _check_rank4(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma/beta have shapes {gamma.shape}/{beta.shape}")
    m = n * h * w
    if train:
        if m < 2:
            raise DegenerateVarianceError(
                "batch_norm: train mode needs at least 2 values per channel "
                f"(got n*h*w = {m}); use eval mode or a larger batch"
            )
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * m / (m - 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        xc = x - mean[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, train)
    return out, cache


def batch_norm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if train:
        mean_dxhat = dxhat.mean(axis=(0, 2, 3))
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3))
        dx = (dxhat - mean_dxhat[None, :, None, None]
              - xhat * mean_dxhat_xhat[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(x, kind):
    if kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "sigmoid":
        out = sigmoid(x)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return out, (kind, x, out)


def activation_backward(dy, cache):
    kind, x, out = cache
    if kind == "relu":
        return dy * (x > 0)
    return dy * out * (1 - out)


# ---------------------------------------------------------------------------
# window statistics (replicate padding, stride 1)
# ---------------------------------------------------------------------------

def _fold_replicate(dxp, p):
    """Adjoint of edge-replicate padding by ``p`` on both spatial axes."""
    if p == 0:
        return dxp
    d = dxp.copy()
    d[:, :, p, :] += d[:, :, :p, :].sum(axis=2)
    d[:, :, -p - 1, :] += d[:, :, -p:, :].sum(axis=2)
    d = d[:, :, p:-p, :]
    d[:, :, :, p] += d[:, :, :, :p].sum(axis=3)
    d[:, :, :, -p - 1] += d[:, :, :, -p:].sum(axis=3)
    return np.ascontiguousarray(d[:, :, :, p:-p])


def window_stat_forward(x, k, kind):
    _check_rank4(x)
    if k < 3 or k % 2 == 0:
        raise ConfigError(f"window size must be odd and >= 3, got {k}")
    if kind not in ("max", "mean"):
        raise ConfigError(f"window statistic must be 'max' or 'mean', got {kind!r}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    if kind == "max":
        flat = win.reshape(*win.shape[:4], k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (kind, k, x.shape, arg)
    out = win.sum(axis=(-2, -1)) / (k * k)
    return out.astype(x.dtype, copy=False), (kind, k, x.shape, None)


def window_stat_backward(dy, cache):
    kind, k, shape, arg = cache
    n, c, h, w = shape
    p = k // 2
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            if kind == "max":
                contrib = dy * (arg == i * k + j)
            else:
                contrib = dy / (k * k)
            dxp[:, :, i : i + h, j : j + w] += contrib
    return _fold_replicate(dxp, p)


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------

def maxpool2x_forward(x):
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first max in row-major order on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2x_backward(dy, cache):
    shape, arg = cache
    n, c, h, w = shape
    onehot = arg[..., None] == np.arange(4)
    dblocks = onehot * dy[..., None]
    dx = dblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(shape)).astype(dy.dtype, copy=False)


# ---------------------------------------------------------------------------
# bilinear resize, half-pixel centers, edge clamp
# ---------------------------------------------------------------------------

def _resize_taps(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resize_matrix(n_in, n_out, dtype):
    i0, i1, frac = _resize_taps(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear_forward(x, out_h, out_w):
    _check_rank4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    cache = (x.shape, out_h, out_w)
    if (h, w) == (out_h, out_w):
        return x.copy(), cache
    out = x
    if out_h != h:
        i0, i1, f = _resize_taps(h, out_h)
        top = out[:, :, i0, :]
        # a + f*(b - a) keeps constant rows exact
        out = top + f.astype(x.dtype)[:, None] * (out[:, :, i1, :] - top)
    if out_w != w:
        i0, i1, f = _resize_taps(w, out_w)
        left = out[:, :, :, i0]
        out = left + f.astype(x.dtype) * (out[:, :, :, i1] - left)
    return np.ascontiguousarray(out), cache


def resize_bilinear_backward(dy, cache):
    shape, out_h, out_w = cache
    n, c, h, w = shape
    if (h, w) == (out_h, out_w):
        return dy.copy()
    d = dy
    if out_w != w:
        d = d @ _resize_matrix(w, out_w, dy.dtype)
    if out_h != h:
        d = _resize_matrix(h, out_h, dy.dtype).T @ d
    return np.ascontiguousarray(d)


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

def matmul_forward(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape[1]} vs {b.shape[0]}")
    return a @ b, (a, b)


def matmul_backward(dy, cache):
    a, b = cache
    return dy @ b.T, a.T @ dy


def softmax_rows_forward(m, overwrite=False):
    """Row softmax.  ``overwrite=True`` reuses ``m``'s buffer for the result."""
    e = m if overwrite else m.copy()
    e -= e.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e, e


def softmax_rows_backward(dy, p, overwrite=False):
    """``overwrite=True`` reuses ``dy``'s buffer for the result."""
    inner = np.einsum("ij,ij->i", dy, p)[:, None] if dy.ndim == 2 else (dy * p).sum(axis=-1, keepdims=True)
    d = dy if overwrite else dy.copy()
    d -= inner
    d *= p
    return d


# ---------------------------------------------------------------------------
# channel concat
# ---------------------------------------------------------------------------

def concat_channels_forward(a, b):
    _check_rank4(a, "a")
    _check_rank4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: n/h/w mismatch between {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(dy, split):
    return np.ascontiguousarray(dy[:, :split]), np.ascontiguousarray(dy[:, split:])
