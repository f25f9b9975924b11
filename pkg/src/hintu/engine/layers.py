"""Stateful layer wrappers around :mod:`hintu.engine.ops`.

A layer keeps the cache of its last forward call so ``backward`` can run
without the input; gradients accumulate into each :class:`Parameter`.
"""

import numpy as np

from hintu.engine import ops
from hintu.errors import HintError


class Parameter:
    """A tensor and its gradient buffer.

    Buffers (batch-norm running statistics) are Parameters with
    ``trainable=False``; they are saved in checkpoints but never optimized.
    """

    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data, trainable=True):
        self.data = data
        self.grad = np.zeros_like(data) if trainable else None
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.trainable:
            self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        self.grad += g


class Layer:
    def __init__(self):
        self._params = {}
        self._children = {}
        self._cache = None

    def add_param(self, name, data, trainable=True):
        p = Parameter(data, trainable)
        self._params[name] = p
        return p

    def add_child(self, name, layer):
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def _need_cache(self):
        if self._cache is None:
            raise HintError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    __call__ = forward


def he_normal(rng, shape, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, k=3, stride=1, pad=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = self.add_param("weight", he_normal(rng, (out_ch, in_ch, k, k)))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=np.float32))

    def forward(self, x, train=True):
        y, self._cache = ops.conv2d_forward(x, self.weight.data, self.bias.data, self.stride, self.pad)
        return y

    def backward(self, dy):
        dx, dw, db = ops.conv2d_backward(dy, self._need_cache())
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class BatchNorm2d(Layer):
    def __init__(self, ch, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(ch, dtype=np.float32))
        self.beta = self.add_param("beta", np.zeros(ch, dtype=np.float32))
        self.running_mean = self.add_param("running_mean", np.zeros(ch, dtype=np.float32), trainable=False)
        self.running_var = self.add_param("running_var", np.ones(ch, dtype=np.float32), trainable=False)

    def forward(self, x, train=True):
        y, self._cache = ops.batch_norm_forward(
            x, self.gamma.data, self.beta.data, self.running_mean.data, self.running_var.data,
            train=train, momentum=self.momentum, eps=self.eps,
        )
        return y

    def backward(self, dy):
        dx, dg, db = ops.batch_norm_backward(dy, self._need_cache())
        self.gamma.accumulate(dg)
        self.beta.accumulate(db)
        return dx


class Activation(Layer):
    def __init__(self, kind="relu"):
        super().__init__()
        self.kind = kind

    def forward(self, x, train=True):
        y, self._cache = ops.activation_forward(x, self.kind)
        return y

    def backward(self, dy):
        return ops.activation_backward(dy, self._need_cache())


class WindowStat(Layer):
    def __init__(self, k, kind):
        super().__init__()
        self.k = k
        self.kind = kind

    def forward(self, x, train=True):
        y, self._cache = ops.window_stat_forward(x, self.k, self.kind)
        return y

    def backward(self, dy):
        return ops.window_stat_backward(dy, self._need_cache())


class MaxPool2x(Layer):
    def forward(self, x, train=True):
        y, self._cache = ops.maxpool2x_forward(x)
        return y

    def backward(self, dy):
        return ops.maxpool2x_backward(dy, self._need_cache())


class Resize(Layer):
    """Bilinear resize by a fixed factor or to a fixed size."""

    def __init__(self, scale=2, size=None):
        super().__init__()
        self.scale = scale
        self.size = size

    def forward(self, x, train=True):
        oh, ow = self.size if self.size is not None else (x.shape[2] * self.scale, x.shape[3] * self.scale)
        y, self._cache = ops.resize_bilinear_forward(x, oh, ow)
        return y

    def backward(self, dy):
        return ops.resize_bilinear_backward(dy, self._need_cache())


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    def forward(self, x, train=True):
        for layer in self._children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(list(self._children.values())):
            dy = layer.backward(dy)
        return dy


class ConvBlock(Sequential):
    """conv -> batch norm -> relu."""

    def __init__(self, in_ch, out_ch, k=3, rng=None):
        Layer.__init__(self)
        self.conv = self.add_child("conv", Conv2d(in_ch, out_ch, k, rng=rng))
        self.bn = self.add_child("bn", BatchNorm2d(out_ch))
        self.act = self.add_child("act", Activation("relu"))
