"""Compact UNet: conv-block encoder, bilinear-upsampling decoder, sigmoid head."""

from dataclasses import dataclass

import numpy as np

from hintu.engine import ops
from hintu.engine.layers import Activation, Conv2d, ConvBlock, Layer, MaxPool2x, Resize, Sequential
from hintu.errors import ConfigError, ShapeError

MAX_WIDTH = 512

PRESETS = {
    "tiny": {"levels": 3, "base_width": 8},
    "default": {"levels": 5, "base_width": 32},
}


@dataclass
class UNetConfig:
    levels: int = 5
    base_width: int = 32
    in_channels: int = 32
    out_channels: int = 1

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"UNet needs at least 2 levels, got {self.levels}")
        if self.base_width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("UNet widths must be positive")

    @property
    def multiple(self):
        return 2 ** (self.levels - 1)

    def widths(self):
        return [min(self.base_width * 2 ** i, MAX_WIDTH) for i in range(self.levels)]


class UNet(Layer):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        widths = config.widths()
        self.encoders = []
        prev = config.in_channels
        for i, w in enumerate(widths):
            enc = self.add_child(f"enc{i + 1}", Sequential(ConvBlock(prev, w, 3, rng), ConvBlock(w, w, 3, rng)))
            self.encoders.append(enc)
            prev = w
        self.pools = [MaxPool2x() for _ in widths[:-1]]
        self.ups = [Resize(scale=2) for _ in widths[:-1]]
        self.decoders = []
        # decoder i sits at encoder level i, consuming the level below
        for i in range(len(widths) - 2, -1, -1):
            below = widths[i + 1]
            dec = self.add_child(
                f"dec{i + 1}", Sequential(ConvBlock(below + widths[i], widths[i], 3, rng), ConvBlock(widths[i], widths[i], 3, rng))
            )
            self.decoders.append(dec)
        self.head = self.add_child("head", Conv2d(widths[0], config.out_channels, k=1, pad=0, rng=rng))
        self.sigmoid = Activation("sigmoid")

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        m = self.config.multiple
        if h % m or w % m:
            raise ShapeError(f"UNet input {h}x{w} must be divisible by {m} (2^(levels-1))")
        if c != self.config.in_channels:
            raise ShapeError(f"UNet expects {self.config.in_channels} input channels, got {c}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc.forward(x, train)
            if i < len(self.pools):
                skips.append(x)
                x = self.pools[i].forward(x, train)
        self._splits = []
        for j, dec in enumerate(self.decoders):
            up = self.ups[j].forward(x, train)
            cat, split = ops.concat_channels_forward(up, skips[-1 - j])
            self._splits.append(split)
            x = dec.forward(cat, train)
        return self.sigmoid.forward(self.head.forward(x, train), train)

    def backward(self, dy):
        d = self.head.backward(self.sigmoid.backward(dy))
        dskips = []
        # decoders run deepest-first, so walk them back shallowest-first
        for j in range(len(self.decoders) - 1, -1, -1):
            dcat = self.decoders[j].backward(d)
            dup, dskip = ops.concat_channels_backward(dcat, self._splits[j])
            dskips.append(dskip)
            d = self.ups[j].backward(dup)
        # dskips[k] belongs to encoder level k (0 = shallowest)
        for i in range(len(self.encoders) - 1, -1, -1):
            if i < len(self.pools):
                d = self.pools[i].backward(d) + dskips[i]
            d = self.encoders[i].backward(d)
        return d


def build_unet(config, seed=0):
    """He-normal conv weights from a PCG64 stream; zero biases; BN gamma 1 / beta 0."""
    return UNet(config, np.random.Generator(np.random.PCG64(seed)))

