"""Hint path + UNet composed into one trainable network."""

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from hintu.engine.params import ParamStore
from hintu.errors import ConfigError
from hintu.hint import HintConfig, HintModule
from hintu.unet import PRESETS, UNet, UNetConfig


@dataclass
class ModelConfig:
    hint: HintConfig = field(default_factory=HintConfig)
    levels: int = 5
    base_width: int = 32
    raw_baseline: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.raw_baseline and self.hint.mode != "off":
            raise ConfigError("raw_baseline requires hint mode 'off'")

    @classmethod
    def preset(cls, name, hint=None, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        hint = hint or HintConfig(c_base=PRESETS[name]["base_width"])
        return cls(hint=hint, **{**PRESETS[name], **overrides})

    def unet_config(self):
        in_ch = self.hint.c_i if self.raw_baseline else self.hint.c_base
        return UNetConfig(levels=self.levels, base_width=self.base_width, in_channels=in_ch)

    def to_items(self):
        items = {f"hint.{k}": v for k, v in asdict(self.hint).items()}
        items.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "hint"})
        return items

    @classmethod
    def from_items(cls, items):
        hint_types = {f.name: f.type for f in fields(HintConfig)}
        hint_kw, top_kw = {}, {}
        for key, raw in items.items():
            if key.startswith("hint."):
                name = key[5:]
                if name not in hint_types:
                    raise ConfigError(f"unknown model config key {key!r}")
                hint_kw[name] = _coerce(raw, HintConfig.__dataclass_fields__[name].default)
            elif key in ("levels", "base_width", "raw_baseline", "seed"):
                top_kw[key] = _coerce(raw, cls.__dataclass_fields__[key].default)
        return cls(hint=HintConfig(**hint_kw), **top_kw)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


class HintUNet:
    """``image -> hint path -> UNet -> probability map``.

    With ``raw_baseline`` the hint path is absent and the UNet reads the
    image directly.  Hint mode ``off`` keeps the widening conv block so the
    baseline differs from HintU only in the hint path.
    """

    def __init__(self, config):
        self.config = config
        s_hint, s_unet = np.random.SeedSequence(config.seed).spawn(2)
        self.hint = None if config.raw_baseline else HintModule(config.hint, np.random.Generator(np.random.PCG64(s_hint)))
        self.unet = UNet(config.unet_config(), np.random.Generator(np.random.PCG64(s_unet)))
        self.params = ParamStore.from_layers(hint=self.hint, unet=self.unet)

    @property
    def dtype(self):
        return next(iter(self.params))[1].data.dtype

    def named_parameters(self, prefix=""):
        return iter(self.params)

    def forward(self, image, train=True):
        x = self.hint.forward(image, train) if self.hint is not None else image
        return self.unet.forward(x, train)

    def backward(self, dprob):
        d = self.unet.backward(dprob)
        return self.hint.backward(d) if self.hint is not None else d

    def predict(self, images, batch_size=8):
        """Eval-mode probabilities, processed in chunks of ``batch_size``."""
        images = np.asarray(images, dtype=self.dtype)
        outs = [self.forward(images[i : i + batch_size], train=False) for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)

    __call__ = predict

    def astype(self, dtype):
        self.params.astype(dtype)
        return self


def build_model(config):
    return HintUNet(config)
