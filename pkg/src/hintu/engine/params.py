from collections import OrderedDict

import numpy as np

from hintu.errors import ConfigError


class ParamStore:
    """Ordered name -> Parameter map collected from a layer tree."""

    def __init__(self, named=()):
        self._items = OrderedDict()
        for name, p in named:
            if name in self._items:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self._items[name] = p

    @classmethod
    def from_layers(cls, **roots):
        named = []
        for prefix, layer in roots.items():
            if layer is not None:
                named.extend(layer.named_parameters(prefix + "."))
        return cls(named)

    def __iter__(self):
        return iter(self._items.items())

    def __len__(self):
        return len(self._items)

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def names(self):
        return list(self._items)

    def trainable(self):
        return [(n, p) for n, p in self._items.items() if p.trainable]

    def count(self, trainable_only=True):
        return sum(p.data.size for _, p in self._items.items() if p.trainable or not trainable_only)

    def zero_grad(self):
        for _, p in self._items.items():
            p.zero_grad()

    def astype(self, dtype):
        for _, p in self._items.items():
            p.data = p.data.astype(dtype)
            if p.trainable:
                p.grad = p.grad.astype(dtype)

    def state(self):
        return OrderedDict((n, p.data.copy()) for n, p in self._items.items())

    def load_state(self, tensors):
        missing = [n for n in self._items if n not in tensors]
        if missing:
            raise ConfigError(f"state is missing parameters: {missing[:5]}")
        for n, p in self._items.items():
            src = np.asarray(tensors[n])
            if src.shape != p.data.shape:
                raise ConfigError(f"parameter {n}: shape {src.shape} != expected {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)
