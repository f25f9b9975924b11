"""
Binary checkpoint format::

    b"HNT1" | u32 version | u32 blob_len | blob (UTF-8 key=value text)
    | u32 tensor_count | per tensor: u16 name_len, name, u8 rank, u32 dims..., f32 data

All integers and floats little endian.  Optimizer moments are stored as extra
tensors under ``opt/``.  Epoch and RNG state live in the config blob.
"""

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from hintu.config import dump_kv, parse_kv
from hintu.errors import BadMagicError, TruncatedCheckpointError, UnsupportedVersionError

MAGIC = b"HNT1"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: OrderedDict = field(default_factory=OrderedDict)
    version: int = VERSION

    @property
    def epoch(self):
        return int(self.config.get("epoch", 0))

    @property
    def rng_state(self):
        raw = self.config.get("rng_state")
        return json.loads(raw) if raw else None

    def model_tensors(self):
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith("opt/"))


def save_checkpoint(path, ckpt):
    blob = dump_kv(ckpt.config).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(blob)), blob, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version} (this build reads {VERSION})")
    (blob_len,) = r.unpack("<I")
    config = parse_kv(r.take(blob_len).decode("utf-8"), source=str(path))
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return Checkpoint(config, tensors, version)


def make_checkpoint(model, optimizer=None, epoch=0, rng=None, train_config=None):
    from hintu.training import train_config_items

    config = {f"model.{k}": v for k, v in model.config.to_items().items()}
    if train_config is not None:
        config.update(train_config_items(train_config))
    config["epoch"] = epoch
    if rng is not None:
        config["rng_state"] = json.dumps(rng.bit_generator.state, sort_keys=True)
    tensors = OrderedDict(model.params.state())
    if optimizer is not None:
        tensors.update(optimizer.state())
    return Checkpoint(config, tensors)


def restore_model(ckpt):
    from hintu.model import HintUNet, ModelConfig

    items = {k[6:]: v for k, v in ckpt.config.items() if k.startswith("model.")}
    model = HintUNet(ModelConfig.from_items(items))
    model.params.load_state(ckpt.model_tensors())
    return model


def load_model(path):
    return restore_model(load_checkpoint(path))
