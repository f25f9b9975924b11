"""Loss, optimizer, schedule and the epoch loop."""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from hintu.engine import ops
from hintu.errors import ConfigError, DatasetError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    epochs: int = 300
    batch: int = 8
    resolution: int = 256
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bce_clamp: float = 1e-7
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.epochs < 1 or self.batch < 1 or self.resolution < 1:
            raise ConfigError("epochs, batch and resolution must be >= 1")


def bce_loss(pred, target, clamp=1e-7):
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [clamp, 1 - clamp] before the logs; the gradient
    is the formula's derivative evaluated at the clamped value.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} and target {target.shape} differ")
    if not np.all((target == 0) | (target == 1)):
        raise ConfigError("bce: targets must be exactly 0 or 1")
    p = np.clip(pred.astype(np.float64), clamp, 1 - clamp)
    y = target.astype(np.float64)
    loss = float(np.mean(-y * np.log(p) - (1 - y) * np.log1p(-p)))
    grad = ((p - y) / (p * (1 - p)) / p.size).astype(pred.dtype)
    return loss, grad


def cosine_lr(t, epochs, lr_max=1e-3, lr_min=1e-6):
    if t >= epochs:
        return lr_min
    if t <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / epochs))


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable()}

    def step(self, lr):
        trainable = self.params.trainable()
        for name, p in trainable:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"AdamW: non-finite gradient in {name}; step rejected")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in trainable:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def state(self):
        tensors = {}
        for name in self.m:
            tensors[f"opt/m/{name}"] = self.m[name]
            tensors[f"opt/v/{name}"] = self.v[name]
        tensors["opt/step"] = np.array([self.t], dtype=np.float32)
        return tensors

    def load_state(self, tensors):
        for name in self.m:
            self.m[name] = tensors[f"opt/m/{name}"].astype(self.m[name].dtype)
            self.v[name] = tensors[f"opt/v/{name}"].astype(self.v[name].dtype)
        self.t = int(tensors["opt/step"][0])


def prepare_arrays(samples, resolution):
    """Stack samples at ``resolution``; masks resized bilinearly then cut at 0.5."""
    images, masks = [], []
    for s in samples:
        img = s.image.astype(np.float32)
        mask = s.mask.astype(np.float32)[None, None]
        if img.shape[2:] != (resolution, resolution):
            img, _ = ops.resize_bilinear_forward(img, resolution, resolution)
            mask, _ = ops.resize_bilinear_forward(mask, resolution, resolution)
            mask = (mask >= 0.5).astype(np.float32)
        images.append(img[0])
        masks.append(mask[0])
    return np.stack(images), np.stack(masks)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_iou: float


LOG_HEADER = ["epoch", "lr", "train_loss", "val_iou"]


def write_log(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in records:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_iou)])


@dataclass
class TrainResult:
    records: list
    last_path: str = None
    best_path: str = None
    best_epoch: int = 0
    optimizer: object = None


def train_loop(model, train_set, config, val_set=None, out_dir=None, on_epoch=None):
    """Train ``model`` in place.

    Each epoch: seeded shuffle, mini-batches of ``config.batch`` (last partial
    batch kept), BCE, backward, AdamW with the epoch's cosine learning rate.
    With ``out_dir`` the CSV log, ``last.bin`` and ``best.bin`` are written
    there.  "Best" is the highest validation IoU, or the lowest training loss
    when no validation set is given.
    """
    from hintu.checkpoint import make_checkpoint, save_checkpoint
    from hintu.metrics import evaluate_dataset

    if not train_set:
        raise DatasetError("training set is empty")
    images, masks = prepare_arrays(train_set, config.resolution)
    images = images.astype(model.dtype)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    opt = AdamW(model.params, (config.beta1, config.beta2), config.adam_eps, config.weight_decay)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    records = []
    best_score, best_epoch = None, 0
    result = TrainResult(records)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch)):
            idx = order[start : start + config.batch]
            model.params.zero_grad()
            pred = model.forward(images[idx], train=True)
            loss, grad = bce_loss(pred, masks[idx], config.bce_clamp)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            model.backward(grad)
            opt.step(lr)
            total += loss * len(idx)
            count += len(idx)
        val_iou = float("nan")
        if val_set:
            val_iou = evaluate_dataset(model, val_set, config.threshold, config.resolution).iou
        rec = EpochRecord(epoch + 1, lr, total / count, val_iou)
        records.append(rec)
        log.info("epoch %d lr %.3e loss %.6f val_iou %.4f", rec.epoch, lr, rec.train_loss, val_iou)
        if on_epoch is not None:
            on_epoch(rec)

        score = val_iou if val_set else -rec.train_loss
        if best_score is None or score > best_score:
            best_score, best_epoch = score, rec.epoch
            if out_dir:
                result.best_path = os.path.join(out_dir, "best.bin")
                save_checkpoint(result.best_path, make_checkpoint(model, opt, rec.epoch, rng, config))
    result.best_epoch = best_epoch
    if out_dir:
        result.last_path = os.path.join(out_dir, "last.bin")
        save_checkpoint(result.last_path, make_checkpoint(model, opt, config.epochs, rng, config))
        write_log(os.path.join(out_dir, "train_log.csv"), records)
    result.optimizer = opt
    return result


def train_config_items(config):
    return {f"train.{k}": v for k, v in asdict(config).items()}


def train_config_from_items(items):
    kw = {}
    for f in fields(TrainConfig):
        key = f"train.{f.name}"
        if key in items:
            kw[f.name] = type(f.default)(items[key])
    return TrainConfig(**kw)
