"""
Verification runs: the gradient suite (every layer kind, the full tiny model
and a negative control), the small-set overfit run, and the seeded
HintU-versus-baseline benchmark.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from hintu.data import SceneSpec, generate_samples
from hintu.engine import ops
from hintu.engine.gradcheck import FunctionModule, grad_check
from hintu.engine.layers import Activation, BatchNorm2d, Conv2d, MaxPool2x, Resize, WindowStat
from hintu.hint import CrossAttention, HintConfig, HintPrior
from hintu.metrics import evaluate_dataset
from hintu.model import HintUNet, ModelConfig
from hintu.training import TrainConfig, train_loop

# Seeds for the full-model check.  With these no ReLU or max-pool decision
# sits within h of a tie, where central differences are not meaningful.
FULL_MODEL_SEED = 1
FULL_MODEL_INPUT_SEED = 12


class _DoubledConv(Conv2d):
    """Conv layer whose backward is deliberately scaled by 2."""

    def backward(self, dy):
        return super().backward(2 * dy)


def _cases(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    yield "conv2d", Conv2d(3, 4, 3, rng=rng), [x]
    yield "conv2d_stride2", Conv2d(3, 4, 3, stride=2, rng=rng), [x]
    yield "conv2d_1x1", Conv2d(3, 4, 1, pad=0, rng=rng), [x]
    yield "batch_norm_train", BatchNorm2d(3), [x]
    yield "relu", Activation("relu"), [x]
    yield "sigmoid", Activation("sigmoid"), [x]
    yield "window_max", WindowStat(3, "max"), [x]
    yield "window_mean", WindowStat(3, "mean"), [x]
    yield "maxpool2x", MaxPool2x(), [x]
    yield "resize_up2", Resize(scale=2), [x]
    yield "resize_to_5x4", Resize(size=(5, 4)), [x]
    yield "matmul", FunctionModule(ops.matmul_forward, ops.matmul_backward), \
        [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))]
    yield "softmax_rows", FunctionModule(ops.softmax_rows_forward, ops.softmax_rows_backward), \
        [rng.standard_normal((4, 6))]
    yield "concat_channels", FunctionModule(ops.concat_channels_forward, ops.concat_channels_backward), \
        [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))]
    yield "hint_prior", HintPrior(3), [x]
    yield "cross_attention", CrossAttention(1.0), \
        [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3))]


def tiny_hint_model(mode="hintu", seed=FULL_MODEL_SEED):
    return HintUNet(ModelConfig.preset("tiny", hint=HintConfig(c_base=8, mode=mode), seed=seed))


def run_gradient_suite(tol=1e-4, h=1e-5, max_checks=1500, seed=0, include_model=True):
    """Returns ``[(name, report, expected_to_pass), ...]``."""
    rng = np.random.default_rng(seed)
    results = []
    for name, module, inputs in _cases(rng):
        results.append((name, grad_check(module, inputs, h=h, tol=tol, seed=seed), True))

    corrupt = _DoubledConv(3, 4, 3, rng=rng)
    results.append(("conv2d_backward_x2", grad_check(corrupt, [rng.standard_normal((1, 3, 5, 5))], h=h, tol=tol), False))

    if include_model:
        model = tiny_hint_model()
        x = np.random.default_rng(FULL_MODEL_INPUT_SEED).random((2, 1, 16, 16))
        results.append(("tiny_hintu_model", grad_check(model, [x], h=h, tol=tol, max_checks=max_checks, seed=seed), True))
    return results


# Scenes for the overfit run: three to five mid-sized targets per frame so the
# foreground is not swamped by background pixels under a 300-step budget.
OVERFIT_SCENE = SceneSpec(64, 64, targets=(3, 5), sigma=(1.2, 2.0), contrast=(0.25, 0.45), background=(0.1, 0.5))
OVERFIT_DATA_SEED = 100
OVERFIT_MODEL_SEED = 1


@dataclass
class OverfitResult:
    model: HintUNet
    dataset: list
    records: list
    iou: float
    seconds: float


def run_overfit(epochs=300, scene=OVERFIT_SCENE, count=8, data_seed=OVERFIT_DATA_SEED,
                seed=OVERFIT_MODEL_SEED, out_dir=None, stop_after=None):
    """Train the tiny HintU on ``count`` scenes and score it on the same scenes.

    ``stop_after`` ends training after that many epochs (the schedule still
    spans ``epochs``), which lets a short rerun be compared against a prefix
    of the full log.
    """
    data = generate_samples(scene, count, master_seed=data_seed)
    model = tiny_hint_model(seed=seed)
    cfg = TrainConfig(epochs=epochs, batch=8, resolution=scene.height, seed=seed)
    start = time.perf_counter()
    if stop_after is None:
        res = train_loop(model, data, cfg, out_dir=out_dir)
        records = res.records
    else:
        records = []

        class _Stop(Exception):
            pass

        def keep(rec):
            records.append(rec)
            if len(records) >= stop_after:
                raise _Stop

        try:
            train_loop(model, data, cfg, on_epoch=keep)
        except _Stop:
            pass
    seconds = time.perf_counter() - start
    iou = evaluate_dataset(model, data, 0.5, scene.height).iou
    return OverfitResult(model, data, records, iou, seconds)


@dataclass
class BenchmarkReport:
    seeds: list
    hintu: list = field(default_factory=list)
    baseline: list = field(default_factory=list)

    @property
    def margin(self):
        return float(np.mean(self.hintu) - np.mean(self.baseline))

    def lines(self):
        out = ["seed,hintu_iou,baseline_iou"]
        out += [f"{s},{a!r},{b!r}" for s, a, b in zip(self.seeds, self.hintu, self.baseline)]
        out.append(f"mean,{float(np.mean(self.hintu))!r},{float(np.mean(self.baseline))!r}")
        out.append(f"margin,{self.margin!r},")
        return out


def run_directional_benchmark(seeds=(0, 1, 2), n_train=128, n_test=64, epochs=100, size=32,
                              scene=None, data_seed=1000):
    """Test IoU of tiny HintU and of the widened plain-UNet baseline per seed.

    Train and test scenes come from disjoint seed ranges.  Both models of a
    seed share that seed for initialization and shuffling.
    """
    scene = scene or SceneSpec(size, size)
    train = generate_samples(scene, n_train, master_seed=data_seed)
    test = generate_samples(scene, n_test, master_seed=data_seed + n_train)
    report = BenchmarkReport(list(seeds))
    for seed in seeds:
        for mode, scores in (("hintu", report.hintu), ("off", report.baseline)):
            model = tiny_hint_model(mode, seed=seed)
            train_loop(model, train, TrainConfig(epochs=epochs, resolution=size, seed=seed))
            scores.append(evaluate_dataset(model, test, 0.5, size).iou)
    return report
