"""
Image/mask IO, seeded synthetic infrared scenes, and dataset statistics.

Synthetic scenes: a smooth background (linear gradient + bilinear-upsampled
coarse noise + a few large dim blobs), bounded per-pixel clutter, and small
Gaussian targets centred on pixel centres.  A target's mask is the set of
pixels where its own contribution is at least half its peak.
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from hintu.engine import ops
from hintu.errors import ConfigError, DatasetError

IMAGE_EXTS = (".png", ".pgm")


def make_rng(seed):
    """PCG64 generator; never the platform default."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class SamplePair:
    image: np.ndarray  # (1, 1, h, w) float32 in [0, 1]
    mask: np.ndarray  # (h, w) bool
    source: str = ""

    def __post_init__(self):
        if self.image.shape[2:] != self.mask.shape:
            raise DatasetError(f"{self.source}: image {self.image.shape[2:]} and mask {self.mask.shape} differ")

    @property
    def native_dims(self):
        return self.mask.shape


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def read_gray(path):
    """Grayscale image as float32 in [0, 1], normalized by the type max."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1) if arr.shape[-1] >= 3 else arr[..., 0]
    if mode.startswith("I;16") or mode in ("I", "I;16B") or arr.dtype == np.uint16:
        scale = 65535.0
    elif arr.dtype == bool:
        scale = 1.0
    else:
        scale = 255.0
    return (arr.astype(np.float64) / scale).astype(np.float32)


def write_gray8(path, arr):
    a = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path, format="PNG")


def _stems(folder):
    found = {}
    for name in sorted(os.listdir(folder)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTS:
            found.setdefault(stem, os.path.join(folder, name))
    return found


def load_dataset(images_dir, masks_dir=None):
    """Pairs matched by file stem, in lexicographic stem order.

    ``masks_dir`` defaults to ``<images_dir>/../masks`` when ``images_dir``
    is a dataset root containing ``images/`` and ``masks/``.
    """
    if masks_dir is None:
        root = images_dir
        images_dir, masks_dir = os.path.join(root, "images"), os.path.join(root, "masks")
    for d in (images_dir, masks_dir):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"dataset directory not found: {d}")
    images, masks = _stems(images_dir), _stems(masks_dir)
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DatasetError(f"images without masks in {masks_dir}: {', '.join(missing)}")
    samples = []
    for stem in sorted(images):
        img = read_gray(images[stem])
        mask = read_gray(masks[stem]) >= 0.5  # 128 on the 8-bit scale
        samples.append(SamplePair(img[None, None], mask, stem))
    return samples


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    targets: tuple = (1, 3)  # inclusive count range
    sigma: tuple = (0.5, 2.0)
    contrast: tuple = (0.15, 0.4)
    clutter: float = 0.03
    background: tuple = (0.1, 0.45)  # range of the smooth background
    blobs: tuple = (0, 3)
    separation: float = 4.0
    seed: int = 0

    def validate(self):
        for name in ("targets", "sigma", "contrast", "background", "blobs"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"scene {name} range is empty: {lo} > {hi}")
        if self.targets[0] < 0 or self.sigma[0] <= 0 or self.contrast[0] <= 0:
            raise ConfigError("scene target count, sigma and contrast must be positive")
        if not 0 <= self.clutter < self.contrast[0] / 2:
            raise ConfigError("clutter must be below half the minimum target contrast")
        if self.background[1] + self.contrast[1] + self.clutter > 1:
            raise ConfigError("background + contrast + clutter would exceed 1")
        margin = math.ceil(3 * self.sigma[1])
        if 2 * margin >= min(self.height, self.width):
            raise ConfigError(
                f"target sigma {self.sigma[1]} is too large for a {self.height}x{self.width} frame"
            )


@dataclass
class Target:
    row: int
    col: int
    sigma: float
    contrast: float
    area: int = 0


@dataclass
class Scene:
    background: np.ndarray  # clutter-free
    clutter: np.ndarray
    targets_map: np.ndarray
    image: np.ndarray  # quantized to 8-bit levels
    mask: np.ndarray
    targets: list = field(default_factory=list)


def _smooth_background(rng, h, w, spec):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    grad = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
    grad = (grad - grad.min()) / max(np.ptp(grad), 1e-12)

    gh, gw = max(h // 8, 2), max(w // 8, 2)
    coarse = rng.uniform(0, 1, size=(1, 1, gh, gw))
    noise, _ = ops.resize_bilinear_forward(coarse, h, w)
    noise = noise[0, 0]

    blobs = np.zeros((h, w))
    for _ in range(int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(0.06, 0.15) * min(h, w)
        blobs += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))

    mix = rng.dirichlet([2.0, 2.0, 1.0])
    raw = mix[0] * grad + mix[1] * noise + mix[2] * np.clip(blobs, 0, 1)
    lo, hi = spec.background
    span = rng.uniform(0.3, 1.0) * (hi - lo)
    base = rng.uniform(lo, hi - span)
    raw = (raw - raw.min()) / max(np.ptp(raw), 1e-12)
    return base + span * raw


def render_scene(spec):
    """All layers of one scene.  A pure function of ``spec`` (seed included)."""
    spec.validate()
    h, w = spec.height, spec.width
    rng = make_rng(spec.seed)
    background = _smooth_background(rng, h, w, spec)
    clutter = rng.uniform(-spec.clutter, spec.clutter, size=(h, w))

    yy, xx = np.mgrid[0:h, 0:w]
    targets_map = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    n_targets = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
    placed = []
    for _ in range(n_targets):
        sigma = float(rng.uniform(*spec.sigma))
        contrast = float(rng.uniform(*spec.contrast))
        radius = sigma * math.sqrt(2 * math.log(2))  # half-peak radius
        margin = math.ceil(3 * sigma)
        for _attempt in range(1000):
            r = int(rng.integers(margin, h - margin))
            c = int(rng.integers(margin, w - margin))
            if all(math.hypot(r - t.row, c - t.col) >= radius + t_rad + spec.separation for t, t_rad in placed):
                break
        else:
            raise ConfigError(f"could not place {n_targets} separated targets in a {h}x{w} frame")
        d2 = (yy - r) ** 2 + (xx - c) ** 2
        contrib = contrast * np.exp(-d2 / (2 * sigma * sigma))
        own = contrib >= contrast / 2
        targets_map += contrib
        mask |= own
        t = Target(r, c, sigma, contrast, int(own.sum()))
        placed.append((t, radius))

    image = np.clip(background + clutter + targets_map, 0, 1)
    image = np.rint(image * 255) / 255
    return Scene(background, clutter, targets_map, image.astype(np.float32), mask, [t for t, _ in placed])


def generate_scene(spec):
    scene = render_scene(spec)
    return SamplePair(scene.image[None, None], scene.mask, f"seed{spec.seed}")


def generate_samples(template, count, master_seed=0):
    """In-memory scenes with per-image seed ``master_seed + index``."""
    out = []
    for i in range(count):
        s = generate_scene(replace(template, seed=master_seed + i))
        s.source = f"scene_{i:05d}"
        out.append(s)
    return out


def generate_dataset(template, count, out_dir, master_seed=0):
    """Write ``images/``, ``masks/`` PNG pairs and ``manifest.csv``; return the manifest rows."""
    img_dir, mask_dir = os.path.join(out_dir, "images"), os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    rows = []
    for i in range(count):
        scene = render_scene(replace(template, seed=master_seed + i))
        stem = f"scene_{i:05d}"
        write_gray8(os.path.join(img_dir, stem + ".png"), scene.image)
        write_gray8(os.path.join(mask_dir, stem + ".png"), scene.mask.astype(np.float64))
        rows.append((stem, len(scene.targets), ";".join(str(t.area) for t in scene.targets)))
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stem", "target_count", "target_areas"])
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

RATIO_EDGES = np.logspace(-6, 0, 13)  # two bins per decade from 1e-6 to 1


@dataclass
class Histogram:
    name: str
    edges: np.ndarray
    mass: np.ndarray


@dataclass
class DatasetStats:
    high_response_ratio: list
    target_ratio: list
    targets_per_frame: list
    histograms: list


def _log_hist(name, values):
    v = np.clip(np.asarray(values, dtype=np.float64), RATIO_EDGES[0], RATIO_EDGES[-1])
    counts, _ = np.histogram(v, bins=RATIO_EDGES)
    total = counts.sum()
    return Histogram(name, RATIO_EDGES, counts / total if total else counts.astype(float))


def compute_stats(dataset, fraction=0.95):
    from hintu.metrics import label_components_moore

    if not dataset:
        raise DatasetError("cannot compute statistics of an empty dataset")
    high, per_target, per_frame = [], [], []
    for s in dataset:
        img = s.image[0, 0]
        high.append(float(np.count_nonzero(img >= fraction * img.max()) / img.size))
        comps = label_components_moore(s.mask).components
        per_frame.append(len(comps))
        per_target.extend(c.size / s.mask.size for c in comps)
    top = max(per_frame)
    count_edges = np.arange(0, top + 2, dtype=np.float64)
    counts, _ = np.histogram(per_frame, bins=count_edges)
    hists = [
        _log_hist("high_response_ratio", high),
        _log_hist("target_ratio", per_target),
        Histogram("targets_per_frame", count_edges, counts / counts.sum()),
    ]
    return DatasetStats(high, per_target, per_frame, hists)


def write_stats_csv(path, stats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["histogram", "bin_lo", "bin_hi", "mass"])
        for hist in stats.histograms:
            for lo, hi, m in zip(hist.edges[:-1], hist.edges[1:], hist.mass):
                w.writerow([hist.name, repr(float(lo)), repr(float(hi)), repr(float(m))])
