"""
hintu command-line entry point.

Subcommands: gen-data, train, eval, infer, hint-viz, stats, curve, gradcheck.
Exit codes: 0 success, 1 validation/usage error, 2 IO error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from hintu.config import load_kv_file
from hintu.errors import CheckpointError, ConfigError, HintError

log = logging.getLogger("hintu")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# option resolution: built-in defaults < --config file < explicit flags
# ---------------------------------------------------------------------------

COMMON = {"seed": 0, "threads": 0, "config": None}

DEFAULTS = {
    "gen-data": {"out": None, "count": 100, "size": 64, "targets_min": 1, "targets_max": 3,
                 "sigma_min": 0.5, "sigma_max": 2.0, "contrast_min": 0.15, "contrast_max": 0.4,
                 "clutter": 0.03},
    "train": {"data": None, "val_data": None, "out": "run", "mode": "hintu", "preset": "tiny",
              "epochs": 300, "batch": 8, "lr_max": 1e-3, "lr_min": 1e-6, "resolution": 64,
              "weight_decay": 0.01, "k": 3, "c_base": None, "levels": None, "width": None,
              "raw_baseline": False, "hinto_strict": False, "attn_scale": "ci", "max_tokens": 16384},
    "eval": {"data": None, "ckpt": None, "threshold": 0.5, "resolution": None, "out": None,
             "pd_mode": "overlap", "pd_distance": 3.0},
    "infer": {"ckpt": None, "image": None, "out": None, "threshold": 0.5, "resolution": None},
    "hint-viz": {"image": None, "k": 3, "out": None, "figure": False},
    "stats": {"data": None, "fraction": 0.95, "out": None},
    "curve": {"data": None, "ckpt": None, "out": None, "thresholds": "0.05:0.95:0.05",
              "resolution": None, "pd_mode": "overlap", "pd_distance": 3.0},
    "gradcheck": {"tol": 1e-4, "h": 1e-5, "max_checks": 1500, "out": None},
}

REQUIRED = {
    "gen-data": ["out"],
    "train": ["data"],
    "eval": ["data", "ckpt"],
    "infer": ["ckpt", "image", "out"],
    "hint-viz": ["image", "out"],
    "stats": ["data"],
    "curve": ["data", "ckpt"],
}

BOOL_FLAGS = {"raw_baseline", "hinto_strict", "figure"}
CHOICES = {"mode": ("hintu", "hinto", "off"), "preset": ("tiny", "default"),
           "pd_mode": ("overlap", "centroid"), "attn_scale": ("ci", "cbase")}


def _coerce(key, raw, default):
    if key in BOOL_FLAGS:
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key}: expected true/false, got {raw!r}")
        return str(raw).lower() in ("true", "1")
    if raw is None:
        return None
    try:
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, int) or key in ("c_base", "levels", "width", "resolution"):
            return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def build_parser():
    parser = _Parser(prog="hintu", description="Hint-prior infrared small target detection toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, opts in DEFAULTS.items():
        p = sub.add_parser(name)
        for key in {**COMMON, **opts}:
            flag = "--" + key.replace("_", "-")
            if key in BOOL_FLAGS:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, dest=key, default=None, choices=CHOICES.get(key))
    return parser


def resolve(command, ns):
    defaults = {**COMMON, **DEFAULTS[command]}
    values = dict(defaults)
    if ns.config:
        for key, raw in load_kv_file(ns.config).items():
            if key not in defaults or key == "config":
                raise ConfigError(f"unknown config key {key!r} for {command}")
            values[key] = raw
    for key in defaults:
        given = getattr(ns, key, None)
        if given is not None:
            values[key] = given
    resolved = {k: _coerce(k, v, defaults[k]) for k, v in values.items()}
    for key, allowed in CHOICES.items():
        if key in resolved and resolved[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {resolved[key]!r}")
    missing = [k for k in REQUIRED.get(command, []) if resolved.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _print_config(command, cfg):
    print(f"# hintu {command}")
    for k in sorted(cfg):
        print(f"#   {k}={cfg[k]}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg):
    from hintu.data import SceneSpec, generate_dataset

    spec = SceneSpec(cfg["size"], cfg["size"], (cfg["targets_min"], cfg["targets_max"]),
                     (cfg["sigma_min"], cfg["sigma_max"]), (cfg["contrast_min"], cfg["contrast_max"]),
                     cfg["clutter"])
    spec.validate()
    rows = generate_dataset(spec, cfg["count"], cfg["out"], master_seed=cfg["seed"])
    print(f"wrote {len(rows)} scenes to {cfg['out']}")


def _model_config(cfg):
    from hintu.hint import HintConfig
    from hintu.model import ModelConfig
    from hintu.unet import PRESETS

    preset = PRESETS[cfg["preset"]]
    levels = cfg["levels"] or preset["levels"]
    width = cfg["width"] or preset["base_width"]
    c_base = cfg["c_base"] or width
    mode = "off" if cfg["raw_baseline"] else cfg["mode"]
    hint = HintConfig(k=cfg["k"], c_base=c_base, mode=mode, max_tokens=cfg["max_tokens"],
                      attn_scale=cfg["attn_scale"], hinto_strict=cfg["hinto_strict"])
    return ModelConfig(hint=hint, levels=levels, base_width=width, raw_baseline=cfg["raw_baseline"], seed=cfg["seed"])


def cmd_train(cfg):
    from hintu.data import load_dataset
    from hintu.model import HintUNet
    from hintu.plotting import plot_training_log
    from hintu.training import TrainConfig, train_loop

    train_set = load_dataset(cfg["data"])
    val_set = load_dataset(cfg["val_data"]) if cfg["val_data"] else None
    model = HintUNet(_model_config(cfg))
    tcfg = TrainConfig(lr_max=cfg["lr_max"], lr_min=cfg["lr_min"], epochs=cfg["epochs"], batch=cfg["batch"],
                       resolution=cfg["resolution"], seed=cfg["seed"], weight_decay=cfg["weight_decay"])
    print(f"# parameters: {model.params.count()}")
    result = train_loop(model, train_set, tcfg, val_set=val_set, out_dir=cfg["out"],
                        on_epoch=lambda r: print(f"epoch {r.epoch} lr {r.lr:.3e} loss {r.train_loss:.6f} val_iou {r.val_iou:.4f}"))
    plot_training_log(result.records, os.path.join(cfg["out"], "train_log.png"))
    print(f"wrote {result.last_path} and {result.best_path} (best epoch {result.best_epoch})")


def _load_model(path):
    from hintu.checkpoint import load_checkpoint, restore_model

    ckpt = load_checkpoint(path)
    res = int(ckpt.config.get("train.resolution", 0)) or None
    return restore_model(ckpt), res


def cmd_eval(cfg):
    from hintu.data import load_dataset
    from hintu.metrics import evaluate_dataset, write_report_csv

    model, res = _load_model(cfg["ckpt"])
    data = load_dataset(cfg["data"])
    report = evaluate_dataset(model, data, cfg["threshold"], cfg["resolution"] or res,
                              cfg["pd_mode"], cfg["pd_distance"])
    if cfg["out"]:
        write_report_csv(cfg["out"], report)
        print(f"wrote {cfg['out']}")
    print(report.summary())


def cmd_infer(cfg):
    from hintu.data import SamplePair, read_gray, write_gray8
    from hintu.metrics import binarize, predict_native

    model, res = _load_model(cfg["ckpt"])
    img = read_gray(cfg["image"])
    sample = SamplePair(img[None, None], np.zeros(img.shape, bool), os.path.basename(cfg["image"]))
    prob = predict_native(model, [sample], cfg["resolution"] or res)[0]
    write_gray8(cfg["out"] + "_prob.png", prob)
    write_gray8(cfg["out"] + "_mask.png", binarize(prob, cfg["threshold"]).astype(float))
    print(f"wrote {cfg['out']}_prob.png and {cfg['out']}_mask.png")


def _minmax(a):
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def cmd_hint_viz(cfg):
    from hintu.data import read_gray, write_gray8
    from hintu.hint import hint_prior

    img = read_gray(cfg["image"]).astype(np.float64)
    prior = hint_prior(img[None, None], cfg["k"])[0]
    out = cfg["out"]
    write_gray8(out + "_mean_residual.png", _minmax(prior[0]))
    write_gray8(out + "_max_residual.png", _minmax(prior[1]))
    print(f"wrote {out}_mean_residual.png and {out}_max_residual.png")
    if cfg["figure"]:
        from hintu.plotting import plot_hint_panels

        plot_hint_panels(img, prior, out + "_panels.png")


def cmd_stats(cfg):
    from hintu.data import compute_stats, load_dataset, write_stats_csv
    from hintu.plotting import plot_dataset_stats

    stats = compute_stats(load_dataset(cfg["data"]), cfg["fraction"])
    out = cfg["out"] or os.path.join(cfg["data"], "stats.csv")
    write_stats_csv(out, stats)
    plot_dataset_stats(stats, os.path.splitext(out)[0] + ".png")
    print(f"wrote {out}")


def parse_thresholds(text):
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise ConfigError("threshold step must be positive")
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_curve(cfg):
    from hintu.data import load_dataset
    from hintu.metrics import pd_fa_curve, write_curve_csv
    from hintu.plotting import plot_pd_fa_curve

    model, res = _load_model(cfg["ckpt"])
    data = load_dataset(cfg["data"])
    points = pd_fa_curve(model, data, parse_thresholds(cfg["thresholds"]), cfg["resolution"] or res,
                         cfg["pd_mode"], cfg["pd_distance"])
    out = cfg["out"] or "curve.csv"
    write_curve_csv(out, points)
    plot_pd_fa_curve({os.path.basename(cfg["ckpt"]): points}, os.path.splitext(out)[0] + ".png")
    for p in points:
        print(f"{p.threshold:.2f}  Pd={p.pd:.4f}  Fa={p.fa * 1e6:.2f}e-6")
    print(f"wrote {out}")


def cmd_gradcheck(cfg):
    from hintu.verify import run_gradient_suite

    results = run_gradient_suite(tol=cfg["tol"], h=cfg["h"], max_checks=cfg["max_checks"], seed=cfg["seed"])
    ok = True
    lines = []
    for name, rep, expect_pass in results:
        good = rep.passed == expect_pass
        ok &= good
        tag = "negative-control " if not expect_pass else ""
        lines.append(f"{'ok ' if good else 'BAD'} {tag}{name}: {rep}")
    print("\n".join(lines))
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write("name,max_rel_err,passed,checked\n")
            for name, rep, _ in results:
                fh.write(f"{name},{rep.max_rel_err!r},{rep.passed},{rep.n_checked}\n")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "hint-viz": cmd_hint_viz, "stats": cmd_stats, "curve": cmd_curve, "gradcheck": cmd_gradcheck,
}


def _limit_threads(n):
    if n and n > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    return None


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            parser.print_usage(sys.stderr)
            raise UsageError("hintu: error: a subcommand is required")
        cfg = resolve(ns.command, ns)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"hintu: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"hintu: error: {exc}", file=sys.stderr)
        return 2

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _print_config(ns.command, cfg)
    limiter = _limit_threads(cfg["threads"])
    try:
        return COMMANDS[ns.command](cfg) or 0
    except (OSError, CheckpointError) as exc:
        print(f"hintu: error: {exc}", file=sys.stderr)
        return 2
    except (HintError, ValueError) as exc:
        print(f"hintu: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def run_cli(argv):
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
