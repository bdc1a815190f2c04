"""Command-line front end wiring the library into reproducible runs.

Every subcommand resolves its settings with the same precedence:

    built-in defaults  <  --config FILE  <  --set key=value  <  typed flags

The config file is a flat ``key = value`` text format (``#`` comments,
dotted keys for grouping); relative paths inside it are resolved against
the file's own directory.  The merged, fully-resolved configuration is
written to ``<out>/config.txt`` before any work starts, so a run can be
reproduced by feeding that file back through ``--config``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (including gradient-check failures).
"""

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .backend import available_backends, backend_name, set_backend
from .errors import (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK,
                     ConfigError, DataError, NumericsError)

_REQUIRED = object()


@dataclass(frozen=True)
class Field:
    key: str                      # dotted config key
    conv: Callable                # str -> typed value
    default: object               # string form, None (optional), or _REQUIRED
    help: str
    path: bool = False            # resolve against the config file's dir
    flag: Optional[str] = None    # CLI flag override; derived from key if None

    @property
    def flag_name(self):
        if self.flag is not None:
            return self.flag
        return "--" + self.key.split(".")[-1].replace("_", "-")


@dataclass(frozen=True)
class RunConfig:
    """A resolved invocation: subcommand plus its effective settings."""
    subcommand: str
    config_file: Optional[str]
    effective: Dict[str, str]     # merged key -> value strings, echo-ready

    def text(self):
        lines = [f"# nafssr {self.subcommand} effective configuration",
                 f"subcommand = {self.subcommand}"]
        lines += [f"{k} = {v}" for k, v in self.effective.items()]
        return "\n".join(lines) + "\n"


def _conv_int(s):
    return int(s, 10)


def _conv_float(s):
    return float(s)


def _conv_str(s):
    return s


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _conv_bool(s):
    try:
        return _BOOL_WORDS[s.strip().lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {s!r}")


def _conv_size(s):
    h, sep, w = s.partition("x")
    if not sep:
        raise ValueError(f"expected HxW, got {s!r}")
    return (int(h, 10), int(w, 10))


def _conv_paths(s):
    parts = [p for p in (q.strip() for q in s.split(",")) if p]
    if not parts:
        raise ValueError("expected a comma-separated path list")
    return parts


def _schema(*fields):
    return {f.key: f for f in fields}


SCHEMAS = {
    "synth": _schema(
        Field("out", _conv_str, _REQUIRED, "dataset output directory", path=True),
        Field("seed", _conv_int, "0", "generator seed"),
        Field("count", _conv_int, "8", "number of stereo pairs"),
        Field("size", _conv_size, "64x192", "full-resolution size HxW"),
        Field("scale", _conv_int, "4", "downsampling factor (2 or 4)"),
        Field("max_disparity", _conv_int, "12", "largest layer shift in px"),
        Field("force", _conv_bool, "false", "write into a non-empty directory"),
    ),
    "train": _schema(
        Field("manifest", _conv_str, _REQUIRED, "training dataset manifest", path=True),
        Field("out", _conv_str, _REQUIRED, "run output directory", path=True),
        Field("resume", _conv_str, None, "checkpoint to resume from", path=True),
        Field("model.variant", _conv_str, "T", "preset: T, S, B or L"),
        Field("model.scale", _conv_int, "4", "upscaling factor (2 or 4)"),
        Field("model.width", _conv_int, None, "channel width override"),
        Field("model.n_blocks", _conv_int, None, "trunk depth override"),
        Field("model.scam_count", _conv_int, None, "cross-view fusion count override"),
        Field("model.drop_prob", _conv_float, None, "stochastic-depth probability override"),
        Field("model.dtype", _conv_str, None, "float32 or float64"),
        Field("train.iters", _conv_int, "100", "optimizer steps"),
        Field("train.batch", _conv_int, "32", "patches per step"),
        Field("train.lr_init", _conv_float, "3e-3", "initial learning rate"),
        Field("train.lr_final", _conv_float, "1e-7", "final learning rate"),
        Field("train.beta1", _conv_float, "0.9", "first moment decay"),
        Field("train.beta2", _conv_float, "0.9", "second moment decay"),
        Field("train.weight_decay", _conv_float, "0.0", "decoupled weight decay"),
        Field("train.eps", _conv_float, "1e-8", "optimizer epsilon"),
        Field("train.seed", _conv_int, "0", "run seed (init, order, aug, drops)"),
        Field("train.patch", _conv_size, "30x90", "LR patch size HxW"),
        Field("train.stride", _conv_int, "20", "patch extraction stride"),
        Field("train.hflip", _conv_bool, "true", "horizontal flip + view swap"),
        Field("train.vflip", _conv_bool, "true", "vertical flip"),
        Field("train.channel_shuffle", _conv_bool, "true", "RGB permutation"),
        Field("train.checkpoint_every", _conv_int, "500", "checkpoint cadence"),
        Field("train.log_every", _conv_int, "50", "log cadence"),
    ),
    "infer": _schema(
        Field("checkpoint", _conv_str, _REQUIRED, "model checkpoint", path=True),
        Field("left", _conv_str, _REQUIRED, "low-resolution left PNG", path=True),
        Field("right", _conv_str, _REQUIRED, "low-resolution right PNG", path=True),
        Field("out", _conv_str, _REQUIRED, "output directory", path=True),
        Field("scale", _conv_int, None, "expected factor; must match checkpoint"),
        Field("tlsc_window", _conv_size, None, "local-statistics window HxW"),
        Field("tlsc_auto", _conv_bool, "false",
              "window = 1.5x the recorded training patch"),
        Field("self_ensemble", _conv_bool, "false",
              "average all 24 flip/permutation transforms"),
        Field("average_with", _conv_paths, None,
              "comma-separated checkpoints to average outputs with", path=True),
    ),
    "eval": _schema(
        Field("checkpoint", _conv_str, _REQUIRED, "model checkpoint", path=True),
        Field("manifest", _conv_str, _REQUIRED, "evaluation manifest", path=True),
        Field("out", _conv_str, _REQUIRED, "report output directory", path=True),
        Field("label", _conv_str, "eval", "report file stem"),
        Field("pair_mode", _conv_str, "score_mean",
              "pair protocol: score_mean or image_mean"),
        Field("tlsc_window", _conv_size, None, "local-statistics window HxW"),
        Field("tlsc_auto", _conv_bool, "false",
              "window = 1.5x the recorded training patch"),
        Field("self_ensemble", _conv_bool, "false",
              "average all 24 flip/permutation transforms"),
    ),
    "gradcheck": _schema(
        Field("precision", _conv_int, "32", "floating point width: 32 or 64"),
        Field("only", _conv_str, None, "run a single named check"),
    ),
    "bench": _schema(
        Field("repeats", _conv_int, "5", "timed repetitions per kernel"),
        Field("out", _conv_str, None, "directory for the written table", path=True),
    ),
}

_STORE_TRUE = {"force", "tlsc_auto", "self_ensemble"}


def _parse_kv_line(line, where):
    key, sep, value = line.partition("=")
    if not sep or not key.strip() or not value.strip():
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    return key.strip(), value.strip()


def _load_config_file(path, schema):
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    try:
        with open(path) as f:
            raw = f.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for no, line in enumerate(raw, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, value = _parse_kv_line(line, f"{path}:{no}")
        if key == "subcommand":            # echoed configs carry this line
            continue
        if key not in schema:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        if schema[key].path:
            value = _resolve_paths(value, base)
        out[key] = value
    return out


def _resolve_paths(value, base):
    resolved = []
    for part in value.split(","):
        part = part.strip()
        if part and not os.path.isabs(part):
            part = os.path.normpath(os.path.join(base, part))
        resolved.append(part)
    return ",".join(resolved)


def _effective_config(sub, args):
    """Merge defaults, config file, --set overrides and typed flags."""
    schema = SCHEMAS[sub]
    eff = {k: f.default for k, f in schema.items()
           if f.default not in (None, _REQUIRED)}
    config_file = getattr(args, "config", None)
    if config_file is not None:
        eff.update(_load_config_file(config_file, schema))
    for item in getattr(args, "set", None) or []:
        key, value = _parse_kv_line(item, "--set")
        if key not in schema:
            raise ConfigError(f"--set: unknown key {key!r}")
        eff[key] = value
    for key, f in schema.items():
        dest = key.replace(".", "_")
        if hasattr(args, dest):
            eff[key] = getattr(args, dest)
    missing = [k for k, f in schema.items()
               if f.default is _REQUIRED and k not in eff]
    if missing:
        raise ConfigError(f"{sub}: missing required settings: "
                          f"{', '.join(missing)}")
    for key, f in schema.items():
        # absolute paths in the echo keep it re-feedable from anywhere
        if f.path and key in eff:
            eff[key] = _resolve_paths(eff[key], os.getcwd())
    ordered = {k: eff[k] for k in schema if k in eff}
    return RunConfig(sub, config_file, ordered)


def _typed(rc):
    schema = SCHEMAS[rc.subcommand]
    vals = {}
    for key, raw in rc.effective.items():
        try:
            vals[key] = schema[key].conv(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from e
    return vals


def _echo(rc, out_dir, log):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(rc.text())
    log(rc.text().rstrip("\n"))


def _pool_from(vals, train_patch):
    from .tlsc import GLOBAL_POOL, PoolingPolicy, tlsc_window_from_patch
    window = vals.get("tlsc_window")
    if vals.get("tlsc_auto") and window is not None:
        raise ConfigError("choose one of tlsc_window and tlsc_auto")
    if vals.get("tlsc_auto"):
        if train_patch is None:
            raise ConfigError("tlsc_auto needs a checkpoint that records its "
                              "training patch size")
        window = tlsc_window_from_patch(train_patch)
    if window is None:
        return GLOBAL_POOL
    return PoolingPolicy("local", window)


def cmd_synth(rc, log=print):
    from .data import synth_stereo
    vals = _typed(rc)
    out = vals["out"]
    if os.path.isdir(out) and os.listdir(out) and not vals["force"]:
        raise ConfigError(f"output directory {out} is not empty "
                          f"(use --force to write anyway)")
    _echo(rc, out, log)
    manifest = synth_stereo(out, vals["seed"], vals["count"], vals["size"],
                            vals["max_disparity"], vals["scale"])
    log(f"wrote {vals['count']} stereo pairs, manifest: {manifest}")
    return EXIT_OK


def _model_config(vals):
    from .model import ModelConfig
    overrides = {}
    for short, key in (("width", "model.width"),
                       ("n_blocks", "model.n_blocks"),
                       ("scam_count", "model.scam_count"),
                       ("drop_prob", "model.drop_prob"),
                       ("dtype", "model.dtype")):
        if key in vals:
            overrides[short] = vals[key]
    return ModelConfig.from_variant(vals["model.variant"],
                                    vals["model.scale"], **overrides)


def cmd_train(rc, log=print):
    from .model import build_model, count_params
    from .train import STREAM_INIT, TrainConfig, train
    vals = _typed(rc)
    _echo(rc, vals["out"], log)
    model_cfg = _model_config(vals)
    train_cfg = TrainConfig(
        iters=vals["train.iters"], batch=vals["train.batch"],
        lr_init=vals["train.lr_init"], lr_final=vals["train.lr_final"],
        beta1=vals["train.beta1"], beta2=vals["train.beta2"],
        weight_decay=vals["train.weight_decay"], eps=vals["train.eps"],
        seed=vals["train.seed"], patch=vals["train.patch"],
        stride=vals["train.stride"], hflip=vals["train.hflip"],
        vflip=vals["train.vflip"],
        channel_shuffle=vals["train.channel_shuffle"],
        checkpoint_every=vals["train.checkpoint_every"],
        log_every=vals["train.log_every"])
    n = count_params(build_model(model_cfg, (train_cfg.seed, STREAM_INIT)))
    log(f"model: variant {vals['model.variant']} x{model_cfg.scale} "
        f"({model_cfg.width}c/{model_cfg.n_blocks}b/"
        f"{model_cfg.scam_count}f), parameters: {n:,} ({n / 1e6:.2f}M)")
    final = train(train_cfg, model_cfg, vals["manifest"], vals["out"],
                  resume=vals.get("resume"), log=log)
    log(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_infer(rc, log=print):
    from . import autodiff as ad
    from .data import load_png, save_png
    from .metrics import average_outputs, self_ensemble_infer
    from .model import model_forward
    from .train import load_checkpoint
    vals = _typed(rc)
    _echo(rc, vals["out"], log)
    store, _, _ = load_checkpoint(vals["checkpoint"])
    if "scale" in vals and vals["scale"] != store.config.scale:
        raise ConfigError(f"requested scale {vals['scale']} but checkpoint "
                          f"was trained at x{store.config.scale}")
    pool = _pool_from(vals, store.config.train_patch)
    dtype = np.dtype(store.config.dtype)
    lr_l = load_png(vals["left"], dtype)
    lr_r = load_png(vals["right"], dtype)

    if vals["self_ensemble"] and "average_with" in vals:
        raise ConfigError("self_ensemble and average_with are mutually "
                          "exclusive; pick one combination strategy")
    if vals["self_ensemble"]:
        sl, sr, members = self_ensemble_infer(store, lr_l, lr_r, pool)
        log(f"self-ensemble over {len(members)} transforms")
    elif "average_with" in vals:
        stores = [store]
        for path in vals["average_with"]:
            other, _, _ = load_checkpoint(path)
            stores.append(other)
        sl, sr = average_outputs(stores, lr_l, lr_r, pool)
        log(f"averaged {len(stores)} checkpoints")
    else:
        with ad.no_grad():
            tl, tr = model_forward(store, ad.Tensor4(lr_l), ad.Tensor4(lr_r),
                                   pool=pool)
        sl, sr = tl.data, tr.data
    out_l = os.path.join(vals["out"], "sr_left.png")
    out_r = os.path.join(vals["out"], "sr_right.png")
    save_png(out_l, np.clip(sl, 0.0, 1.0))
    save_png(out_r, np.clip(sr, 0.0, 1.0))
    log(f"wrote {out_l} and {out_r} "
        f"(x{store.config.scale}, pooling {pool.mode})")
    return EXIT_OK


def cmd_eval(rc, log=print):
    from .metrics import evaluate, self_ensemble_infer
    from .train import load_checkpoint
    vals = _typed(rc)
    _echo(rc, vals["out"], log)
    store, _, _ = load_checkpoint(vals["checkpoint"])
    pool = _pool_from(vals, store.config.train_patch)
    infer_fn = None
    if vals["self_ensemble"]:
        infer_fn = lambda ll, rr: self_ensemble_infer(store, ll, rr, pool)[:2]
    report = evaluate(store, vals["manifest"], pool=pool,
                      pair_mode=vals["pair_mode"], infer_fn=infer_fn)
    base = os.path.join(vals["out"], vals["label"])
    report.save(base)
    log(report.to_text())
    log(f"report written to {base}.txt and {base}.json")
    return EXIT_OK


def cmd_gradcheck(rc, log=print):
    from .gradcheck import CHECKS, run_check, run_suite
    vals = _typed(rc)
    precision = vals["precision"]
    if precision not in (32, 64):
        raise ConfigError(f"precision must be 32 or 64, got {precision}")
    if "only" in vals:
        if vals["only"] not in CHECKS:
            raise ConfigError(f"unknown check {vals['only']!r}; options: "
                              f"{', '.join(CHECKS)}")
        results = [run_check(vals["only"], precision)]
    else:
        results = run_suite(precision)
    for r in results:
        log(r.line())
    failed = [r for r in results if not r.passed]
    log(f"{len(results) - len(failed)}/{len(results)} checks passed "
        f"({precision}-bit)")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_bench(rc, log=print):
    from .bench import run_bench
    vals = _typed(rc)
    table = run_bench(repeats=vals["repeats"], log=log)
    if "out" in vals:
        _echo(rc, vals["out"], lambda *_: None)
        path = os.path.join(vals["out"], "bench.txt")
        with open(path, "w") as f:
            f.write(table + "\n")
        log(f"table written to {path}")
    return EXIT_OK


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}

_DESCRIPTIONS = {
    "synth": "generate a procedural stereo dataset with a manifest",
    "train": "train a model on a manifest and write checkpoints",
    "infer": "super-resolve one stereo pair from a checkpoint",
    "eval": "score a checkpoint over a manifest and write a report",
    "gradcheck": "verify analytic gradients against finite differences",
    "bench": "time the compiled and pure-numpy kernel lanes",
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="nafssr",
        description="Stereo image super-resolution toolkit.")
    parser.add_argument("--backend", choices=["auto", "numpy", "numba"],
                        help="kernel lane (default: NAFSSR_BACKEND or auto)")
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for sub, schema in SCHEMAS.items():
        p = subs.add_parser(sub, help=_DESCRIPTIONS[sub],
                            description=_DESCRIPTIONS[sub])
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        for key, f in schema.items():
            dest = key.replace(".", "_")
            if key in _STORE_TRUE:
                p.add_argument(f.flag_name, dest=dest, action="store_const",
                               const="true", default=argparse.SUPPRESS,
                               help=f.help)
            else:
                p.add_argument(f.flag_name, dest=dest, metavar=key.upper(),
                               default=argparse.SUPPRESS, help=f.help)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if getattr(args, "backend", None):
            set_backend(args.backend)
        rc = _effective_config(args.subcommand, args)
        return _DISPATCH[args.subcommand](rc)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
