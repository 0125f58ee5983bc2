"""Command-line front end: ``ovalseg {gen,weights,train,eval,sweep}``.

Every command writes its fully resolved configuration next to its outputs
as ``run_config.txt``.  Failures print one line ``error[<category>]: ...``
to stderr and exit with 2 (usage/config), 3 (data/format) or 4 (numeric).
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import evaluation, network, synthdata, training
from .errors import ConfigError, FormatError, InvalidInputError, OvalsegError
from .imaging import read_pgm, write_pfm, write_pgm
from .weakmodels import weight_map

log = logging.getLogger("ovalseg")

TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(training.TrainConfig)}
NET_FIELDS = {f.name: f for f in dataclasses.fields(network.NetConfig)}
SWEEP_DEFAULTS = {
    "manifest": "",
    "out": "",
    "subsets": 5,
    "k": 8,
    "folds": 5,
    "grid": "1,1.5,2",
    "models": "moi1,moi2",
    "seeds": "0",
    "data_seed": 0,
    "workers": 1,
}

DEFAULTS_EPILOG = (
    "training defaults: batch_size=4 epochs=280 max_lr=0.001 weight_decay=0.0005 "
    "ema_beta=0.995 alpha=0.5 dropout_p=0.4 moi_epsilon=1 dice_epsilon=1 power_n=1 moi=none; "
    "network defaults: init_channels=8 depth=3 pyramid_scales=1,2,3,6. "
    "Exit codes: 0 ok, 2 usage/config, 3 data/format, 4 numeric."
)


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return parse_config_text(f.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def _convert(value, default, key):
    if isinstance(value, type(default)) and not isinstance(default, tuple):
        return value
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def build_configs(values, extra_defaults=None):
    """Split a flat mapping into (NetConfig, TrainConfig, extras); unknown keys are errors."""
    extra_defaults = extra_defaults or {}
    train_kw, net_kw, extra = {}, {}, dict(extra_defaults)
    for key, val in values.items():
        if key in TRAIN_FIELDS:
            train_kw[key] = _convert(val, TRAIN_FIELDS[key].default, key)
        elif key in NET_FIELDS:
            net_kw[key] = _convert(val, NET_FIELDS[key].default, key)
        elif key in extra_defaults:
            extra[key] = _convert(val, extra_defaults[key], key)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if "dropout_p" in train_kw:
        net_kw["dropout_p"] = train_kw["dropout_p"]
    return network.NetConfig(**net_kw), training.TrainConfig(**train_kw), extra


def serialize_config(net_cfg, train_cfg, extra):
    lines = [f"{k} = {v}" for k, v in sorted(train_cfg.as_dict().items())]
    lines += [f"{line.split('=')[0]} = {line.split('=', 1)[1]}" for line in net_cfg.to_text().splitlines()
              if not line.startswith("dropout_p=")]
    lines += [f"{k} = {v}" for k, v in sorted(extra.items())]
    return "\n".join(lines) + "\n"


def _write_text(path, text):
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _require_manifest(path):
    if not path:
        raise ConfigError("a manifest is required")
    try:
        return synthdata.read_manifest(path)
    except OSError as exc:
        raise InvalidInputError(f"cannot read manifest {path}: {exc.strerror}") from None


def _load(manifest, require_oval_weights=False):
    try:
        samples = synthdata.load_samples(manifest)
    except OSError as exc:
        raise InvalidInputError(f"missing file {exc.filename}") from None
    if require_oval_weights:
        for rec in manifest.records:
            if rec.flag == synthdata.OVAL and rec.weightmap_path == "-":
                raise InvalidInputError(f"record {rec.index}: oval mask has no weight map")
    return samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    if args.n < 1 or args.size < 8:
        raise ConfigError("need --n >= 1 and --size >= 8")
    if args.subsets * args.k > args.n:
        raise ConfigError(f"{args.subsets} disjoint subsets of k={args.k} need {args.subsets * args.k} samples, "
                          f"--n is {args.n}")
    out = args.out
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    records = []
    log_lines = ["index,seed,lesion_fraction,n_lesions"]
    for i in range(args.n):
        seed = synthdata.derive_seed(args.seed, "phantom", i)
        ph = synthdata.generate_phantom(seed, args.size)
        img_rel = os.path.join("images", f"img_{i:03d}.pfm")
        mask_rel = os.path.join("masks", f"mask_{i:03d}.pgm")
        write_pfm(os.path.join(out, img_rel), ph.image)
        write_pgm(os.path.join(out, mask_rel), ph.truth)
        records.append(synthdata.ManifestRecord(i, img_rel, mask_rel))
        log_lines.append(f"{i},{seed},{ph.truth.mean():.6f},{len(ph.lesions)}")
    base = synthdata.DatasetManifest(records, 0, args.seed, 0, os.path.abspath(out))
    synthdata.write_manifest(os.path.join(out, "manifest.tsv"), base)
    for s in range(args.subsets):
        sub_dir = os.path.join(out, f"subset_{s}")
        sub = synthdata.corrupt_dataset(base, args.k, args.seed, sub_dir, s, args.subsets)
        synthdata.write_manifest(os.path.join(sub_dir, "manifest.tsv"), sub)
        log_lines.append(f"# subset {s}: oval indices {sub.flagged()}")
    _write_text(os.path.join(out, "gen_log.txt"), "\n".join(log_lines) + "\n")
    _write_text(os.path.join(out, "run_config.txt"),
                f"n = {args.n}\nsize = {args.size}\nk = {args.k}\nsubsets = {args.subsets}\nseed = {args.seed}\n")
    print(f"wrote {args.n} samples and {args.subsets} corrupted manifests to {out}")
    return 0


def cmd_weights(args):
    if args.power <= 0 or args.epsilon <= 0:
        raise ConfigError("--power and --epsilon must be positive")
    man = _require_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    rel_dir = f"weights_{args.model}_n{args.power:g}"
    os.makedirs(os.path.join(root, rel_dir), exist_ok=True)
    records = []
    for rec in man.records:
        mask_path = man.resolve(rec.mask_path)
        if not os.path.exists(mask_path):
            raise InvalidInputError(f"record {rec.index}: mask file {rec.mask_path} not found")
        mask = read_pgm(mask_path)
        if rec.flag == synthdata.OVAL:
            wm = weight_map(mask, args.model, args.epsilon, args.power)
        else:
            wm = np.ones(mask.shape, dtype=np.float32)
        rel = os.path.join(rel_dir, f"w_{rec.index:03d}.pfm")
        write_pfm(os.path.join(root, rel), wm)
        records.append(dataclasses.replace(rec, weightmap_path=rel))
    target = args.out or args.manifest
    out_man = dataclasses.replace(man, records=records)
    if os.path.abspath(os.path.dirname(os.path.abspath(target))) != root:
        raise ConfigError("--out must stay in the manifest's directory so relative paths resolve")
    synthdata.write_manifest(target, out_man)
    print(f"wrote {len(records)} weight maps ({args.model}, n={args.power:g}, eps={args.epsilon:g}) to {rel_dir}")
    return 0


def _merged_values(args, names):
    values = read_config(getattr(args, "config", None))
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return values


def cmd_train(args):
    values = _merged_values(args, list(TRAIN_FIELDS) + list(NET_FIELDS) + ["manifest", "out"])
    net_cfg, train_cfg, extra = build_configs(values, {"manifest": "", "out": ""})
    if not extra["out"]:
        raise ConfigError("an output directory is required (--out or 'out' in the config)")
    man = _require_manifest(extra["manifest"])
    samples = _load(man, require_oval_weights=train_cfg.moi != "none")
    weights = [s.weights for s in samples] if train_cfg.moi != "none" else None
    out = extra["out"]
    os.makedirs(out, exist_ok=True)
    cfg_text = serialize_config(net_cfg, train_cfg, extra)
    _write_text(os.path.join(out, "run_config.txt"), cfg_text)
    ps, logs = training.train(samples, net_cfg, train_cfg, weights=weights)
    network.save_params(os.path.join(out, "checkpoint.bin"), ps, net_cfg)
    _write_text(os.path.join(out, "train_log.csv"), training.format_log(logs))
    print(f"trained {train_cfg.epochs} epochs; final loss {logs[-1].loss:.6f}; checkpoint {out}/checkpoint.bin")
    return 0


def cmd_eval(args):
    man = _require_manifest(args.manifest)
    if not os.path.exists(args.checkpoint):
        raise InvalidInputError(f"checkpoint {args.checkpoint} not found")
    report = evaluation.evaluate_checkpoint(args.checkpoint, man)
    text = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_text(os.path.join(args.out, "eval_report.json"), text + "\n")
        _write_text(os.path.join(args.out, "run_config.txt"),
                    f"checkpoint = {os.path.abspath(args.checkpoint)}\nmanifest = {os.path.abspath(args.manifest)}\n")
    print(text)
    return 0


def _floats(text):
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


def cmd_sweep(args):
    values = _merged_values(args, list(TRAIN_FIELDS) + list(NET_FIELDS) + list(SWEEP_DEFAULTS))
    net_cfg, train_cfg, extra = build_configs(values, SWEEP_DEFAULTS)
    if not extra["out"]:
        raise ConfigError("an output directory is required (--out or 'out' in the config)")
    models = tuple(m.strip() for m in extra["models"].split(",") if m.strip())
    for m in models:
        if m not in evaluation.MODELS:
            raise ConfigError(f"unknown model {m!r}")
    grid = _floats(extra["grid"])
    seeds = tuple(int(s) for s in _floats(extra["seeds"]))
    base = _require_manifest(extra["manifest"])
    out = extra["out"]
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "run_config.txt"), serialize_config(net_cfg, train_cfg, extra))

    def progress(path):
        log.info("finished %s", os.path.basename(path))

    report = evaluation.run_sweep(
        base, out, net_cfg, train_cfg, subsets=extra["subsets"], k=extra["k"], grid=grid, models=models,
        seeds=seeds, k_folds=extra["folds"], data_seed=extra["data_seed"], workers=max(1, extra["workers"]),
        progress=progress,
    )
    evaluation.write_report(report, out)
    print(report.to_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    """Show defaults, except for override flags whose help already states them."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _flag(text):
    return _convert(text, True, "flag")


def _add_training_flags(p):
    g = p.add_argument_group("training overrides (defaults listed below)")
    for name, f in TRAIN_FIELDS.items():
        typ = {bool: _flag, int: int, float: float}.get(type(f.default), str)
        g.add_argument(f"--{name}", type=typ, default=None, help=f"default {f.default}")
    for name in ("init_channels", "depth"):
        g.add_argument(f"--{name}", type=int, default=None, help=f"default {NET_FIELDS[name].default}")
    g.add_argument("--pyramid_scales", default=None, help="comma-separated; default 1,2,3,6")


def build_parser():
    parser = argparse.ArgumentParser(prog="ovalseg", description=__doc__.splitlines()[0],
                                     epilog=DEFAULTS_EPILOG, formatter_class=_Formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")

    p = sub.add_parser("gen", help="generate a synthetic dataset", epilog=DEFAULTS_EPILOG, formatter_class=_Formatter,
                       parents=[common])
    p.add_argument("--n", type=int, default=40, help="number of phantoms")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--k", type=int, default=8, help="oval-corrupted masks per subset")
    p.add_argument("--subsets", type=int, default=5, help="disjoint corrupted subsets")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("weights", help="write MoI weight maps for a manifest", epilog=DEFAULTS_EPILOG,
                       formatter_class=_Formatter, parents=[common])
    p.add_argument("--model", choices=("moi1", "moi2"), required=True, help="model of inaccuracy")
    p.add_argument("--power", type=float, default=1.0, help="power transform exponent n")
    p.add_argument("--epsilon", type=float, default=1.0, help="distance offset epsilon")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--out", default=None, help="output manifest (default: overwrite the input)")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train", help="train one model", epilog=DEFAULTS_EPILOG, formatter_class=_Formatter,
                       parents=[common])
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--manifest", default=None, help="training manifest")
    p.add_argument("--out", default=None, help="output directory")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest", epilog=DEFAULTS_EPILOG,
                       formatter_class=_Formatter, parents=[common])
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--manifest", required=True, help="manifest to score (accurate records only)")
    p.add_argument("--out", default=None, help="directory for eval_report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the corrupted-subset cross-validation sweep", epilog=DEFAULTS_EPILOG,
                       formatter_class=_Formatter, parents=[common])
    p.add_argument("--config", default=None, help="key = value configuration file")
    for name, default in SWEEP_DEFAULTS.items():
        typ = int if isinstance(default, int) else str
        p.add_argument(f"--{name}", type=typ, default=None, help=f"default {default!r}")
    _add_training_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OvalsegError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
