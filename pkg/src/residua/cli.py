"""Command-line entry point: ``residua <command> [options]``.

Settings come from an optional INI file (``--config``) and are overridden by
flags. Every command that writes into ``--out`` also leaves the fully
resolved settings there as ``config.ini``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data, evaluate as ev, model, synth
from .errors import ArgumentError, ResiduaError
from .tensor import Rng
from .train import TrainConfig, train

CHECKPOINT_NAME = "model.aeckpt"

# (section, key) -> (type, default); the resolved config always lists all of them
SETTINGS = {
    ("run", "seed"): (int, 0),
    ("run", "out"): (str, ""),
    ("run", "manifest"): (str, ""),
    ("run", "checkpoint"): (str, ""),
    ("train", "epochs"): (int, 50),
    ("train", "batch_size"): (int, 8),
    ("train", "lr"): (float, 1e-3),
    ("train", "beta1"): (float, 0.9),
    ("train", "beta2"): (float, 0.999),
    ("train", "eps"): (float, 1e-8),
    ("threshold", "policy"): (str, "sweep"),
    ("threshold", "threshold"): (str, ""),
    ("threshold", "grid"): (str, ""),
    ("synth", "height"): (int, 64),
    ("synth", "width"): (int, 64),
    ("synth", "n_train"): (int, 200),
    ("synth", "n_val"): (int, 20),
    ("synth", "n_val_anomalous"): (int, 10),
    ("synth", "n_test_normal"): (int, 50),
    ("synth", "n_test_anomalous"): (int, 50),
    ("synth", "noise_sigma"): (float, 0.03),
    ("synth", "defect_delta"): (float, 0.35),
    ("prepare", "root"): (str, ""),
    ("prepare", "layout"): (str, "flat"),
    ("prepare", "split_fracs"): (str, "0.8,0.1,0.1"),
}


class UsageError(Exception):
    pass


def _resolve(args) -> dict:
    """Merge defaults, the config file and explicit flags (in that order)."""
    conf = {key: default for key, (_, default) in SETTINGS.items()}
    if args.config:
        parser = configparser.ConfigParser()
        try:
            with open(args.config, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {args.config}: {exc}") from None
        for section in parser.sections():
            if section == "command":  # written by the config echo, informational
                continue
            for key, raw in parser.items(section):
                if (section, key) not in SETTINGS:
                    raise UsageError(f"{args.config}: unknown setting [{section}] {key}")
                conf[(section, key)] = raw
    for (section, key) in SETTINGS:
        value = getattr(args, key, None)
        if value is not None:
            conf[(section, key)] = value
    out = {}
    for (section, key), raw in conf.items():
        kind = SETTINGS[(section, key)][0]
        try:
            out[key] = kind(raw)
        except (TypeError, ValueError):
            raise UsageError(f"setting {key} expects {kind.__name__}, got {raw!r}") from None
    return out


def _echo_config(settings: dict, out_dir: Path, command: str) -> None:
    parser = configparser.ConfigParser()
    parser["command"] = {"name": command}
    for (section, key) in SETTINGS:
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = repr(settings[key]) if isinstance(settings[key], float) else str(settings[key])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.ini", "w", encoding="utf-8") as fh:
        parser.write(fh)


def _require(settings: dict, *keys) -> None:
    for key in keys:
        if not settings[key]:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def prediction_name(rel: str) -> str:
    """Flat file name for the prediction of a manifest-relative image path."""
    return str(Path(rel).with_suffix(".png")).replace("\\", "/").replace("/", "__")


def _load_model(settings):
    arch = model.build_default_architecture()
    params = checkpoint.load_checkpoint(settings["checkpoint"], arch)
    return arch, params


def _policy(settings) -> ev.ThresholdPolicy:
    if settings["threshold"]:
        try:
            return ev.ThresholdPolicy("fixed", value=float(settings["threshold"]))
        except ValueError:
            raise UsageError(f"--threshold must be a number, got {settings['threshold']!r}") from None
    policy = ev.ThresholdPolicy.parse(settings["policy"])
    if policy.kind == "sweep" and settings["grid"]:
        policy = ev.ThresholdPolicy("sweep", grid=_parse_grid(settings["grid"]))
    return policy


def _parse_grid(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--grid must be comma-separated numbers, got {text!r}") from None


def _val_residuals(arch, params, manifest, label=None):
    recs = manifest.select(split="val", label=label)
    if not recs:
        raise ArgumentError("the manifest has no matching validation records for threshold selection")
    images = [manifest.load_image(r) for r in recs]
    res = ev.reconstruct_residuals(arch, params, images, [r.path for r in recs])
    truths = [manifest.load_truth(r, img.shape) for r, img in zip(recs, images)]
    return res, truths


def _select(policy, arch, params, manifest) -> float:
    if policy.kind == "fixed":
        return ev.select_threshold(policy, [])
    if manifest is None:
        raise UsageError(f"policy {policy.kind} needs --manifest with validation records")
    if policy.kind == "stat":
        res, _ = _val_residuals(arch, params, manifest, label="normal")
        return ev.select_threshold(policy, res)
    res, truths = _val_residuals(arch, params, manifest)
    return ev.select_threshold(policy, res, truths)


# -- commands ---------------------------------------------------------------

def cmd_gen_synth(args, settings) -> int:
    _require(settings, "out")
    cfg = synth.SynthConfig(
        height=settings["height"], width=settings["width"],
        noise_sigma=settings["noise_sigma"], defect_delta=settings["defect_delta"],
        n_train=settings["n_train"], n_val=settings["n_val"],
        n_val_anomalous=settings["n_val_anomalous"], n_test_normal=settings["n_test_normal"],
        n_test_anomalous=settings["n_test_anomalous"], seed=settings["seed"],
    )
    out = Path(settings["out"])
    manifest = synth.gen_synthetic(cfg, out)
    _echo_config(settings, out, "gen-synth")
    print(f"manifest\t{out / 'manifest.tsv'}")
    _print_counts(manifest)
    return 0


def _print_counts(manifest) -> None:
    for key, n in sorted(manifest.counts().items()):
        print(f"{key}\t{n}")


def cmd_prepare(args, settings) -> int:
    _require(settings, "root", "out")
    try:
        fracs = tuple(float(v) for v in settings["split_fracs"].split(","))
    except ValueError:
        raise UsageError(f"--split-fracs must be three comma-separated numbers, got {settings['split_fracs']!r}") from None
    out = Path(settings["out"])
    manifest = data.build_manifest(settings["root"], settings["layout"], fracs, settings["seed"],
                                   patch_dir=out)
    # paths in the written manifest are relative to its own directory
    rebased = [data.ImageRecord(
        data.relative_to_manifest(data.DatasetManifest([], out), manifest.resolve(r.path)),
        r.split, r.label,
        data.relative_to_manifest(data.DatasetManifest([], out), manifest.resolve(r.mask_path))
        if r.mask_path else None) for r in manifest.records]
    manifest = data.DatasetManifest(rebased, out)
    path = data.write_manifest(manifest, out / "manifest.tsv")
    _echo_config(settings, out, "prepare")
    print(f"manifest\t{path}")
    _print_counts(manifest)
    return 0


def cmd_train(args, settings) -> int:
    _require(settings, "manifest", "out")
    cfg = TrainConfig(epochs=settings["epochs"], batch_size=settings["batch_size"], lr=settings["lr"],
                      beta1=settings["beta1"], beta2=settings["beta2"], eps=settings["eps"],
                      seed=settings["seed"])
    manifest = data.read_manifest(settings["manifest"])
    out = Path(settings["out"])
    _echo_config(settings, out, "train")
    arch = model.build_default_architecture()
    if settings["checkpoint"]:
        params = checkpoint.load_checkpoint(settings["checkpoint"], arch)
    else:
        params = model.init_params(arch, Rng(settings["seed"]))
    params, _, train_log = train(arch, params, data.ManifestSource(manifest, "train"), cfg)
    checkpoint.save_checkpoint(params, out / CHECKPOINT_NAME)
    (out / "train.log").write_text(train_log.to_text(), encoding="utf-8")
    print(f"checkpoint\t{out / CHECKPOINT_NAME}")
    print(f"final_loss\t{train_log.losses[-1]:.6g}")
    return 0


def _infer_targets(args, settings):
    """(name, path) pairs for positional images or a manifest split."""
    if args.images:
        targets = []
        for arg in args.images:
            p = Path(arg)
            if p.is_dir():
                targets += [(prediction_name(f.relative_to(p).as_posix()), f)
                            for f in sorted(p.rglob("*")) if f.suffix.lower() in data.IMAGE_SUFFIXES]
            else:
                targets.append((prediction_name(p.name), p))
        return targets
    if not settings["manifest"]:
        raise UsageError("give image paths or --manifest")
    manifest = data.read_manifest(settings["manifest"])
    return [(prediction_name(r.path), manifest.resolve(r.path)) for r in manifest.select(split=args.split)]


def cmd_infer(args, settings) -> int:
    _require(settings, "checkpoint", "out")
    policy = _policy(settings)
    targets = _infer_targets(args, settings)
    names = [n for n, _ in targets]
    if len(set(names)) != len(names):
        raise UsageError("input images map to duplicate prediction names")
    arch, params = _load_model(settings)
    manifest = data.read_manifest(settings["manifest"]) if settings["manifest"] else None
    t = _select(policy, arch, params, manifest)
    out = Path(settings["out"])
    _echo_config(settings, out, "infer")
    (out / "threshold").write_text(f"{t!r}\n", encoding="utf-8")
    rows = ["# name\tmax_abs_r\tmean_abs_r\tpositive_frac"]
    failures = 0
    for name, path in targets:
        try:
            img = data.load_grayscale(path)
            (r,) = ev.reconstruct_residuals(arch, params, [img], [str(path)])
        except (OSError, ResiduaError) as exc:
            failures += 1
            print(f"error\t{path}\t{exc}", file=sys.stderr)
            rows.append(f"{name}\terror\terror\terror")
            continue
        mask = ev.apply_threshold(r, t)
        data.save_mask(out / "masks" / name, mask)
        mag = r.magnitude()
        rows.append(f"{name}\t{mag.max():.6g}\t{mag.mean():.6g}\t{mask.mean():.6g}")
        if args.overlay:
            ev.emit_overlay(img, r, mask, path=out / "overlays" / name)
    (out / "residuals.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"threshold\t{t:.6g}")
    print(f"images\t{len(targets) - failures}")
    if failures:
        print(f"failed\t{failures}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args, settings) -> int:
    _require(settings, "checkpoint", "manifest", "out")
    arch, params = _load_model(settings)
    manifest = data.read_manifest(settings["manifest"])
    recs = manifest.select(split=args.split)
    if not recs:
        raise ArgumentError(f"no {args.split} records in the manifest")
    images = [manifest.load_image(r) for r in recs]
    res = ev.reconstruct_residuals(arch, params, images)
    truths = [manifest.load_truth(r, img.shape) for r, img in zip(recs, images)]
    grid = _parse_grid(settings["grid"]) if settings["grid"] else ev.default_grid(res, args.grid_size)
    policy = ev.ThresholdPolicy("sweep", grid=grid)
    table = ev.sweep_table(res, truths, policy.grid)
    best = ev.select_threshold(policy, res, truths)
    out = Path(settings["out"])
    _echo_config(settings, out, "sweep")
    lines = ["# t\tprecision\trecall\tf1\ttp\tfp\tfn\ttn"]
    for t, rep in table:
        lines.append(f"{t!r}\t{rep.precision:.6f}\t{rep.recall:.6f}\t{rep.f1:.6f}\t"
                     f"{rep.tp}\t{rep.fp}\t{rep.fn}\t{rep.tn}")
    text = "\n".join(lines) + "\n"
    (out / "sweep.tsv").write_text(text, encoding="utf-8")
    (out / "threshold").write_text(f"{best!r}\n", encoding="utf-8")
    sys.stdout.write(text)
    print(f"best_threshold\t{best!r}")
    return 0


def cmd_eval(args, settings) -> int:
    _require(settings, "manifest", "out")
    if not args.pred:
        raise UsageError("--pred is required")
    manifest = data.read_manifest(settings["manifest"])
    recs = manifest.select(split=args.split)
    if not recs:
        raise ArgumentError(f"no {args.split} records in the manifest")
    pred_dir = Path(args.pred)
    preds, truths = [], []
    for rec in recs:
        p = pred_dir / prediction_name(rec.path)
        if not p.is_file():
            print(f"missing prediction for {rec.path} (expected {p})", file=sys.stderr)
            return 1
        pred = data.load_mask(p)
        preds.append(pred)
        truths.append(manifest.load_truth(rec, pred.shape))
    report = ev.evaluate(preds, truths, "aggregate")
    per = ev.evaluate(preds, truths, "per_image")
    out = Path(settings["out"])
    _echo_config(settings, out, "eval")
    (out / "eval_report.txt").write_text(report.to_text(), encoding="utf-8")
    rows = ["# path\ttp\tfp\tfn\ttn\tprecision\trecall\tf1"]
    for rec, rep in zip(recs, per):
        rows.append(f"{rec.path}\t{rep.tp}\t{rep.fp}\t{rep.fn}\t{rep.tn}\t"
                    f"{rep.precision:.6f}\t{rep.recall:.6f}\t{rep.f1:.6f}")
    (out / "eval_per_image.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    if args.granularity == "aggregate":
        print(f"F1\t{report.f1:.6f}")
    else:  # unweighted mean of per-image F1
        print(f"F1\t{np.mean([r.f1 for r in per]):.6f}")
    print(f"precision\t{report.precision:.6f}")
    print(f"recall\t{report.recall:.6f}")
    return 0


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    g = p.add_argument_group("common")
    g.add_argument("--config", help="INI settings file; flags override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--manifest", help="dataset manifest (manifest.tsv)")
    g.add_argument("--checkpoint", help="model checkpoint (.aeckpt)")
    g.add_argument("--threshold", help="fixed threshold on |R|; overrides --policy")
    g.add_argument("--policy", help="threshold policy: fixed:T, stat:K, sweep or sweep:N")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="residua", description="Autoencoder residual-map defect segmentation.")
    parser.add_argument("--version", action="version", version=f"residua {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-synth", help="write a seeded synthetic dataset")
    _common(p)
    for flag, kind in (("height", int), ("width", int), ("n-train", int), ("n-val", int),
                       ("n-val-anomalous", int), ("n-test-normal", int), ("n-test-anomalous", int),
                       ("noise-sigma", float), ("defect-delta", float)):
        p.add_argument(f"--{flag}", type=kind)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("prepare", help="scan a dataset directory into a manifest")
    _common(p)
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--layout", choices=("flat", "dagm_like", "rsdds_like"))
    p.add_argument("--split-fracs", dest="split_fracs", help="train,val,test-normal fractions")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on the normal training split")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write thresholded masks and residual statistics")
    _common(p)
    p.add_argument("images", nargs="*", help="image files or directories (default: manifest split)")
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--grid", help="comma-separated sweep grid")
    p.add_argument("--overlay", action="store_true", help="also write overlay panels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="F1 over a threshold grid on labeled records")
    _common(p)
    p.add_argument("--split", default="val", choices=data.SPLITS)
    p.add_argument("--grid", help="comma-separated thresholds")
    p.add_argument("--grid-size", dest="grid_size", type=int, default=ev.DEFAULT_GRID_SIZE)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="pixel-level precision, recall and F1 of predicted masks")
    _common(p)
    p.add_argument("--pred", help="directory of predicted masks")
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--granularity", default="aggregate", choices=("aggregate", "per_image"))
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"residua: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        settings = _resolve(args)
        return args.func(args, settings)
    except (UsageError, ArgumentError) as exc:
        print(f"residua: error: {exc}", file=sys.stderr)
        return 2
    except (ResiduaError, OSError) as exc:
        print(f"residua: {exc}", file=sys.stderr)
        return 1
