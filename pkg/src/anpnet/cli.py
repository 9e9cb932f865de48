"""Batch command-line front door.

Subcommands: ``train``, ``finetune``, ``predict``, ``evaluate``,
``validate-manifest``. Options come from a flat ``key = value`` config
file plus flags; flags win. Every command echoes its fully resolved
configuration (to stderr and, when an output directory is in play, to
``config.resolved`` inside it) so a run can be reproduced exactly.

Exit codes: 0 success, 1 usage or configuration problem, 2 data or
format problem, 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from . import evaluation, network, optim
from .errors import (AnpNetError, ConfigurationError, DataError, FormatError,
                     NumericError, ParameterError, ShapeError)
from .tensor import Rng

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SCRATCH_BASE_LR = 0.01
FINETUNE_BASE_LR = 0.001

# Config-file keys, their parsers, and defaults (None = unset).
_CONFIG_KEYS = {
    "manifest": str, "vocab": str, "weights": str, "out": str,
    "seed": int, "iterations": int, "batch_size": int, "base_lr": float,
    "momentum": float, "weight_decay": float, "lr_drop_every": int,
    "lr_factor": float, "snapshot_every": int, "width_divisor": int,
    "dropout_rate": float, "mean_subtract": lambda v: v.lower() in ("1", "true", "yes"),
    "k": int, "mode": str, "min_train": int,
}

_DEFAULTS = {
    "seed": 0, "batch_size": 256, "momentum": 0.9, "weight_decay": 0.0005,
    "lr_drop_every": 100_000, "lr_factor": 0.1, "iterations": 250_000,
    "snapshot_every": 10_000, "width_divisor": 1, "dropout_rate": 0.5,
    "mean_subtract": True, "k": 10, "mode": "annotation", "min_train": 100,
}


class UsageError(AnpNetError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key](value)
            except ValueError:
                raise UsageError(
                    f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return values


def resolve_config(args, defaults_override=None) -> dict:
    """File values, overlaid with CLI flags, overlaid on the defaults."""
    resolved = dict(_DEFAULTS)
    if defaults_override:
        resolved.update(defaults_override)
    if getattr(args, "config", None):
        resolved.update(parse_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def echo_config(cfg: dict, out_dir=None) -> None:
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg) if cfg[key] is not None]
    text = "\n".join(lines) + "\n"
    sys.stderr.write("# resolved configuration\n" + text)
    if out_dir:
        with open(os.path.join(out_dir, "config.resolved"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)


def _require(cfg: dict, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")


def _train_config(cfg: dict) -> optim.TrainConfig:
    return optim.TrainConfig(
        base_lr=cfg["base_lr"],
        batch_size=cfg["batch_size"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        lr_drop_every=cfg["lr_drop_every"],
        lr_factor=cfg["lr_factor"],
        max_iterations=cfg["iterations"],
        seed=cfg["seed"],
        snapshot_every=cfg["snapshot_every"],
    )


def _load_dataset(cfg):
    vocab = data_mod.load_vocabulary(cfg["vocab"])
    manifest = data_mod.load_manifest(cfg["manifest"])
    return vocab, manifest


def _run_training(cfg: dict, model, vocab, manifest) -> int:
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, out_dir)
    model.vocab_checksum = vocab.checksum
    result = optim.train(
        model, manifest, vocab, _train_config(cfg),
        snapshot_dir=out_dir, log_path=os.path.join(out_dir, "train.log"))
    final = os.path.join(out_dir, "weights_final.dsbw")
    network.save_weights(model, final)
    sys.stderr.write(f"final weights: {final}\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args, {"base_lr": SCRATCH_BASE_LR})
    _require(cfg, "manifest", "vocab", "out")
    if cfg.get("weights"):
        raise UsageError("train starts from scratch; use 'finetune' with --weights")
    vocab, manifest = _load_dataset(cfg)
    model = network.build(len(vocab), width_divisor=cfg["width_divisor"],
                          dropout_rate=cfg["dropout_rate"])
    network.init_scratch(model, Rng(cfg["seed"]))
    if cfg["mean_subtract"]:
        model.channel_means = data_mod.compute_channel_means(manifest)
    return _run_training(cfg, model, vocab, manifest)


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, {"base_lr": FINETUNE_BASE_LR})
    _require(cfg, "manifest", "vocab", "out", "weights")
    vocab, manifest = _load_dataset(cfg)
    pretrained = network.load_weights(cfg["weights"], dropout_rate=cfg["dropout_rate"])
    model = network.build(len(vocab), width_divisor=pretrained.width_divisor,
                          dropout_rate=cfg["dropout_rate"])
    network.init_finetune(model, cfg["weights"], Rng(cfg["seed"]))
    return _run_training(cfg, model, vocab, manifest)


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    _require(cfg, "weights", "vocab")
    if not args.images:
        raise UsageError("predict needs at least one image path")
    echo_config(cfg)
    vocab = data_mod.load_vocabulary(cfg["vocab"])
    model = network.load_weights(cfg["weights"])
    if model.vocab_checksum and model.vocab_checksum != vocab.checksum:
        logging.getLogger(__name__).warning(
            "vocabulary checksum does not match the one stored in the model")
    failures = 0
    for path in args.images:
        try:
            image = data_mod.read_image(path)
            pairs = evaluation.annotate(model, image, cfg["k"], vocab)
        except (OSError, FormatError) as exc:
            sys.stderr.write(f"error: {path}: {exc}\n")
            failures += 1
            continue
        print(path)
        for anp, prob in pairs:
            print(f"{anp}\t{prob:.6f}")
    return EXIT_OK if failures < len(args.images) else EXIT_DATA


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    _require(cfg, "weights", "manifest", "vocab", "out")
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, out_dir)
    vocab, manifest = _load_dataset(cfg)
    model = network.load_weights(cfg["weights"])
    if len(vocab) != model.num_classes:
        raise ConfigurationError(
            f"vocabulary has {len(vocab)} entries but the model predicts "
            f"{model.num_classes} classes")
    test_records = [r for r in manifest if r.split == "test"]
    if not test_records:
        raise DataError("manifest has no test records")
    if cfg["mode"] == "annotation":
        pred = evaluation.predict_probs(model, test_records, vocab,
                                        means=model.channel_means)
        ks = tuple(k for k in (1, 5, 10) if k <= len(vocab))
        report = evaluation.evaluate_annotation(pred, ks)
        table = evaluation.format_annotation_table({"this-run": report}, ks)
        ranked = evaluation.format_ranked_anps(report, vocab, ks)
        _write(out_dir, "annotation_report.tsv", table)
        _write(out_dir, "annotation_ranked_anps.tsv", ranked)
        sys.stdout.write(table)
    elif cfg["mode"] == "retrieval":
        report = evaluation.retrieval_eval(model, test_records, vocab)
        per_anp, per_noun = evaluation.format_retrieval_tables(report, vocab)
        _write(out_dir, "retrieval_per_anp.tsv", per_anp)
        _write(out_dir, "retrieval_per_noun.tsv", per_noun)
        sys.stdout.write(per_noun)
    else:
        raise UsageError(f"mode must be 'annotation' or 'retrieval', got {cfg['mode']!r}")
    return EXIT_OK


def cmd_validate_manifest(args) -> int:
    cfg = resolve_config(args)
    _require(cfg, "manifest", "vocab")
    echo_config(cfg)
    vocab, manifest = _load_dataset(cfg)
    report = data_mod.validate_manifest(manifest, vocab, min_train=cfg["min_train"])
    for anp, publisher in report.publisher_violations:
        print(f"violation\t{vocab.anps[anp]}\tshared publisher\t{publisher}")
    for anp, count in report.under_threshold:
        print(f"warning\t{vocab.anps[anp]}\tonly {count} train images")
    print(f"clean\t{str(report.clean).lower()}")
    return EXIT_OK if report.clean else EXIT_DATA


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(text)


def _add_common(parser):
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--weights", help="weight file path")
    parser.add_argument("--manifest", help="dataset manifest path")
    parser.add_argument("--vocab", help="vocabulary path")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--base-lr", dest="base_lr", type=float)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    parser.add_argument("--width-divisor", dest="width_divisor", type=int)
    parser.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--lr-drop-every", dest="lr_drop_every", type=int)
    parser.add_argument("--lr-factor", dest="lr_factor", type=float)
    parser.add_argument("--min-train", dest="min_train", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="anpnet",
                     description="Train, run and score the ANP concept classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue from pretrained weights")
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="print top-k concepts for images")
    _add_common(p)
    p.add_argument("-k", dest="k", type=int)
    p.add_argument("images", nargs="*", help="image files to annotate")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="write annotation or retrieval reports")
    _add_common(p)
    p.add_argument("--mode", choices=("annotation", "retrieval"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("validate-manifest", help="check dataset split rules")
    _add_common(p)
    p.set_defaults(func=cmd_validate_manifest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (ParameterError, ConfigurationError) as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except NumericError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except OSError as exc:
        sys.stderr.write(f"io error: {exc}\n")
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())
