"""Command-line entry point: ``rwplab {train,eval,ablate,plot}``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

from .attacks import AttackConfig, evaluate_robustness, natural_accuracy
from .config import RunConfig, dumps, load_config
from .errors import ConfigError, FormatError
from .models import init_weights, load_checkpoint
from .records import emit_curves_svg, read_metrics_csv, write_metrics_csv
from .train import SWEEP_KEYS, run_ablation, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rwplab", description="Adversarial training with robust weight perturbation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="robust accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", default="pgd20", help="natural, fgsm, pgd<K> (e.g. pgd20, pgd100)")
    p.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="one run per value of a perturbation setting")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", required=True, help="key=v1,v2,... with key in " + ", ".join(SWEEP_KEYS))
    p.add_argument("--out")

    p = sub.add_parser("plot", help="SVG of test robust accuracy curves")
    p.add_argument("--metrics", required=True, help="comma-separated metrics CSV files")
    p.add_argument("--out", required=True)
    return parser


def parse_sweep(text: str):
    if "=" not in text:
        raise ConfigError(f"sweep must look like key=v1,v2,... (got {text!r})")
    key, _, raw = text.partition("=")
    key = key.strip()
    if key == "K2":
        key = "steps"
    if key not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep key {key!r}; choose from {SWEEP_KEYS}")
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    try:
        if key == "lsc_range":
            values = [tuple(float(p) for p in item.split(":")) for item in items]
            if any(len(v) != 2 for v in values):
                raise ValueError("lsc_range values look like p:q")
        elif key == "steps":
            values = [int(v) for v in items]
        else:
            values = [float(v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}") from exc
    return key, values


def _attack_from_name(name: str, base: AttackConfig):
    name = name.lower()
    if name == "natural":
        return None, None
    if name == "fgsm":
        return "fgsm", base
    if name.startswith("pgd") and name[3:].isdigit():
        return "pgd", dataclasses.replace(base, steps=int(name[3:]))
    raise ConfigError(f"unknown attack {name!r}")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = cfg.data.load(base_dir=Path(args.config).parent)
    model = init_weights(cfg.model.arch(dataset), cfg.model.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(cfg))
    record = train(model, dataset, cfg.train, out_dir=out, label=out.name)
    print(
        f"best test robust acc {record.best_rob_acc:.4f} (epoch {record.best.epoch}), "
        f"last {record.last_rob_acc:.4f}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.json"
    cfg: RunConfig = load_config(cfg_path)
    model, _ = load_checkpoint(ckpt)
    dataset = cfg.data.load(base_dir=cfg_path.parent)
    method, attack_cfg = _attack_from_name(args.attack, cfg.train.eval_attack)
    if method is None:
        acc = natural_accuracy(model, dataset.x_test, dataset.y_test)
    else:
        if dataset.input_box is not None and attack_cfg.input_box is None:
            attack_cfg = dataclasses.replace(attack_cfg, input_box=dataset.input_box)
        acc = evaluate_robustness(model, dataset.x_test, dataset.y_test, attack_cfg, seed=args.seed, method=method)
    print(f"{args.attack} accuracy {acc:.4f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    key, values = parse_sweep(args.sweep)
    dataset = cfg.data.load(base_dir=Path(args.config).parent)
    result = run_ablation(cfg.train, cfg.model.arch(dataset), dataset, key, values, model_seed=cfg.model.seed)
    print(result.format_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for value, record in result.records.items():
            tag = ":".join(map(str, value)) if isinstance(value, tuple) else str(value)
            write_metrics_csv(record, out / f"{key}={tag}.csv")
        (out / "table.txt").write_text(result.format_table() + "\n")
    return EXIT_OK


def _cmd_plot(args) -> int:
    paths = [p for p in args.metrics.split(",") if p]
    series = [(Path(p).stem, read_metrics_csv(p)) for p in paths]
    emit_curves_svg(series, args.out)
    return EXIT_OK


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "ablate": _cmd_ablate, "plot": _cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
