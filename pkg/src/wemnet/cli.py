"""Command-line entry point: ``wemnet <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import DimensionError, ValidationError
from .data import DataError
from .harness import (
    ConfigError,
    RunConfig,
    ablation_run,
    ablation_table,
    build_datasets,
    build_model,
    domain_error_probe,
    gradcheck_run,
    train,
    write_masks_csv,
    write_run,
    write_summary_csv,
)
from .nn import load_checkpoint

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    if args.config is None:
        config = RunConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        config = RunConfig.load(path)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return replace(config, **overrides).validate()


def _out_dir(config: RunConfig) -> Path:
    if not config.out_dir:
        raise UsageError("an output directory is required (--out or out_dir in the config)")
    return Path(config.out_dir)


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _out_dir(config)
    model, history = train(config)
    write_run(out, config, model, history)
    last = history[-1]
    print(f"epoch {last.epoch}: source {last.source_accuracy:.2f}%  target {last.target_accuracy:.2f}%  -> {out}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out = _out_dir(config)
    finals: dict[str, list[float]] = {}
    for k in range(args.n_seeds):
        cfg = replace(config, seed=config.seed + k)
        results = ablation_run(cfg, workers=args.workers)
        run_dir = out / f"seed{cfg.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        for name, hist in results.items():
            with open(run_dir / f"metrics_{name}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                fh.writelines(rec.to_json() + "\n" for rec in hist)
            finals.setdefault(name, []).append(hist[-1].target_accuracy)
        write_summary_csv(run_dir / "summary.csv", [(name, hist[-1]) for name, hist in results.items()])
        print(f"seed {cfg.seed}")
        print(ablation_table(results))
    if args.n_seeds > 1:
        print(f"mean final target accuracy over {args.n_seeds} seeds")
        for name, accs in finals.items():
            print(f"  {name:>9} {np.mean(accs):8.2f}")
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump({"seeds": [config.seed + k for k in range(args.n_seeds)], "target_accuracy": finals},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_probe(args) -> int:
    config = _load_config(args)
    epochs = args.epochs if args.epochs is not None else 10
    config = replace(config, epochs=epochs, dim_enabled=True)
    data = build_datasets(config)
    model, _ = train(config, data)
    table = domain_error_probe(model, *data)
    print(f"{'':>8} {'with':>8} {'without':>8}")
    for dom in ("source", "target"):
        print(f"{dom:>8} {table[dom]['with']:8.3f} {table[dom]['without']:8.3f}")
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "probe.json", "w", encoding="utf-8") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradcheck_run(seed=args.seed)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    if args.verbose:
        for name, err in sorted(errors.items()):
            print(f"{name:28s} {err:.3e}")
    print(f"max relative error {worst:.3e} ({worst_name})")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def cmd_dump_masks(args) -> int:
    config = _load_config(args)
    out = _out_dir(config)
    if args.checkpoint is not None:
        source, _ = build_datasets(config)
        model = build_model(config, source)
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {ckpt}")
        model.load_state_dict(load_checkpoint(ckpt))
    else:
        model, _ = train(config)
    out.mkdir(parents=True, exist_ok=True)
    write_masks_csv(out / "masks.csv", model)
    print(f"wrote {out / 'masks.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wemnet", description="Weight-based masking for domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, epochs_help="override the number of epochs"):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--epochs", type=int, help=epochs_help)

    p = sub.add_parser("train", help="train one model and write metrics")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train the four DIM/SEM variants")
    common(p)
    p.add_argument("--n-seeds", type=int, default=1, help="consecutive seeds starting at --seed")
    p.add_argument("--workers", type=int, default=1, help="parallel processes per seed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe-domain-error", help="domain error with and without domain features")
    common(p, epochs_help="training epochs before probing (default 10)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-masks", help="write domain and class masks as CSV")
    common(p)
    p.add_argument("--checkpoint", help="model.npz from a previous train run; trains afresh if omitted")
    p.set_defaults(func=cmd_dump_masks)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    for name in ("n_seeds", "workers"):
        if getattr(args, name, 1) < 1:
            print(f"wemnet: error: --{name.replace('_', '-')} must be at least 1", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, ValidationError, DimensionError, KeyError) as exc:
        print(f"wemnet: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures get a one-line diagnostic
        print(f"wemnet: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
