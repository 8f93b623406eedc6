"""Command-line entry point: gen-data, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 failed check.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, RunConfig, load_config, make_stages
from .errors import ConfigError, InputError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--out", help="output directory (or file for gen-data)")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--stages", help="comma-separated clip counts, coarse to fine")
    p.add_argument("--no-cfm", action="store_true", help="bypass feature modulation")
    p.add_argument("--no-uc", action="store_true", help="bypass the upsampling connection")
    p.add_argument("--head", choices=["convnet", "dot"])
    p.add_argument("--strategy", type=int, choices=[1, 2])
    p.add_argument("--t", type=int, dest="t_select", help="stage used by strategy 1")
    p.add_argument("--nms", type=float, help="NMS IoU threshold")
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pln", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (JSONL + header)")
    _add_common(p)

    p = sub.add_parser("train", help="train, checkpoint and evaluate on the held-out split")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="JSONL dataset (defaults to the config's held-out split)")

    p = sub.add_parser("gradcheck", help="finite-difference checks")
    p.add_argument("scope", nargs="?", choices=["ops", "model", "all"], default="all")

    p = sub.add_parser("ablate", help="train and compare a grid of variants")
    _add_common(p)
    p.add_argument("--variants", help="comma-separated variant names (overrides --grid)")
    p.add_argument("--grid", default="ablation", help="named grid: ablation, stages, granularity, head")
    return parser


def resolve_config(args) -> RunConfig:
    """Config file (or preset, or defaults) with command-line overrides applied."""
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = PRESETS[args.preset]()
    else:
        cfg = PRESETS["synthetic"]()
    model, train, ev = cfg.model, cfg.train, cfg.eval
    if args.stages:
        try:
            counts = [int(x) for x in args.stages.split(",")]
        except ValueError:
            raise ConfigError(f"--stages expects integers, got {args.stages!r}") from None
        model = model.replace(stages=make_stages(counts))
    if args.no_cfm:
        model = model.replace(use_cfm=False)
    if args.no_uc:
        model = model.replace(use_uc=False)
    if args.head:
        model = model.replace(head=args.head)
    if args.epochs is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    if args.strategy is not None:
        ev = dataclasses.replace(ev, strategy=args.strategy)
    if args.t_select is not None:
        ev = dataclasses.replace(ev, t_select=args.t_select)
    if args.nms is not None:
        ev = dataclasses.replace(ev, nms_threshold=args.nms)
    cfg = cfg.replace(model=model, train=train, eval=ev)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out and args.command != "gen-data":
        cfg = cfg.replace(out_dir=args.out)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import generate_dataset, length_histogram, save_dataset

    cfg = resolve_config(args)
    if not args.out:
        raise ConfigError("gen-data needs --out FILE")
    samples = generate_dataset(cfg.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, out, cfg.data)
    counts, edges = length_histogram(samples)
    print(f"wrote {len(samples)} samples to {out}")
    print("length fraction histogram:")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"  [{lo:.1f}, {hi:.1f}) {c:6d}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import train_run

    cfg = resolve_config(args)

    def progress(rec):
        val = "" if rec.val_miou is None else f" val mIoU {rec.val_miou:.2f}"
        print(f"epoch {rec.epoch:3d} joint {rec.joint:.5f}{val}", flush=True)

    run = train_run(cfg, cfg.out_dir, resume=args.resume, progress=progress)
    if run["report"] is not None:
        print(run["report"].to_table(), end="")
    print(f"artifacts in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .experiments import evaluate_run, load_model, load_splits

    cfg = resolve_config(args)
    model, _, _ = load_model(cfg, args.checkpoint)
    samples = load_dataset(args.dataset) if args.dataset else load_splits(cfg)[1]
    if not samples:
        raise InputError("nothing to evaluate: the held-out split is empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate_run(model, cfg, samples, out)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import check_model, check_ops, format_table

    results = []
    if args.scope in ("ops", "all"):
        results += check_ops()
    if args.scope in ("model", "all"):
        results.append(check_model())
    print(format_table(results), end="")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import GRIDS, comparison_table, sweep

    cfg = resolve_config(args)
    if args.variants:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    elif args.grid in GRIDS:
        variants = list(GRIDS[args.grid])
    else:
        raise ConfigError(f"unknown grid {args.grid!r}; choose from {sorted(GRIDS)}")
    out = Path(cfg.out_dir)
    result = sweep(cfg, variants, out)
    table = comparison_table(result["rows"], reference=variants[0])
    header = f"variants: {', '.join(variants)}   shared seed: {result['seed']}\n"
    (out / "ablation.txt").parent.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(header + table)
    (out / "ablation.json").write_text(json.dumps({"seed": result["seed"], "rows": result["rows"],
                                                    "errors": result["errors"]}, indent=2, sort_keys=True) + "\n")
    print(header + table, end="")
    for name, err in result["errors"].items():
        print(f"variant {name} failed: {err}", file=sys.stderr)
    return EXIT_RUNTIME if result["errors"] else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    from .autodiff import CheckpointMismatch

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointMismatch as exc:
        print(f"error: {exc}; re-run with the config the checkpoint was trained with", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
