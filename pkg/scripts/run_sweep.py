"""Train a named grid of variants on one shared seed and print the comparison table.

    python3 scripts/run_sweep.py --grid stages --out runs/stages
    python3 scripts/run_sweep.py --variants full,dot-head --epochs 4

Grids: ablation (full / no-cfm / no-uc), stages (one vs two stage),
granularity (adds the uniform 32/32 model), head (convnet vs dot product).
"""
import argparse
import dataclasses
import json
import sys
from pathlib import Path

from pln.config import PRESETS, load_config
from pln.experiments import GRIDS, comparison_table, sweep


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="stages", choices=sorted(GRIDS))
    ap.add_argument("--variants", help="comma-separated names; overrides --grid")
    ap.add_argument("--config", help="JSON run config (default: synthetic preset)")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else PRESETS["synthetic"]()
    cfg = cfg.with_seed(args.seed)
    if args.epochs is not None:
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, epochs=args.epochs))
    variants = args.variants.split(",") if args.variants else list(GRIDS[args.grid])

    result = sweep(cfg, variants, Path(args.out),
                   progress=lambda r: print(f"  epoch {r.epoch} joint {r.joint:.5f} val mIoU {r.val_miou}", flush=True))
    table = comparison_table(result["rows"], reference=variants[0])
    print(table, end="")
    for name, run in result["runs"].items():
        rep = run["report"]
        buckets = ", ".join(f"({b['range'][0]:.1f},{b['range'][1]:.1f}] {b['rank1']:.1f}" for b in rep.buckets.values())
        print(f"{name}: R@1,IoU=0.5 by length bucket: {buckets}; top-5 length per stage {rep.topk_lengths}")
    out = Path(args.out)
    (out / "sweep.txt").write_text(table)
    (out / "sweep.json").write_text(json.dumps({"rows": result["rows"], "errors": result["errors"]}, indent=2) + "\n")
    for name, err in result["errors"].items():
        print(f"{name} failed: {err}", file=sys.stderr)
    return 1 if result["errors"] else 0


if __name__ == "__main__":
    sys.exit(main())
