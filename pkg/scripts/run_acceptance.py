"""Train the acceptance variants twice on the synthetic preset and print criteria 1, 3-10.

    python3 scripts/run_acceptance.py --out runs/acceptance [--once]

Criterion 2 (oracle equivalence) lives in the pytest suite.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from pln import acceptance
from pln.config import PRESETS
from pln.experiments import acceptance_metrics, file_digest


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/acceptance")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--once", action="store_true", help="skip the repeat run (criterion 10)")
    args = ap.parse_args()

    cfg = PRESETS["synthetic"]().with_seed(args.seed)
    out = Path(args.out)
    verdicts = [acceptance.criterion_1(), acceptance.criterion_3(), acceptance.criterion_4()]
    for v in verdicts:
        print(v.line(), flush=True)

    def progress(rec):
        print(f"  epoch {rec.epoch} joint {rec.joint:.5f} val mIoU {rec.val_miou}", flush=True)

    t0 = time.perf_counter()
    metrics = acceptance_metrics(cfg, out / "run1", progress)
    print(f"run 1 finished in {(time.perf_counter() - t0) / 60:.1f} min", flush=True)
    timings = json.loads((out / "run1" / "timings.json").read_text())
    for v in acceptance.judge_experiments(metrics, timings):
        verdicts.append(v)
        print(v.line(), flush=True)
    if not args.once:
        acceptance_metrics(cfg, out / "run2", progress)
        v = acceptance.criterion_10(file_digest(out / "run1" / "metrics.json"), file_digest(out / "run2" / "metrics.json"))
        verdicts.append(v)
        print(v.line())
    return 0 if all(v.passed for v in verdicts) else 1


if __name__ == "__main__":
    sys.exit(main())
