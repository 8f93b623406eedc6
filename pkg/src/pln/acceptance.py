"""Pass/fail judgement for the ten exit criteria.

Criteria 1-4 are cheap unit-level checks; 5-9 read the ``metrics.json``
written by :func:`pln.experiments.acceptance_metrics`; 10 compares the
digests of two such files.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

RANDOM_FACTOR = 3.0
TRAIN_BUDGET_S = 20 * 60
GRAD_BUDGET_S = 120


@dataclass(frozen=True)
class Verdict:
    number: int
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number:2d}: {'PASS' if self.passed else 'FAIL'}  {self.detail}"


def criterion_1() -> Verdict:
    from .gradsuite import check_model, check_ops

    t0 = time.perf_counter()
    ops = check_ops(range(5))
    model = check_model(0)
    elapsed = time.perf_counter() - t0
    worst = max(ops, key=lambda r: r.error)
    ok = all(r.passed for r in ops) and model.passed and elapsed < GRAD_BUDGET_S
    return Verdict(1, ok, f"worst op {worst.name} {worst.error:.1e} (<=1e-4), micro model {model.error:.2e} "
                          f"(<=1e-3), {elapsed:.0f}s")


def criterion_3() -> Verdict:
    from .training import iou_with_cells, soft_labels

    # moment [0, 4) s over 8 one-second cells: cells (0,1), (0,2), (0,3) overlap it by 0.5, 0.75, 1.0
    cells = [(0, 1), (0, 2), (0, 3)]
    o = iou_with_cells((0.0, 4.0), 8, 8.0)
    y = soft_labels((0.0, 4.0), 8, 8.0, 0.5, np.ones((8, 8), dtype=bool)).y
    os_, ys = [float(o[c]) for c in cells], [float(y[c]) for c in cells]
    ok = np.allclose(os_, [0.5, 0.75, 1.0]) and np.allclose(ys, [0.0, 0.5, 1.0], atol=1e-12)
    return Verdict(3, bool(ok), f"tau=0.5, o={os_} -> y={ys}")


def criterion_4() -> Verdict:
    from .autodiff import Tensor
    from .branch import PLN, upsampling_connection
    from .config import ModelConfig, make_stages

    cfg = ModelConfig(d_raw=2, d=4, vocab_size=4, embed_dim=2, query_hidden=2, stages=make_stages([32, 128]),
                      conv_kernel=1, dtype="float64")
    model = PLN(cfg)
    n = cfg.stages[1].uc_blocks
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 32, 32)))
    shape = upsampling_connection(x, [model.group(f"stage2.uc.{b}") for b in range(n)]).shape
    return Verdict(4, n == 2 and shape == (1, 4, 128, 128), f"32x32 with n={n} -> {shape[-2]}x{shape[-1]}")


def criterion_5(metrics: dict, timings: dict) -> Verdict:
    key = "R@1,IoU=0.5"
    got = metrics["two_stage"]["rank"][key]
    rnd = metrics["random_baseline"]["rank"][key]
    secs = timings["two-stage-8-32"]["train"]
    ok = got >= RANDOM_FACTOR * rnd and secs <= TRAIN_BUDGET_S
    return Verdict(5, ok, f"{key} {got:.2f} vs random {rnd:.2f} (need >= {RANDOM_FACTOR * rnd:.2f}); "
                          f"trained in {secs / 60:.1f} min on {metrics['n_train']} / {metrics['n_eval']}")


def criterion_6(metrics: dict) -> Verdict:
    m = metrics["miou"]
    ok = m["two-stage-8-32"] > m["one-stage-8"] and m["two-stage-8-32"] > m["one-stage-32"]
    return Verdict(6, ok, f"mIoU two-stage {m['two-stage-8-32']:.2f}, one-stage N=8 {m['one-stage-8']:.2f}, "
                          f"N=32 {m['one-stage-32']:.2f}")


def criterion_7(metrics: dict) -> Verdict:
    m = metrics["miou"]
    ok = m["two-stage-8-32"] >= m["no-cfm"] and m["two-stage-8-32"] >= m["no-uc"]
    return Verdict(7, ok, f"mIoU full {m['two-stage-8-32']:.2f}, no-cfm {m['no-cfm']:.2f}, no-uc {m['no-uc']:.2f}")


def criterion_8(metrics: dict) -> Verdict:
    first, last = metrics["topk_lengths"][0], metrics["topk_lengths"][-1]
    return Verdict(8, last <= first, f"mean top-5 length stage 1 {first:.2f}s, stage 2 {last:.2f}s")


def criterion_9(metrics: dict) -> Verdict:
    rel = {int(k): v for k, v in metrics["bucket_relative_improvement"].items()}
    occupied = sorted(k for k in rel if metrics["bucket_counts"].get(str(k), 0) > 0)
    if not occupied:
        return Verdict(9, False, "no occupied buckets")
    shortest = occupied[0]
    ok = all(rel[shortest] >= rel[k] for k in occupied)
    shown = ", ".join(f"b{k}:{'inf' if math.isinf(rel[k]) else f'{rel[k]:+.1f}%'}" for k in occupied)
    return Verdict(9, ok, f"relative R@1 gain vs one-stage N=32 per bucket: {shown}")


def criterion_10(digest_a: str, digest_b: str) -> Verdict:
    return Verdict(10, digest_a == digest_b, f"metrics.json sha256 {digest_a[:12]} vs {digest_b[:12]}")


def judge_experiments(metrics: dict, timings: dict) -> list[Verdict]:
    return [criterion_5(metrics, timings), criterion_6(metrics), criterion_7(metrics), criterion_8(metrics),
            criterion_9(metrics)]
