"""Prediction strategies, temporal NMS and the evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .branch import PLN, ScoreMap
from .errors import ConfigError, InputError
from .training import temporal_iou


@dataclass(frozen=True)
class Prediction:
    start: float
    end: float
    score: float
    stages: tuple = ()

    @property
    def length(self) -> float:
        return self.end - self.start


def rank_cells(scores: np.ndarray, keep: np.ndarray) -> list[tuple[int, int, float]]:
    """Kept cells sorted by score desc, then earlier start, then shorter span."""
    ii, jj = np.nonzero(keep)
    sc = scores[ii, jj]
    order = np.lexsort((jj - ii, ii, -sc))
    return [(int(ii[k]), int(jj[k]), float(sc[k])) for k in order]


def nms(ranked: Sequence[Prediction], threshold: float, limit: Optional[int] = None) -> list[Prediction]:
    """Greedy suppression: keep a prediction iff its IoU with every kept one is <= threshold.

    ``limit`` stops after that many kept predictions; the kept prefix is the
    same as without a limit.
    """
    kept: list[Prediction] = []
    for p in ranked:
        if all(temporal_iou((p.start, p.end), (k.start, k.end)) <= threshold for k in kept):
            kept.append(p)
            if limit is not None and len(kept) >= limit:
                break
    return kept


def _to_predictions(cells, N: int, duration: float, stages: tuple) -> list[Prediction]:
    step = duration / N
    return [Prediction(i * step, (j + 1) * step, s, stages) for i, j, s in cells]


def strategy1(maps: Sequence[ScoreMap], t_select: int, duration: float, nms_threshold: float,
              limit: Optional[int] = None) -> list[Prediction]:
    """Rank the sampled cells of one stage's score map, then NMS."""
    if not 1 <= t_select <= len(maps):
        raise InputError(f"t_select={t_select} outside [1, {len(maps)}]")
    sm = maps[t_select - 1]
    keep = sm.sample_mask & sm.valid_mask
    ranked = _to_predictions(rank_cells(sm.scores, keep), sm.N, duration, (sm.stage,))
    return nms(ranked, nms_threshold, limit)


def fused_scores(maps: Sequence[ScoreMap]) -> tuple[np.ndarray, np.ndarray]:
    """Average each finest-stage cell's score with every exactly aligned sampled cell.

    Returns the fused ``(N, N)`` map (NaN outside candidates) and the number
    of contributing stages per cell.
    """
    finest = max(range(len(maps)), key=lambda t: maps[t].N)
    fine = maps[finest]
    for m in maps:
        if fine.N % m.N:
            raise ConfigError(f"stage grids {m.N} and {fine.N} are not nested")
    keep = fine.sample_mask & fine.valid_mask
    total = np.where(keep, fine.scores, 0.0).astype(np.float64)
    count = keep.astype(np.int64)
    for t, m in enumerate(maps):
        if t == finest:
            continue
        r = fine.N // m.N
        # cell (i, j) aligns to (i / r, (j + 1) / r - 1) when both boundaries sit on the coarse grid
        ii, jj = np.nonzero(keep)
        ok = (ii % r == 0) & ((jj + 1) % r == 0)
        ci, cj = ii[ok] // r, (jj[ok] + 1) // r - 1
        has = m.sample_mask[ci, cj] & m.valid_mask[ci, cj]
        fi, fj = ii[ok][has], jj[ok][has]
        total[fi, fj] += m.scores[ci[has], cj[has]]
        count[fi, fj] += 1
    fused = np.where(keep, total / np.maximum(count, 1), np.nan)
    return fused, count


def strategy2(maps: Sequence[ScoreMap], duration: float, nms_threshold: float,
              limit: Optional[int] = None) -> list[Prediction]:
    fused, _ = fused_scores(maps)
    fine = max(maps, key=lambda m: m.N)
    keep = ~np.isnan(fused)
    stages = tuple(m.stage for m in maps)
    ranked = _to_predictions(rank_cells(np.nan_to_num(fused), keep), fine.N, duration, stages)
    return nms(ranked, nms_threshold, limit)


# ---------------------------------------------------------------------------
# metrics


def rank_at(predictions: Sequence[Sequence[Prediction]], gts: Sequence[Sequence[float]], n: int, m: float) -> float:
    """Percentage of queries with some top-n prediction at IoU >= m."""
    if n < 1:
        raise InputError("n must be >= 1")
    if not gts:
        return 0.0
    hits = 0
    for preds, gt in zip(predictions, gts):
        if any(temporal_iou((p.start, p.end), gt) >= m for p in list(preds)[:n]):
            hits += 1
    return 100.0 * hits / len(gts)


def mean_iou(top1: Sequence[Optional[Prediction]], gts: Sequence[Sequence[float]]) -> float:
    """Mean top-1 IoU (fraction, not percent); a missing prediction counts 0."""
    if not gts:
        return 0.0
    vals = [0.0 if p is None else temporal_iou((p.start, p.end), gt) for p, gt in zip(top1, gts)]
    return float(np.mean(vals))


def bucket_index(fraction: float, n_buckets: int) -> int:
    """Equal-width bins over (0, 1]: bin k covers (k/n, (k+1)/n]."""
    return min(max(int(math.ceil(fraction * n_buckets - 1e-12)) - 1, 0), n_buckets - 1)


def length_bucket_report(predictions, gts, durations, n_buckets: int = 5, m: float = 0.5) -> dict:
    """Rank@1,IoU=m per ground-truth length-proportion bucket; empty buckets omitted."""
    if n_buckets < 2:
        raise InputError("need at least two buckets")
    groups: dict[int, list[int]] = {}
    for q, (gt, dur) in enumerate(zip(gts, durations)):
        groups.setdefault(bucket_index((gt[1] - gt[0]) / dur, n_buckets), []).append(q)
    report = {}
    for k in sorted(groups):
        qs = groups[k]
        rate = rank_at([predictions[q] for q in qs], [gts[q] for q in qs], 1, m)
        report[k] = {"range": [k / n_buckets, (k + 1) / n_buckets], "count": len(qs), "rank1": rate}
    return report


def relative_improvement(report_a: dict, report_b: dict) -> dict:
    """Per shared bucket, 100 * (a - b) / b; ``inf`` when b is 0 and a > 0."""
    out = {}
    for k in sorted(set(report_a) & set(report_b)):
        a, b = report_a[k]["rank1"], report_b[k]["rank1"]
        if b > 0:
            out[k] = 100.0 * (a - b) / b
        else:
            out[k] = math.inf if a > 0 else 0.0
    return out


def topk_length_stats(per_query_maps: Sequence[Sequence[ScoreMap]], durations, k: int,
                      nms_threshold: float) -> list[float]:
    """Per stage: mean length (s) of that stage's own top-k post-NMS predictions."""
    if k < 1:
        raise InputError("k must be >= 1")
    T = len(per_query_maps[0]) if per_query_maps else 0
    out = []
    for t in range(1, T + 1):
        lengths = []
        for maps, dur in zip(per_query_maps, durations):
            lengths += [p.length for p in strategy1(maps, t, dur, nms_threshold, limit=k)]
        out.append(float(np.mean(lengths)) if lengths else 0.0)
    return out


# ---------------------------------------------------------------------------
# running a model over a sample set


def collect_score_maps(model: PLN, samples, batch_size: int = 64) -> list[list[ScoreMap]]:
    from .data import make_batch

    out = []
    for k in range(0, len(samples), batch_size):
        out += model.score_maps(make_batch(samples[k:k + batch_size]))
    return out


def random_score_maps(per_query_maps, seed: int) -> list[list[ScoreMap]]:
    """Same grids and masks, scores replaced with seeded uniform noise."""
    rng = np.random.default_rng(seed)
    return [[ScoreMap(m.N, rng.uniform(size=m.scores.shape), m.valid_mask, m.sample_mask, m.stage) for m in maps]
            for maps in per_query_maps]


def predict(per_query_maps, durations, strategy: int = 1, t_select: Optional[int] = None,
            nms_threshold: float = 0.5, limit: Optional[int] = 5) -> list[list[Prediction]]:
    out = []
    for maps, dur in zip(per_query_maps, durations):
        if strategy == 1:
            t = len(maps) if t_select is None else t_select
            out.append(strategy1(maps, t, dur, nms_threshold, limit))
        elif strategy == 2:
            out.append(strategy2(maps, dur, nms_threshold, limit))
        else:
            raise ConfigError(f"unknown strategy {strategy}")
    return out


def write_predictions(path, predictions: Sequence[Sequence[Prediction]]) -> None:
    """One JSON record per ranked prediction: query_id, start_sec, end_sec, score, stage."""
    with open(path, "w") as fh:
        for q, preds in enumerate(predictions):
            for p in preds:
                stage = p.stages[0] if len(p.stages) == 1 else list(p.stages)
                fh.write(json.dumps({"query_id": q, "start_sec": p.start, "end_sec": p.end,
                                     "score": p.score, "stage": stage}) + "\n")


@dataclass
class EvalReport:
    rank: dict = field(default_factory=dict)  # "R@n,IoU=m" -> percent
    miou: float = 0.0  # percent
    buckets: dict = field(default_factory=dict)
    topk_lengths: list = field(default_factory=list)
    n_queries: int = 0
    strategy: str = ""

    def to_dict(self) -> dict:
        return {"rank": self.rank, "miou": self.miou, "n_queries": self.n_queries, "strategy": self.strategy,
                "buckets": {str(k): v for k, v in self.buckets.items()}, "topk_lengths": self.topk_lengths}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"strategy: {self.strategy}   queries: {self.n_queries}"]
        for k, v in self.rank.items():
            lines.append(f"  {k:<16} {v:7.2f}")
        lines.append(f"  {'mIoU':<16} {self.miou:7.2f}")
        for k, b in self.buckets.items():
            lo, hi = b["range"]
            lines.append(f"  len ({lo:.2f},{hi:.2f}]  n={b['count']:<5d} R@1,IoU=0.5 {b['rank1']:7.2f}")
        for t, L in enumerate(self.topk_lengths, start=1):
            lines.append(f"  stage {t} mean top-k length {L:8.3f}s")
        return "\n".join(lines) + "\n"


def evaluate_maps(per_query_maps, gts, durations, *, strategy: int = 1, t_select: Optional[int] = None,
                  nms_threshold: float = 0.5, ranks=(1, 5), ious=(0.1, 0.3, 0.5, 0.7),
                  n_buckets: int = 5, topk: int = 5) -> EvalReport:
    preds = predict(per_query_maps, durations, strategy, t_select, nms_threshold, limit=max(ranks))
    rep = EvalReport(n_queries=len(gts))
    T = len(per_query_maps[0]) if per_query_maps else 0
    rep.strategy = f"strategy1(t={t_select or T})" if strategy == 1 else "strategy2"
    for n in ranks:
        for m in ious:
            rep.rank[f"R@{n},IoU={m}"] = rank_at(preds, gts, n, m)
    rep.miou = 100.0 * mean_iou([p[0] if p else None for p in preds], gts)
    rep.buckets = length_bucket_report(preds, gts, durations, n_buckets)
    rep.topk_lengths = topk_length_stats(per_query_maps, durations, topk, nms_threshold)
    return rep


def evaluate(model: PLN, samples, **kw) -> EvalReport:
    maps = collect_score_maps(model, samples)
    return evaluate_maps(maps, [s.gt for s in samples], [s.duration_seconds for s in samples], **kw)


def evaluate_miou(model: PLN, samples, nms_threshold: float = 0.5) -> float:
    maps = collect_score_maps(model, samples)
    preds = predict(maps, [s.duration_seconds for s in samples], 1, None, nms_threshold, limit=1)
    return 100.0 * mean_iou([p[0] if p else None for p in preds], [s.gt for s in samples])
