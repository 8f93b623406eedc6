import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pln.branch import ScoreMap
from pln.errors import ConfigError, InputError
from pln.evaluation import (
    Prediction, evaluate_maps, fused_scores, length_bucket_report, mean_iou, nms, predict,
    random_score_maps, rank_at, rank_cells, relative_improvement, strategy1, strategy2, topk_length_stats,
    write_predictions,
)
from pln.temporal_map import sparse_sample_mask, valid_mask
from oracles import brute_fused, brute_nms, brute_rank, iou, random_map, random_preds


# ranking / nms -----------------------------------------------------------


def test_rank_cells_sort_oracle():
    scores = np.array([[0.1, 0.9, 0.5, 0.5], [0, 0.2, 0.5, 0.3], [0, 0, 0.7, 0.9], [0, 0, 0, 0.4]])
    keep = valid_mask(4)
    got = [(i, j) for i, j, _ in rank_cells(scores, keep)]
    cells = [(i, j) for i in range(4) for j in range(i, 4)]
    want = sorted(cells, key=lambda c: (-scores[c], c[0], c[1] - c[0]))
    assert got == want
    assert got[:2] == [(0, 1), (2, 3)]
    assert got[2:6] == [(2, 2), (0, 2), (0, 3), (1, 2)]


def test_nms_examples():
    rng = np.random.default_rng(0)
    preds = random_preds(rng, 6)
    assert nms(preds, 1.0) == preds
    dup = [Prediction(1, 3, 0.9), Prediction(1, 3, 0.8)]
    for thr in (0.0, 0.5, 0.99):
        assert nms(dup, thr) == dup[:1]
    five = [Prediction(0, 4, .9), Prediction(1, 4, .8), Prediction(5, 8, .7), Prediction(0, 2, .6), Prediction(6, 9, .5)]
    # (0, 2) vs (0, 4) and (6, 9) vs (5, 8) sit exactly at IoU 0.5 and survive
    assert nms(five, 0.5) == [five[0], five[2], five[3], five[4]] == brute_nms(five, 0.5)
    assert nms(five, 0.49) == [five[0], five[2]]


@pytest.mark.parametrize("trial", range(100))
def test_nms_matches_brute_force(trial):
    rng = np.random.default_rng(trial)
    preds = random_preds(rng, int(rng.integers(0, 25)))
    thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
    kept = nms(preds, thr)
    assert kept == brute_nms(preds, thr)
    assert nms(kept, thr) == kept
    pos = [preds.index(p) for p in kept]
    assert pos == sorted(pos)
    assert nms(preds, thr, limit=3) == kept[:3]


# strategies --------------------------------------------------------------


def test_strategy1_unique_max_and_range():
    N = 4
    scores = np.full((N, N), 0.1)
    scores[1, 2] = 0.99
    maps = [ScoreMap(N, scores, valid_mask(N), valid_mask(N), 1)]
    top = strategy1(maps, 1, 8.0, 0.5)[0]
    assert (top.start, top.end) == (2.0, 6.0)
    with pytest.raises(InputError):
        strategy1(maps, 2, 8.0, 0.5)
    with pytest.raises(InputError):
        strategy1(maps, 0, 8.0, 0.5)


def test_strategy1_ignores_unsampled_cells():
    N = 8
    keep = sparse_sample_mask(N, 2)
    assert not keep[1, 4]
    scores = np.full((N, N), 0.2)
    scores[1, 4] = 1.0
    top = strategy1([ScoreMap(N, scores, valid_mask(N), keep, 1)], 1, 8.0, 0.5)[0]
    assert (top.start, top.end) != (1.0, 5.0)


def test_strategy2_single_stage_equals_strategy1():
    rng = np.random.default_rng(0)
    maps = [random_map(rng, 16)]
    assert strategy2(maps, 16.0, 0.5) == strategy1(maps, 1, 16.0, 0.5)


def test_strategy2_two_term_mean():
    coarse = ScoreMap(2, np.array([[0.8, 0.1], [0, 0.1]]), valid_mask(2), valid_mask(2), 1)
    fine = ScoreMap(4, np.full((4, 4), 0.2), valid_mask(4), valid_mask(4), 2)
    fused, count = fused_scores([coarse, fine])
    assert fused[0, 1] == pytest.approx(0.5)
    assert count[0, 1] == 2 and count[0, 0] == 1 and fused[0, 0] == 0.2


@pytest.mark.parametrize("trial", range(100))
def test_strategy2_fusion_matches_brute_force(trial):
    rng = np.random.default_rng(trial)
    base = int(rng.choice([1, 2, 4, 8]))
    T = int(rng.integers(1, 4))
    Ns = [base * 2 ** k for k in range(T)]
    Ns = [n for n in Ns if n <= 32] or [base]
    maps = [random_map(rng, n, t + 1, dense=int(rng.integers(1, 4))) for t, n in enumerate(Ns)]
    fused, _ = fused_scores(maps)
    want = brute_fused(maps)
    assert np.array_equal(np.isnan(fused), np.isnan(want))
    np.testing.assert_allclose(fused[~np.isnan(fused)], want[~np.isnan(want)], rtol=0, atol=1e-15)
    lo = np.minimum.reduce([np.repeat(np.repeat(m.scores, Ns[-1] // m.N, 0), Ns[-1] // m.N, 1) for m in maps])
    assert np.all(np.nan_to_num(fused, nan=1.0) >= lo.min() - 1e-12)


def test_strategy2_rejects_unnested_grids():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        fused_scores([random_map(rng, 6), random_map(rng, 8)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fused_scores_within_stage_range(seed):
    rng = np.random.default_rng(seed)
    maps = [random_map(rng, 4, 1), random_map(rng, 8, 2), random_map(rng, 16, 3)]
    fused, _ = fused_scores(maps)
    fine = maps[-1]
    for i, j in zip(*np.nonzero(~np.isnan(fused))):
        vals = [fine.scores[i, j]]
        for m in maps[:-1]:
            r = 16 // m.N
            if i % r == 0 and (j + 1) % r == 0 and m.sample_mask[i // r, (j + 1) // r - 1]:
                vals.append(m.scores[i // r, (j + 1) // r - 1])
        assert min(vals) - 1e-12 <= fused[i, j] <= max(vals) + 1e-12


# metrics -----------------------------------------------------------------


def test_rank_at_examples():
    gts = [(0.0, 10.0), (0.0, 10.0), (0.0, 10.0)]
    preds = [[Prediction(0, 6, 1)], [Prediction(0, 4, 1)], [Prediction(0, 8, 1)]]
    assert rank_at(preds, gts, 1, 0.5) == pytest.approx(200 / 3)
    perfect = [[Prediction(*g, 1.0)] for g in gts]
    assert all(rank_at(perfect, gts, 1, m) == 100.0 for m in (0.1, 0.5, 0.9))
    assert rank_at([[], [], []], gts, 5, 0.1) == 0.0
    with pytest.raises(InputError):
        rank_at(preds, gts, 0, 0.5)


@pytest.mark.parametrize("trial", range(100))
def test_rank_at_and_miou_match_brute_force(trial):
    rng = np.random.default_rng(trial)
    Q = int(rng.integers(1, 20))
    preds = [random_preds(rng, int(rng.integers(0, 6))) for _ in range(Q)]
    starts = rng.uniform(0, 8, size=Q)
    gts = [(float(s), float(s + rng.uniform(0.1, 2))) for s in starts]
    for n in (1, 5):
        for m in (0.1, 0.3, 0.5, 0.7):
            assert rank_at(preds, gts, n, m) == brute_rank(preds, gts, n, m)
    top = [p[0] if p else None for p in preds]
    want = sum(0.0 if t is None else iou((t.start, t.end), g) for t, g in zip(top, gts)) / Q
    assert mean_iou(top, gts) == pytest.approx(want, abs=1e-15)
    perm = rng.permutation(Q)
    assert rank_at([preds[k] for k in perm], [gts[k] for k in perm], 1, 0.5) == rank_at(preds, gts, 1, 0.5)
    assert mean_iou([top[k] for k in perm], [gts[k] for k in perm]) == pytest.approx(mean_iou(top, gts), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rank_at_monotone(seed):
    rng = np.random.default_rng(seed)
    preds = [random_preds(rng, 6) for _ in range(8)]
    gts = [(1.0, float(rng.uniform(1.5, 9))) for _ in range(8)]
    ms = [0.1, 0.3, 0.5, 0.7]
    for n in (1, 3, 5):
        vals = [rank_at(preds, gts, n, m) for m in ms]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
    for m in ms:
        assert rank_at(preds, gts, 1, m) <= rank_at(preds, gts, 5, m)


def test_mean_iou_examples():
    gts = [(0.0, 10.0), (0.0, 10.0)]
    assert mean_iou([Prediction(0, 2, 1), Prediction(0, 6, 1)], gts) == pytest.approx(0.4)
    assert mean_iou([Prediction(0, 10, 1)] * 2, gts) == 1.0
    assert mean_iou([None, Prediction(0, 6, 1)], gts) == pytest.approx(0.3)
    dup = mean_iou([Prediction(0, 2, 1), Prediction(0, 6, 1), Prediction(0, 6, 1)], gts + gts[:1])
    assert dup == pytest.approx((0.2 + 0.6 + 0.6) / 3)


def test_length_bucket_report():
    gts = [(0, 1), (0, 1.5), (0, 9), (0, 8.5)]
    durs = [10.0] * 4
    preds = [[Prediction(0, 1, 1)], [Prediction(5, 6, 1)], [Prediction(0, 9, 1)], [Prediction(0, 8.5, 1)]]
    rep = length_bucket_report(preds, gts, durs, 5)
    assert sorted(rep) == [0, 4]
    assert rep[0]["count"] == 2 and rep[0]["rank1"] == 50.0
    assert rep[4]["count"] == 2 and rep[4]["rank1"] == 100.0
    assert sum(b["count"] for b in rep.values()) == 4
    same = length_bucket_report([[Prediction(0, 1, 1)]] * 3, [(0, 1)] * 3, [10.0] * 3, 4)
    assert list(same) == [0]
    assert relative_improvement(rep, rep) == {0: 0.0, 4: 0.0}
    with pytest.raises(InputError):
        length_bucket_report(preds, gts, durs, 1)


def test_relative_improvement_values():
    a = {0: {"rank1": 30.0}, 1: {"rank1": 10.0}, 2: {"rank1": 5.0}}
    b = {0: {"rank1": 20.0}, 1: {"rank1": 0.0}, 2: {"rank1": 10.0}, 3: {"rank1": 1.0}}
    out = relative_improvement(a, b)
    assert out == {0: 50.0, 1: math.inf, 2: -50.0}


def test_topk_length_stats():
    N = 4
    whole = np.zeros((N, N))
    whole[0, 3] = 1.0
    maps = [[ScoreMap(N, whole, valid_mask(N), valid_mask(N), 1)]] * 3
    assert topk_length_stats(maps, [8.0] * 3, 1, 0.5) == [8.0]
    sc = np.array([[0.9, 0.1, 0.1, 0.1], [0, 0.8, 0.1, 0.1], [0, 0, 0.1, 0.1], [0, 0, 0, 0.7]])
    one = [[ScoreMap(N, sc, valid_mask(N), valid_mask(N), 1)]]
    assert topk_length_stats(one, [4.0], 1, 0.5) == [1.0]
    # top-3 post-NMS: (0,0), (1,1), (3,3) -> all length 1s
    assert topk_length_stats(one, [4.0], 3, 0.5) == [1.0]
    with pytest.raises(InputError):
        topk_length_stats(one, [4.0], 0, 0.5)


def test_evaluate_maps_report_and_random_baseline(tmp_path):
    rng = np.random.default_rng(0)
    maps = [[random_map(rng, 4, 1), random_map(rng, 8, 2)] for _ in range(12)]
    gts = [(float(k % 6), float(k % 6 + 2)) for k in range(12)]
    durs = [8.0] * 12
    rep = evaluate_maps(maps, gts, durs)
    assert set(rep.rank) == {f"R@{n},IoU={m}" for n in (1, 5) for m in (0.1, 0.3, 0.5, 0.7)}
    assert all(0 <= v <= 100 for v in rep.rank.values())
    assert sum(b["count"] for b in rep.buckets.values()) == 12
    assert len(rep.topk_lengths) == 2
    back = json.loads(rep.to_json())
    assert back["miou"] == rep.miou
    assert "mIoU" in rep.to_table()
    r1 = random_score_maps(maps, 3)
    r2 = random_score_maps(maps, 3)
    assert all(np.array_equal(a.scores, b.scores) for x, y in zip(r1, r2) for a, b in zip(x, y))
    preds = predict(maps, durs, strategy=2)
    write_predictions(tmp_path / "p.jsonl", preds)
    rec = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"query_id", "start_sec", "end_sec", "score", "stage"}
    with pytest.raises(ConfigError):
        predict(maps, durs, strategy=3)
