"""Exit criteria 1-10. Each test records one PASS/FAIL line, shown in the terminal summary.

Criteria 5-10 train the synthetic preset's variants twice (about an hour on one
core); deselect them with ``-m "not slow"``.
"""
import json

import numpy as np
import pytest

from conftest import VERDICTS
from oracles import (
    brute_fused, brute_labels, brute_moment_map, brute_nms, brute_rank, brute_sample_mask, iou, random_map,
    random_preds,
)
from pln import acceptance
from pln.acceptance import Verdict
from pln.autodiff import Tensor
from pln.config import PRESETS
from pln.encoders import ClipSet
from pln.evaluation import fused_scores, mean_iou, nms, rank_at
from pln.experiments import acceptance_metrics, file_digest
from pln.temporal_map import build_moment_map, sparse_sample_mask, valid_mask
from pln.training import soft_labels

FIXTURES = 100


def record(v: Verdict):
    VERDICTS[v.number] = v
    print(v.line())
    assert v.passed, v.line()


def test_criterion_01_gradients():
    record(acceptance.criterion_1())


def _oracle_fixture(name, rng):
    """One random fixture (N <= 32) for ``name``; True when implementation and oracle agree."""
    if name == "build_moment_map":
        clips = rng.standard_normal((int(rng.integers(1, 33)), int(rng.integers(1, 5))))
        return np.array_equal(build_moment_map(ClipSet(1, Tensor(clips))).features.data, brute_moment_map(clips))
    if name == "sparse_sample_mask":
        N = int(rng.integers(1, 33))
        dense = int(rng.integers(1, max(2, N)))
        return np.array_equal(sparse_sample_mask(N, dense), brute_sample_mask(N, dense))
    if name == "soft_labels":
        N, dur = int(rng.integers(1, 33)), float(rng.uniform(1, 100))
        s = float(rng.uniform(0, dur * 0.9))
        e = float(rng.uniform(s + 1e-3, dur))
        tau = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        keep = sparse_sample_mask(N, max(2, N // 8)) if rng.uniform() < 0.5 else valid_mask(N)
        return np.allclose(soft_labels((s, e), N, dur, tau, keep).y, brute_labels((s, e), N, dur, tau, keep),
                           rtol=0, atol=1e-12)
    if name == "nms":
        preds = random_preds(rng, int(rng.integers(0, 25)))
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
        return nms(preds, thr) == brute_nms(preds, thr)
    if name == "strategy2_fusion":
        base = int(rng.choice([1, 2, 4, 8]))
        Ns = [n for n in (base * 2 ** k for k in range(int(rng.integers(1, 4)))) if n <= 32]
        maps = [random_map(rng, n, t + 1, dense=int(rng.integers(1, 4))) for t, n in enumerate(Ns)]
        got, want = fused_scores(maps)[0], brute_fused(maps)
        return np.array_equal(np.isnan(got), np.isnan(want)) and np.allclose(
            got[~np.isnan(got)], want[~np.isnan(want)], rtol=0, atol=1e-15)
    Q = int(rng.integers(1, 20))
    preds = [random_preds(rng, int(rng.integers(0, 6))) for _ in range(Q)]
    gts = [(float(s), float(s + rng.uniform(0.1, 2))) for s in rng.uniform(0, 8, size=Q)]
    if name == "rank_at":
        return all(rank_at(preds, gts, n, m) == brute_rank(preds, gts, n, m)
                   for n in (1, 5) for m in (0.1, 0.3, 0.5, 0.7))
    top = [p[0] if p else None for p in preds]
    want = sum(0.0 if t is None else iou((t.start, t.end), g) for t, g in zip(top, gts)) / Q
    return abs(mean_iou(top, gts) - want) <= 1e-12


ORACLE_TARGETS = ("build_moment_map", "sparse_sample_mask", "soft_labels", "nms", "strategy2_fusion", "rank_at",
                  "mean_iou")


def test_criterion_02_oracle_equivalence():
    failures = {}
    for k, name in enumerate(ORACLE_TARGETS):
        rng = np.random.default_rng(10_000 + k)
        bad = sum(not _oracle_fixture(name, rng) for _ in range(FIXTURES))
        if bad:
            failures[name] = bad
    detail = f"{len(ORACLE_TARGETS)} functions x {FIXTURES} fixtures (N <= 32)"
    record(Verdict(2, not failures, detail + (f"; mismatches {failures}" if failures else "; all agree")))


def test_criterion_03_soft_label_values():
    record(acceptance.criterion_3())


def test_criterion_04_upsampling_shape():
    record(acceptance.criterion_4())


# ---------------------------------------------------------------------------
# experiments


@pytest.fixture(scope="session")
def synthetic():
    return PRESETS["synthetic"]()


@pytest.fixture(scope="session")
def run1(synthetic, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run1")
    metrics = acceptance_metrics(synthetic, out)
    return out, metrics, json.loads((out / "timings.json").read_text())


@pytest.fixture(scope="session")
def run2(synthetic, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run2")
    acceptance_metrics(synthetic, out)
    return out


@pytest.mark.slow
def test_criterion_05_beats_random_within_budget(run1):
    _, metrics, timings = run1
    assert metrics["n_train"] == 2000 and metrics["n_eval"] == 500
    record(acceptance.criterion_5(metrics, timings))


@pytest.mark.slow
def test_criterion_06_two_stage_beats_one_stage(run1):
    record(acceptance.criterion_6(run1[1]))


@pytest.mark.slow
def test_criterion_07_components_help(run1):
    record(acceptance.criterion_7(run1[1]))


@pytest.mark.slow
def test_criterion_08_later_stage_shorter_moments(run1):
    record(acceptance.criterion_8(run1[1]))


@pytest.mark.slow
def test_criterion_09_gain_largest_for_short_moments(run1):
    record(acceptance.criterion_9(run1[1]))


@pytest.mark.slow
def test_criterion_10_reruns_are_identical(run1, run2):
    record(acceptance.criterion_10(file_digest(run1[0] / "metrics.json"), file_digest(run2 / "metrics.json")))
