"""Seeded planted-moment corpus and its JSONL file format.

Each video is a sequence of ``l_v`` unit vectors (one unit = one second).
A target span carries the signature vector of the queried activity; the rest
of the video is tiled by spans of other activities. The query is
``[BOS, activity-token, (fillers...), EOS]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .branch import Batch
from .config import DataConfig
from .errors import ConfigError, InputError

BOS, EOS = 0, 1


def activity_token(a: int) -> int:
    return 2 + a


@dataclass
class SyntheticSample:
    units: np.ndarray  # (l_v, d_raw)
    query_tokens: np.ndarray
    gt_start_sec: float
    gt_end_sec: float
    duration_seconds: float
    activity_id: int

    def __post_init__(self):
        if not 0 <= self.gt_start_sec < self.gt_end_sec <= self.duration_seconds:
            raise InputError("ground truth must satisfy 0 <= start < end <= duration")

    @property
    def gt(self) -> tuple[float, float]:
        return self.gt_start_sec, self.gt_end_sec

    @property
    def length_fraction(self) -> float:
        return (self.gt_end_sec - self.gt_start_sec) / self.duration_seconds


def signatures(cfg: DataConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.signature_seed, 7919])
    return rng.standard_normal((cfg.n_activities, cfg.d_raw))


def _split_region(rng, lo: int, hi: int, n_spans: int) -> list[tuple[int, int]]:
    size = hi - lo
    if size <= 0:
        return []
    k = int(min(n_spans, size))
    cuts = np.sort(rng.choice(np.arange(1, size), size=k - 1, replace=False)) if k > 1 else np.array([], int)
    edges = [lo] + [lo + int(c) for c in cuts] + [hi]
    return list(zip(edges[:-1], edges[1:]))


def generate_dataset(cfg: DataConfig) -> list[SyntheticSample]:
    if cfg.n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if cfg.n_activities < 2:
        raise ConfigError("need at least two activities")
    if cfg.l_v < 8:
        raise ConfigError("l_v must be >= 8")
    if cfg.query_len < 3:
        raise ConfigError("query_len must be >= 3 (BOS, activity, EOS)")
    if cfg.query_len > 3 and cfg.n_filler_tokens < 1:
        raise ConfigError("queries longer than 3 tokens need filler tokens")
    rng = np.random.default_rng(cfg.seed)
    sig = signatures(cfg)
    l_v = cfg.l_v
    lo = cfg.min_fraction if cfg.min_fraction is not None else 2.0 / l_v
    hi = cfg.max_fraction
    max_len = max(1, int(math.floor(hi * l_v)))
    out = []
    for _ in range(cfg.n_samples):
        a = int(rng.integers(cfg.n_activities))
        frac = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        length = min(max(int(round(frac * l_v)), 1), max_len)
        start = int(rng.integers(0, l_v - length + 1))
        end = start + length
        units = np.empty((l_v, cfg.d_raw))
        units[start:end] = sig[a]
        spans = _split_region(rng, 0, start, cfg.distractor_spans) + _split_region(rng, end, l_v, cfg.distractor_spans)
        others = [x for x in range(cfg.n_activities) if x != a]
        for s, e in spans:
            units[s:e] = sig[others[int(rng.integers(len(others)))]]
        if cfg.noise_sigma > 0:
            units = units + cfg.noise_sigma * rng.standard_normal(units.shape)
        fillers = [2 + cfg.n_activities + int(rng.integers(cfg.n_filler_tokens)) for _ in range(cfg.query_len - 3)]
        tokens = np.array([BOS, activity_token(a), *fillers, EOS], dtype=np.int64)
        out.append(SyntheticSample(units, tokens, float(start), float(end), float(l_v), a))
    return out


def make_batch(samples: Sequence[SyntheticSample]) -> Batch:
    return Batch(np.stack([s.units for s in samples]),
                 [s.query_tokens for s in samples],
                 np.array([s.duration_seconds for s in samples]),
                 np.array([[s.gt_start_sec, s.gt_end_sec] for s in samples]))


def length_histogram(samples: Iterable[SyntheticSample], bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    fr = np.array([s.length_fraction for s in samples])
    return np.histogram(fr, bins=bins, range=(0.0, 1.0))


# ---------------------------------------------------------------------------
# file format


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".header.json")


def save_dataset(samples: Sequence[SyntheticSample], path, cfg: DataConfig | None = None) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for s in samples:
            rec = {"units": s.units.tolist(), "tokens": [int(t) for t in s.query_tokens],
                   "gt": [s.gt_start_sec, s.gt_end_sec], "duration": s.duration_seconds,
                   "activity": s.activity_id}
            fh.write(json.dumps(rec) + "\n")
    header = {"format": "pln-dataset/1", "n_samples": len(samples),
              "generator": cfg.to_dict() if cfg is not None else None,
              "seed": cfg.seed if cfg is not None else None}
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> list[SyntheticSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out.append(SyntheticSample(np.asarray(r["units"], dtype=np.float64), np.asarray(r["tokens"], dtype=np.int64),
                                       float(r["gt"][0]), float(r["gt"][1]), float(r["duration"]),
                                       int(r.get("activity", -1))))
    if not out:
        raise InputError(f"dataset {path} is empty")
    return out


def read_dataset_header(path) -> dict | None:
    hp = header_path(path)
    return json.loads(hp.read_text()) if hp.exists() else None
