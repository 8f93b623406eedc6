"""2D temporal maps of candidate moments and clip-grid/seconds conversions.

Cell ``[i, j]`` of an ``N x N`` map is the moment that starts at clip ``i``
and ends at clip ``j`` (inclusive). In seconds that is
``[i * dur / N, (j + 1) * dur / N)``, so adjacent moments tile the video.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, InputError


@dataclass
class TemporalMap2D:
    N: int
    features: Tensor  # (..., N, N, d)
    valid_mask: np.ndarray  # (N, N) bool
    sample_mask: np.ndarray  # (N, N) bool


@dataclass(frozen=True)
class Moment:
    start_clip: int
    end_clip: int
    start_sec: float
    end_sec: float
    stage: int

    @property
    def length(self) -> float:
        return self.end_sec - self.start_sec


def default_dense_len(N: int) -> int:
    return max(2, N // 8)


@lru_cache(maxsize=None)
def valid_mask(N: int) -> np.ndarray:
    m = np.triu(np.ones((N, N), dtype=bool))
    m.flags.writeable = False
    return m


def _stride_for(length: int, dense_len: int) -> int:
    s = 1
    while dense_len * s < length:
        s *= 2
    return s


@lru_cache(maxsize=None)
def sparse_sample_mask(N: int, dense_len: int) -> np.ndarray:
    """Keep every moment up to ``dense_len`` clips; longer ones on a coarser grid.

    A moment of length ``l > dense_len`` falls in octave
    ``o = ceil(log2(l / dense_len))`` and is kept only if both its start and its
    exclusive end are multiples of ``2**o``.
    """
    if dense_len < 1:
        raise ConfigError("dense_len must be >= 1")
    keep = np.zeros((N, N), dtype=bool)
    for i in range(N):
        for j in range(i, N):
            length = j - i + 1
            if length <= dense_len:
                keep[i, j] = True
            else:
                s = _stride_for(length, dense_len)
                keep[i, j] = i % s == 0 and (j + 1) % s == 0
    keep.flags.writeable = False
    return keep


def build_moment_map(clips, dense_len: Optional[int] = None) -> TemporalMap2D:
    """Max-pool clip features over every clip range (zero below the diagonal)."""
    x = clips.clips if hasattr(clips, "clips") else clips
    N = x.shape[-2]
    if N < 1:
        raise InputError("build_moment_map needs at least one clip")
    dl = default_dense_len(N) if dense_len is None else dense_len
    return TemporalMap2D(N, ops.range_max(x), valid_mask(N), sparse_sample_mask(N, dl))


def moment_to_seconds(i: int, j: int, N: int, duration: float) -> tuple[float, float]:
    if not (0 <= i <= j < N):
        raise InputError(f"moment ({i}, {j}) outside a {N}-clip grid")
    if duration <= 0:
        raise InputError("duration must be positive")
    return i * duration / N, (j + 1) * duration / N


def seconds_to_moment(start: float, end: float, N: int, duration: float) -> tuple[int, int]:
    """Snap a span to the clip grid: floor the start, ceil the end."""
    i = int(math.floor(start * N / duration + 1e-9))
    j = int(math.ceil(end * N / duration - 1e-9)) - 1
    i = min(max(i, 0), N - 1)
    return i, min(max(j, i), N - 1)


def make_moment(i: int, j: int, N: int, duration: float, stage: int) -> Moment:
    s, e = moment_to_seconds(i, j, N, duration)
    return Moment(i, j, s, e, stage)


def clip_ratio(N_from: int, N_to: int) -> tuple[int, bool]:
    """Return ``(r, refine)`` where ``N_to = r * N_from`` (refine) or vice versa."""
    if N_to % N_from == 0:
        return N_to // N_from, True
    if N_from % N_to == 0:
        return N_from // N_to, False
    raise ConfigError(f"clip counts {N_from} and {N_to} are not integer multiples")


def align_cell(i: int, j: int, N_from: int, N_to: int) -> Optional[tuple[int, int]]:
    r, refine = clip_ratio(N_from, N_to)
    if refine:
        return i * r, (j + 1) * r - 1
    if i % r == 0 and (j + 1) % r == 0:
        return i // r, (j + 1) // r - 1
    return None


def cross_stage_align(moment: Moment, N_from: int, N_to: int, stage_to: int,
                      duration: float) -> Optional[Moment]:
    """The cell on the ``N_to`` grid covering exactly the same span, if any."""
    cell = align_cell(moment.start_clip, moment.end_clip, N_from, N_to)
    if cell is None:
        return None
    return make_moment(cell[0], cell[1], N_to, duration, stage_to)
