"""Unit/clip encoders, the query LSTM and conditional feature modulation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, ContractError, InputError, ShapeError


@dataclass
class UnitFeatureSequence:
    units: np.ndarray  # (l_v, d) or (B, l_v, d)
    duration_seconds: float

    @property
    def length(self) -> int:
        return self.units.shape[-2]


@dataclass
class ClipSet:
    stage_index: int
    clips: Tensor  # (..., N, d)
    modulated: bool = False

    @property
    def N(self) -> int:
        return self.clips.shape[-2]


@dataclass
class QueryTokens:
    token_ids: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.ndim != 1 or self.token_ids.size < 1:
            raise InputError("a query needs at least one token")
        if self.token_ids.min() < 0 or self.token_ids.max() >= self.vocab_size:
            raise InputError(f"token id outside vocabulary of size {self.vocab_size}")


def pad_units(units: np.ndarray, multiple: int) -> np.ndarray:
    """Repeat the last unit until the sequence length is a multiple of ``multiple``."""
    l_v = units.shape[-2]
    extra = (-l_v) % multiple
    if not extra:
        return units
    tail = np.repeat(units[..., -1:, :], extra, axis=-2)
    return np.concatenate([units, tail], axis=-2)


def encode_units(raw: Tensor, proj: dict) -> Tensor:
    """Per-unit FC + ReLU projection to the shared width."""
    if raw.shape[-1] != proj["W"].shape[0]:
        raise ShapeError(f"unit features have dim {raw.shape[-1]}, projection expects {proj['W'].shape[0]}")
    return ops.relu(ops.affine(raw, proj["W"], proj["b"]))


def make_clips(units: Tensor, n_clips: int, stage_index: int = 1) -> ClipSet:
    """Mean-pool consecutive equal runs of units into ``n_clips`` clips."""
    l_v, d = units.shape[-2:]
    if n_clips < 1 or l_v % n_clips:
        raise InputError(f"{l_v} units cannot be split into {n_clips} equal clips; pad first")
    w = l_v // n_clips
    lead = units.shape[:-2]
    if w == 1:
        return ClipSet(stage_index, units)
    grouped = ops.reshape(units, lead + (n_clips, w, d))
    return ClipSet(stage_index, ops.mean(grouped, axis=len(lead) + 1))


def positional_table(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError("positional encoding needs an even width")
    pos = np.arange(n)[:, None]
    k = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * k / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def positional_encode(clips: ClipSet, enabled: bool = True) -> ClipSet:
    if not enabled:
        return clips
    N, d = clips.clips.shape[-2:]
    pe = positional_table(N, d).astype(clips.clips.dtype)
    return ClipSet(clips.stage_index, ops.add_const(clips.clips, pe), clips.modulated)


def _run_lstm(x: Tensor, layers: Sequence[dict]) -> Tensor:
    """x: (B, L, e) -> top-layer hidden state at the last step, (B, d_h)."""
    B, L = x.shape[:2]
    seq = [ops.getitem(x, (slice(None), t)) for t in range(L)]
    for params in layers:
        d_h = params["b"].shape[0] // 4
        zeros = Tensor(np.zeros((B, d_h), dtype=x.dtype))
        h, c = zeros, zeros
        out = []
        for x_t in seq:
            h, c = ops.lstm_cell(x_t, h, c, params)
            out.append(h)
        seq = out
    return seq[-1]


def encode_query(token_ids, embed: Tensor, lstm_params: Sequence[dict]) -> Tensor:
    """Embed tokens, run stacked LSTMs, return the final top-layer hidden state.

    ``token_ids`` is one sequence, or a list of sequences (returns ``(B, d_s)``).
    Sequences of different lengths are encoded separately, never padded.
    """
    vocab = embed.shape[0]
    if isinstance(token_ids, QueryTokens):
        token_ids = token_ids.token_ids
    single = not isinstance(token_ids[0], (list, tuple, np.ndarray))
    seqs = [np.asarray(token_ids, dtype=np.int64)] if single else [np.asarray(t, dtype=np.int64) for t in token_ids]
    for s in seqs:
        if s.size < 1:
            raise InputError("empty query")
        if s.min() < 0 or s.max() >= vocab:
            raise InputError(f"token id outside vocabulary of size {vocab}")
    lengths = {len(s) for s in seqs}
    if len(lengths) == 1:
        ids = np.stack(seqs)
        out = _run_lstm(ops.getitem(embed, ids), lstm_params)
    else:
        parts = [_run_lstm(ops.getitem(embed, s[None]), lstm_params) for s in seqs]
        out = ops.concat(parts, axis=0)
    return ops.getitem(out, 0) if single else out


def cfm_modulate(clips: ClipSet, H_prev: Tensor, params: dict) -> ClipSet:
    """Rescale clip features with a gate conditioned on the previous stage's map.

    ``h`` is the spatial max of ``H_prev``; each clip ``c`` becomes
    ``c * sigmoid(W (h * c) + b)``.
    """
    if clips.stage_index <= 1:
        raise ContractError("feature modulation needs a previous stage (stage index > 1)")
    c = clips.clips
    d = c.shape[-1]
    Hd = H_prev.shape
    if Hd[-3] != d:
        raise ShapeError(f"previous map has {Hd[-3]} channels, clips have {d}")
    if Hd[-1] != Hd[-2]:
        raise ShapeError("previous map must be square")
    h = ops.pool2d(H_prev, "max", Hd[-1], Hd[-1])  # (..., d, 1, 1)
    lead = c.shape[:-2]
    h = ops.reshape(h, lead + (1, d))
    h = ops.broadcast_to(h, c.shape)
    gate = ops.sigmoid(ops.affine(ops.mul(h, c), params["W"], params["b"]))
    return ClipSet(clips.stage_index, ops.mul(c, gate), modulated=True)
