"""Localization branches and the progressive multi-stage forward pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .config import ModelConfig
from .encoders import cfm_modulate, encode_query, encode_units, make_clips, pad_units, positional_encode
from .errors import ConfigError, ShapeError
from .temporal_map import TemporalMap2D, build_moment_map, default_dense_len, sparse_sample_mask, valid_mask

RANK_SENTINEL = -np.inf


@dataclass
class ScoreMap:
    N: int
    scores: np.ndarray  # (N, N)
    valid_mask: np.ndarray
    sample_mask: np.ndarray
    stage: int

    def ranking_scores(self) -> np.ndarray:
        """Scores with every non-sampled cell replaced by ``-inf``."""
        return np.where(self.sample_mask, self.scores, RANK_SENTINEL)


@dataclass
class BranchState:
    """Intermediate maps of one stage for a batch (leading axis B)."""

    stage: int
    N: int
    F: Tensor
    G: Tensor
    H: Tensor
    P: Tensor  # (B, N, N)
    sample_mask: np.ndarray
    calls: tuple = ()

    def score_map(self, b: int = 0) -> ScoreMap:
        return ScoreMap(self.N, self.P.data[b], valid_mask(self.N), self.sample_mask, self.stage)


@dataclass
class Batch:
    units: np.ndarray  # (B, l_v, d_raw)
    tokens: list  # B token sequences
    durations: np.ndarray  # (B,)
    gts: Optional[np.ndarray] = None  # (B, 2) seconds

    def __len__(self) -> int:
        return self.units.shape[0]


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Seeded parameter store; names are stable across runs (checkpoint keys)."""
    rng = np.random.default_rng(cfg.init_seed)
    d, ds = cfg.d, cfg.query_hidden
    specs: list[tuple[str, tuple, int]] = []

    def lin(name, n_in, n_out):
        specs.append((f"{name}.W", (n_in, n_out), n_in))
        specs.append((f"{name}.b", (n_out,), n_in))

    def conv(name, c_in, c_out, k):
        specs.append((f"{name}.W", (c_out, c_in, k, k), c_in * k * k))
        specs.append((f"{name}.b", (c_out,), c_in * k * k))

    lin("unit_proj", cfg.d_raw, d)
    specs.append(("embed", (cfg.vocab_size, cfg.embed_dim), 1))
    for layer in range(cfg.lstm_layers):
        n_in = cfg.embed_dim if layer == 0 else ds
        lin(f"lstm.{layer}", n_in + ds, 4 * ds)
    kc = cfg.conv_kernel
    conv("convnet.conv1", d, d, kc)
    conv("convnet.conv2", d, d, kc)
    for t, stage in enumerate(cfg.stages, start=1):
        fuse = "fuse" if cfg.share_fuse else f"stage{t}.fuse"
        if not (cfg.share_fuse and t > 1):
            lin(f"{fuse}.video", d, d)
            lin(f"{fuse}.query", ds, d)
        if cfg.head == "convnet":
            conv(f"stage{t}.head", d, 1, 1)
        else:
            lin(f"stage{t}.head", ds, d)
        if t > 1:
            if cfg.use_cfm and not (cfg.share_cfm and t > 2):
                lin("cfm" if cfg.share_cfm else f"stage{t}.cfm", d, d)
            if cfg.use_uc:
                for blk in range(stage.uc_blocks):
                    conv(f"stage{t}.uc.{blk}.conv1", d, d, cfg.uc_kernel)
                    conv(f"stage{t}.uc.{blk}.conv2", d, d, cfg.uc_kernel)
    dtype = np.dtype(cfg.dtype)
    return {name: Tensor(init_uniform(rng, shape, fan).astype(dtype), requires_grad=True, name=name)
            for name, shape, fan in specs}


def fuse(tmap: TemporalMap2D, f_s: Tensor, video: dict, query: dict) -> Tensor:
    """Project moment features and query to the shared width, multiply, mask.

    Returns a channel-first map ``(B, d, N, N)``; non-sampled cells are zero.
    """
    feats = tmap.features
    if feats.shape[-1] != video["W"].shape[0] or f_s.shape[-1] != query["W"].shape[0]:
        raise ShapeError("fuse: projection input widths do not match features")
    B, N, _, d_in = feats.shape
    v = ops.affine(feats, video["W"], video["b"])
    q = ops.affine(f_s, query["W"], query["b"])
    d = v.shape[-1]
    if q.shape[-1] != d:
        raise ShapeError("fuse: video and query projections disagree on width")
    q = ops.broadcast_to(ops.reshape(q, (B, 1, 1, d)), v.shape)
    fused = ops.mask(ops.mul(v, q), tmap.sample_mask[None, :, :, None])
    return ops.transpose(fused, (0, 3, 1, 2))


def upsampling_connection(H_prev: Tensor, blocks: Sequence[dict], pad: int = 1) -> Tensor:
    """``len(blocks)`` x (upsample x2 -> conv+ReLU -> conv+ReLU)."""
    x = H_prev
    for blk in blocks:
        x = ops.upsample2x(x)
        x = ops.relu(ops.conv2d(x, blk["conv1.W"], blk["conv1.b"], pad))
        x = ops.relu(ops.conv2d(x, blk["conv2.W"], blk["conv2.b"], pad))
    return x


def inject_previous(F_t: Tensor, up_prev: Optional[Tensor]) -> Tensor:
    if up_prev is None:
        return F_t
    if up_prev.shape != F_t.shape:
        raise ConfigError(f"upsampled previous map {up_prev.shape} does not match {F_t.shape}")
    return ops.maximum(F_t, up_prev)


def conv_stack(G_t: Tensor, shared: dict) -> Tensor:
    k = shared["conv1.W"].shape[-1]
    x = ops.relu(ops.conv2d(G_t, shared["conv1.W"], shared["conv1.b"], k // 2))
    return ops.relu(ops.conv2d(x, shared["conv2.W"], shared["conv2.b"], k // 2))


def predict_scores(H_t: Tensor, head_params: dict, head: str, f_s: Optional[Tensor] = None) -> Tensor:
    """Relevance probabilities ``(B, N, N)`` from the stage feature map."""
    B, d, N, _ = H_t.shape
    if head == "convnet":
        logits = ops.conv2d(H_t, head_params["W"], head_params["b"], 0)
        return ops.sigmoid(ops.reshape(logits, (B, N, N)))
    if head == "dot":
        if f_s is None:
            raise ConfigError("dot-product head needs the query vector")
        q = ops.affine(f_s, head_params["W"], head_params["b"])
        if q.shape[-1] != d:
            raise ShapeError("dot head: projected query width differs from map channels")
        q = ops.broadcast_to(ops.reshape(q, (B, d, 1, 1)), H_t.shape)
        return ops.sigmoid(ops.sum(ops.mul(H_t, q), axis=1))
    raise ConfigError(f"unknown head {head!r}")


class PLN:
    """Multi-stage localizer; stage ``t`` sees the previous stage's ConvNet map."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None):
        self.config = config
        self.params = params if params is not None else build_params(config)
        self.dtype = np.dtype(config.dtype)
        self.masks = []
        for s in config.stages:
            dl = config.dense_len if config.dense_len is not None else default_dense_len(s.n_clips)
            self.masks.append(sparse_sample_mask(s.n_clips, dl))

    def group(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters {sorted(missing)[:4]}")
        for k, t in self.params.items():
            if tuple(arrays[k].shape) != t.shape:
                raise ShapeError(f"parameter {k}: checkpoint {arrays[k].shape} vs model {t.shape}")
            t.data = np.ascontiguousarray(arrays[k], dtype=self.dtype)

    def encode_query(self, tokens) -> Tensor:
        layers = [self.group(f"lstm.{i}") for i in range(self.config.lstm_layers)]
        return encode_query(tokens, self.params["embed"], layers)

    def forward(self, batch: Batch) -> list[BranchState]:
        cfg = self.config
        multiple = int(np.lcm.reduce(cfg.clip_counts))
        units = Tensor(pad_units(np.asarray(batch.units, dtype=self.dtype), multiple))
        u = encode_units(units, self.group("unit_proj"))
        f_s = self.encode_query(batch.tokens)
        shared = self.group("convnet")
        states: list[BranchState] = []
        H_prev = None
        for t, stage in enumerate(cfg.stages, start=1):
            calls = ["clips"]
            clips = make_clips(u, stage.n_clips, stage_index=t)
            if cfg.positional_encoding:
                clips = positional_encode(clips)
                calls.append("pe")
            if t > 1 and cfg.use_cfm:
                cfm = self.group("cfm" if cfg.share_cfm else f"stage{t}.cfm")
                clips = cfm_modulate(clips, H_prev, cfm)
                calls.append("cfm")
            tmap = build_moment_map(clips)
            tmap.sample_mask = self.masks[t - 1]
            fz = "fuse" if cfg.share_fuse else f"stage{t}.fuse"
            F = fuse(tmap, f_s, self.group(f"{fz}.video"), self.group(f"{fz}.query"))
            calls.append("fuse")
            up = None
            if t > 1 and cfg.use_uc:
                blocks = [self.group(f"stage{t}.uc.{b}") for b in range(stage.uc_blocks)]
                up = upsampling_connection(H_prev, blocks, cfg.uc_kernel // 2)
                calls.append("uc")
            G = inject_previous(F, up)
            H = conv_stack(G, shared)
            P = predict_scores(H, self.group(f"stage{t}.head"), cfg.head, f_s)
            calls.append("predict")
            states.append(BranchState(t, stage.n_clips, F, G, H, P, self.masks[t - 1], tuple(calls)))
            H_prev = H
        return states

    def score_maps(self, batch: Batch) -> list[list[ScoreMap]]:
        """Per-sample list of per-stage score maps (inference, no tape)."""
        states = self.forward(batch)
        return [[s.score_map(b) for s in states] for b in range(len(batch))]


def forward_progressive(video, query, model: PLN) -> list[BranchState]:
    """Single-sample convenience wrapper around :meth:`PLN.forward`."""
    units = video.units if hasattr(video, "units") else np.asarray(video)
    duration = getattr(video, "duration_seconds", float(units.shape[-2]))
    tokens = query.token_ids if hasattr(query, "token_ids") else np.asarray(query)
    batch = Batch(units[None] if units.ndim == 2 else units, [tokens], np.array([duration]))
    return model.forward(batch)
