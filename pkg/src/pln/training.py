"""IoU soft labels, stage/joint losses and the mini-batch Adam training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Adam, AdamState, Tape, Tensor, ops
from .branch import PLN, BranchState
from .config import TrainConfig
from .errors import ConfigError
from .temporal_map import valid_mask

log = logging.getLogger(__name__)


def temporal_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two time intervals; zero-length intervals contribute no overlap."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_with_cells(gt: Sequence[float], N: int, duration: float) -> np.ndarray:
    """IoU of every grid cell ``(i, j)`` (zero where ``i > j``) with ``gt``."""
    edges = np.arange(N + 1) * (duration / N)
    s = edges[:-1][:, None]
    e = edges[1:][None, :]
    inter = np.clip(np.minimum(e, gt[1]) - np.maximum(s, gt[0]), 0.0, None)
    union = (e - s) + (gt[1] - gt[0]) - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.where(valid_mask(N), iou, 0.0)


@dataclass
class LabelMap:
    N: int
    y: np.ndarray
    mask: np.ndarray
    tau: float


def soft_labels(gt: Sequence[float], N: int, duration: float, tau: float, sample_mask: np.ndarray) -> LabelMap:
    """0 where IoU <= tau, else (IoU - tau) / (1 - tau), on sampled valid cells."""
    if not tau < 1.0:
        raise ConfigError("tau must be < 1")
    o = iou_with_cells(gt, N, duration)
    m = np.asarray(sample_mask, dtype=bool) & valid_mask(N)
    y = np.where((o > tau) & m, (o - tau) / (1.0 - tau), 0.0)
    return LabelMap(N, y, m, tau)


def stage_loss(P: Tensor, labels) -> Tensor:
    """Masked BCE; ``labels`` is a LabelMap or a ``(y, mask)`` pair."""
    if isinstance(labels, LabelMap):
        y, m = labels.y, labels.mask
    else:
        y, m = labels
    y = np.broadcast_to(y, P.shape)
    m = np.broadcast_to(m, P.shape)
    return ops.bce(P, y, m)


def joint_loss(per_stage: Sequence[Tensor], lambdas: Sequence[float]) -> Tensor:
    if len(per_stage) != len(lambdas):
        raise ConfigError(f"{len(per_stage)} stage losses but {len(lambdas)} weights")
    return ops.add_n([ops.scale(L, lam) for L, lam in zip(per_stage, lambdas)])


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, dump: Optional[str]):
        self.epoch, self.batch_index, self.dump = epoch, batch_index, dump
        where = f"; batch dumped to {dump}" if dump else ""
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}{where}")


@dataclass
class EpochRecord:
    epoch: int
    stage_losses: list
    joint: float
    val_miou: Optional[float] = None


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    optimizer: Optional[Adam] = None


class LabelCache:
    """Per-stage soft labels for a fixed sample list, computed once."""

    def __init__(self, model: PLN, samples, tau: float):
        self.y = []
        self.mask = []
        for t, stage in enumerate(model.config.stages):
            sm = model.masks[t]
            ys = [soft_labels(s.gt, stage.n_clips, s.duration_seconds, tau, sm).y for s in samples]
            self.y.append(np.stack(ys).astype(model.dtype) if ys else np.zeros((0, stage.n_clips, stage.n_clips)))
            self.mask.append(sm & valid_mask(stage.n_clips))

    def batch_losses(self, states: list[BranchState], idx: np.ndarray) -> list[Tensor]:
        out = []
        for t, st in enumerate(states):
            y = self.y[t][idx]
            m = np.broadcast_to(self.mask[t], y.shape)
            out.append(ops.bce(st.P, y, m))
        return out


def _batches(n: int, batch_size: int, order: np.ndarray):
    for k in range(0, n, batch_size):
        yield k // batch_size, order[k:k + batch_size]


def dataset_loss(model: PLN, samples, tau: float, batch_size: int = 64) -> tuple[list[float], float]:
    """Mean per-stage and joint loss over ``samples`` (no gradient)."""
    from .data import make_batch

    cache = LabelCache(model, samples, tau)
    T = len(model.config.stages)
    sums = np.zeros(T)
    n = len(samples)
    for _, idx in _batches(n, batch_size, np.arange(n)):
        states = model.forward(make_batch([samples[i] for i in idx]))
        for t, L in enumerate(cache.batch_losses(states, idx)):
            sums[t] += float(L.data) * len(idx)
    stage = (sums / n).tolist()
    return stage, float(np.dot(model.config.lambdas, stage))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def write_log_header(path, T: int) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(["epoch", *[f"stage_{t}_loss" for t in range(1, T + 1)], "joint_loss", "val_miou"])


def append_log(path, rec: EpochRecord) -> None:
    with open(path, "a", newline="") as fh:
        val = "" if rec.val_miou is None else repr(rec.val_miou)
        csv.writer(fh).writerow([rec.epoch, *[repr(x) for x in rec.stage_losses], repr(rec.joint), val])


def train(model: PLN, samples, cfg: TrainConfig, val_samples=None, *, nms_threshold: float = 0.5,
          log_path=None, start_epoch: int = 0, optimizer_state: Optional[AdamState] = None,
          dump_dir=None, on_epoch: Optional[Callable[[EpochRecord, Adam], None]] = None) -> TrainResult:
    """Mini-batch Adam on the weighted sum of stage losses.

    Shuffling uses a fresh generator seeded by ``(seed, epoch)``, so a run
    resumed at epoch ``k`` with the saved optimizer state replays the same
    trajectory as an uninterrupted one.
    """
    from .data import make_batch
    from .evaluation import evaluate_miou

    if len(samples) == 0:
        raise ConfigError("training set is empty")
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    if optimizer_state is not None:
        opt.state = optimizer_state
    cache = LabelCache(model, samples, cfg.tau)
    lambdas = model.config.lambdas
    T = len(lambdas)
    if log_path is not None and start_epoch == 0:
        write_log_header(log_path, T)
    result = TrainResult(optimizer=opt)
    n = len(samples)
    for epoch in range(start_epoch, cfg.epochs):
        sums = np.zeros(T)
        for b, idx in _batches(n, cfg.batch_size, epoch_order(cfg.seed, epoch, n)):
            batch = make_batch([samples[i] for i in idx])
            opt.zero_grad()
            with Tape() as tape:
                states = model.forward(batch)
                losses = cache.batch_losses(states, idx)
                loss = joint_loss(losses, lambdas)
            if not np.isfinite(loss.data):
                dump = None
                if dump_dir is not None:
                    dump = str(Path(dump_dir) / f"diverged_e{epoch}_b{b}.npz")
                    np.savez(dump, units=batch.units, gts=batch.gts, indices=idx)
                raise TrainingDiverged(epoch, b, dump)
            tape.backward(loss)
            opt.step()
            sums += np.array([float(L.data) for L in losses]) * len(idx)
        stage = (sums / n).tolist()
        rec = EpochRecord(epoch + 1, stage, float(np.dot(lambdas, stage)))
        if val_samples:
            rec.val_miou = evaluate_miou(model, val_samples, nms_threshold)
        log.info("epoch %d joint %.5f val_miou %s", rec.epoch, rec.joint, rec.val_miou)
        result.history.append(rec)
        if log_path is not None:
            append_log(log_path, rec)
        if on_epoch is not None:
            on_epoch(rec, opt)
    return result
