"""Run directories: train + checkpoint + evaluate one configuration, and variant sweeps."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import AdamState, load_checkpoint, save_checkpoint
from .branch import PLN
from .config import RunConfig, make_stages
from .data import generate_dataset, load_dataset
from .errors import ConfigError
from .evaluation import (
    EvalReport, collect_score_maps, evaluate_maps, predict, random_score_maps, relative_improvement,
    write_predictions,
)
from .training import train

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.npz"
TRAIN_LOG = "train_log.csv"


# ---------------------------------------------------------------------------
# data


def load_splits(cfg: RunConfig):
    """``(train, held_out)`` from the dataset file or the generator config."""
    samples = load_dataset(cfg.dataset_path) if cfg.dataset_path else generate_dataset(cfg.data)
    n_val = int(round(len(samples) * cfg.val_fraction))
    if n_val == 0 and cfg.val_fraction > 0:
        n_val = 1
    n_train = len(samples) - n_val
    if n_train < 1:
        raise ConfigError("no samples left for training after the validation split")
    return samples[:n_train], samples[n_train:]


# ---------------------------------------------------------------------------
# checkpoints with optimizer state


def _state_arrays(opt_state: AdamState) -> dict:
    out = {"step": np.array(opt_state.step, dtype=np.int64)}
    for k, (m, v) in enumerate(zip(opt_state.m, opt_state.v)):
        out[f"m/{k}"] = m
        out[f"v/{k}"] = v
    return out


def _restore_state(model: PLN, arrays: dict) -> Optional[AdamState]:
    if "step" not in arrays:
        return None
    n = len(model.parameters())
    m = [np.asarray(arrays[f"m/{k}"], dtype=model.dtype) for k in range(n)]
    v = [np.asarray(arrays[f"v/{k}"], dtype=model.dtype) for k in range(n)]
    return AdamState(m, v, int(arrays["step"]))


def write_checkpoint(path, model: PLN, epoch: int, opt_state: Optional[AdamState] = None) -> None:
    save_checkpoint(path, model.params, model.config.config_hash(),
                    meta={"epoch": epoch, "model": model.config.to_dict()},
                    state=_state_arrays(opt_state) if opt_state is not None else None)


def load_model(cfg: RunConfig, path) -> tuple[PLN, dict, Optional[AdamState]]:
    """Rebuild the model for ``cfg`` and fill it from ``path``; refuses on hash drift."""
    params, header, state = load_checkpoint(path, expected_hash=cfg.model.config_hash())
    model = PLN(cfg.model)
    model.load_arrays(params)
    return model, header, _restore_state(model, state)


# ---------------------------------------------------------------------------
# one run


def _eval_kwargs(cfg: RunConfig) -> dict:
    e = cfg.eval
    return dict(strategy=e.strategy, t_select=e.t_select, nms_threshold=e.nms_threshold, ranks=e.ranks,
                ious=e.ious, n_buckets=e.n_buckets, topk=e.topk_lengths)


def evaluate_run(model: PLN, cfg: RunConfig, samples, out_dir: Optional[Path] = None,
                 baseline_seed: Optional[int] = None) -> tuple[EvalReport, Optional[EvalReport]]:
    """Evaluate ``model``; optionally also a random-scoring baseline on identical grids."""
    maps = collect_score_maps(model, samples)
    gts = [s.gt for s in samples]
    durs = [s.duration_seconds for s in samples]
    kw = _eval_kwargs(cfg)
    report = evaluate_maps(maps, gts, durs, **kw)
    baseline = None
    if baseline_seed is not None:
        baseline = evaluate_maps(random_score_maps(maps, baseline_seed), gts, durs, **kw)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "eval_report.json").write_text(report.to_json())
        (out_dir / "eval_report.txt").write_text(report.to_table())
        preds = predict(maps, durs, kw["strategy"], kw["t_select"], kw["nms_threshold"], limit=max(kw["ranks"]))
        write_predictions(out_dir / "predictions.jsonl", preds)
        if baseline is not None:
            (out_dir / "baseline_report.json").write_text(baseline.to_json())
    return report, baseline


def train_run(cfg: RunConfig, out_dir, *, resume: bool = False, progress: Optional[Callable] = None) -> dict:
    """Train ``cfg`` into ``out_dir`` (checkpoint, CSV log, config, reports); return a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = load_splits(cfg)
    ckpt = out / CHECKPOINT
    start_epoch, opt_state = 0, None
    if resume and ckpt.exists():
        model, header, opt_state = load_model(cfg, ckpt)
        start_epoch = int(header["meta"].get("epoch", 0))
    else:
        model = PLN(cfg.model)
        write_checkpoint(ckpt, model, 0)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def on_epoch(rec, opt):
        write_checkpoint(ckpt, model, rec.epoch, opt.state)
        if progress is not None:
            progress(rec)

    t0 = time.perf_counter()
    result = train(model, train_set, cfg.train, val_set or None, nms_threshold=cfg.eval.nms_threshold,
                   log_path=out / TRAIN_LOG, start_epoch=start_epoch, optimizer_state=opt_state,
                   dump_dir=out, on_epoch=on_epoch)
    train_seconds = time.perf_counter() - t0
    report, baseline = evaluate_run(model, cfg, val_set, out, baseline_seed=cfg.seed) if val_set else (None, None)
    return {"model": model, "history": result.history, "report": report, "baseline": baseline,
            "train_seconds": train_seconds, "total_seconds": time.perf_counter() - t0,
            "n_train": len(train_set), "n_eval": len(val_set)}


# ---------------------------------------------------------------------------
# variants


def variant_config(base: RunConfig, name: str) -> RunConfig:
    """Named variant of ``base``; every variant keeps the base seeds.

    ``full`` | ``no-cfm`` | ``no-uc`` | ``dot-head`` | ``one-stage-N`` | ``two-stage-A-B`` | ``stages-A-B-...``
    (``two-stage-32-32`` is the uniform-granularity model).
    """
    m = base.model
    if name == "full":
        model = m
    elif name == "no-cfm":
        model = m.replace(use_cfm=False)
    elif name == "no-uc":
        model = m.replace(use_uc=False)
    elif name == "dot-head":
        model = m.replace(head="dot")
    elif name.startswith(("one-stage-", "two-stage-", "stages-")):
        prefix, _, rest = name.partition("stage-") if "stage-" in name else name.partition("stages-")
        try:
            counts = [int(x) for x in rest.split("-")]
        except ValueError:
            raise ConfigError(f"bad clip counts in variant {name!r}") from None
        want = {"one-": 1, "two-": 2}.get(prefix)
        if want is not None and len(counts) != want:
            raise ConfigError(f"variant {name!r} lists {len(counts)} clip counts")
        model = m.replace(stages=make_stages(counts))
    else:
        raise ConfigError(f"unknown variant {name!r}")
    return base.replace(model=model)


GRIDS = {
    "ablation": ("full", "no-cfm", "no-uc"),
    "stages": ("one-stage-8", "one-stage-32", "two-stage-8-32"),
    "granularity": ("one-stage-32", "two-stage-8-32", "two-stage-32-32"),
    "head": ("full", "dot-head"),
}


def metric_row(report: EvalReport) -> dict:
    row = dict(report.rank)
    row["mIoU"] = report.miou
    return row


def sweep(base: RunConfig, variants, out_dir, progress: Optional[Callable] = None) -> dict:
    """Train + evaluate each variant under ``out_dir/<name>``; failures are recorded, not raised."""
    out = Path(out_dir)
    rows, errors, runs = {}, {}, {}
    for name in variants:
        try:
            cfg = variant_config(base, name)
            run = train_run(cfg, out / name, progress=progress)
            runs[name] = run
            rows[name] = metric_row(run["report"])
        except Exception as exc:  # per-variant isolation
            log.exception("variant %s failed", name)
            errors[name] = f"{type(exc).__name__}: {exc}"
    return {"rows": rows, "errors": errors, "runs": runs, "seed": base.seed}


def comparison_table(rows: dict, reference: Optional[str] = None) -> str:
    if not rows:
        return "(no successful variants)\n"
    names = list(rows)
    ref = reference if reference in rows else names[0]
    metrics = list(rows[ref])
    w = max(12, *(len(n) for n in names))
    lines = [f"{'metric':<16}" + "".join(f"{n:>{w + 2}}" for n in names)]
    for k in metrics:
        lines.append(f"{k:<16}" + "".join(f"{rows[n].get(k, float('nan')):>{w + 2}.2f}" for n in names))
    lines.append(f"relative delta vs {ref} (%)")
    for k in metrics:
        base = rows[ref][k]
        cells = []
        for n in names:
            v = rows[n].get(k, float("nan"))
            cells.append(100.0 * (v - base) / base if base else (0.0 if v == base else math.inf))
        lines.append(f"{k:<16}" + "".join(f"{c:>{w + 2}.1f}" for c in cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# acceptance experiments (directional checks on the synthetic benchmark)


ACCEPTANCE_VARIANTS = ("two-stage-8-32", "one-stage-8", "one-stage-32", "no-cfm", "no-uc")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def acceptance_metrics(base: RunConfig, out_dir, progress: Optional[Callable] = None) -> dict:
    """Train the five variants, compute criteria 5-9 inputs, write ``metrics.json``.

    Everything in the metrics file is a deterministic function of the config;
    wall-clock timings go to a separate ``timings.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = sweep(base, ACCEPTANCE_VARIANTS, out, progress)
    if result["errors"]:
        raise RuntimeError(f"acceptance variants failed: {result['errors']}")
    runs = result["runs"]
    two, one32 = runs["two-stage-8-32"], runs["one-stage-32"]
    rep, base_rep = two["report"], two["baseline"]
    metrics = {
        "config_hash": base.model.config_hash(),
        "seed": base.seed,
        "n_train": two["n_train"],
        "n_eval": two["n_eval"],
        "two_stage": rep.to_dict(),
        "random_baseline": base_rep.to_dict(),
        "miou": {name: runs[name]["report"].miou for name in ACCEPTANCE_VARIANTS},
        "topk_lengths": rep.topk_lengths,
        "bucket_rank1": {"two_stage": {str(k): v["rank1"] for k, v in rep.buckets.items()},
                         "one_stage_32": {str(k): v["rank1"] for k, v in one32["report"].buckets.items()}},
        "bucket_relative_improvement": {str(k): v for k, v in
                                        relative_improvement(rep.buckets, one32["report"].buckets).items()},
        "bucket_counts": {str(k): v["count"] for k, v in rep.buckets.items()},
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    timings = {name: {"train": runs[name]["train_seconds"], "train_and_eval": runs[name]["total_seconds"]}
               for name in ACCEPTANCE_VARIANTS}
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return metrics
