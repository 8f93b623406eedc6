"""Dataclass configs, presets, hashing and (de)serialisation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from .errors import ConfigError

# loss weights per stage count, as used for the published models
DEFAULT_LAMBDAS = {1: (1.0,), 2: (1.0, 1.5), 3: (1.0, 1.3, 1.5), 4: (1.0, 1.2, 1.5, 2.0)}
HEADS = ("convnet", "dot")


@dataclass(frozen=True)
class StageConfig:
    n_clips: int
    loss_weight: float = 1.0
    uc_blocks: int = 0

    @property
    def N(self) -> int:
        return self.n_clips


def make_stages(clip_counts, lambdas=None) -> tuple[StageConfig, ...]:
    """Build a stage list with UC block counts derived from consecutive ratios."""
    counts = [int(n) for n in clip_counts]
    if not counts:
        raise ConfigError("at least one stage is required")
    if lambdas is None:
        lambdas = DEFAULT_LAMBDAS.get(len(counts)) or (1.0,) * len(counts)
    if len(lambdas) != len(counts):
        raise ConfigError("one loss weight per stage is required")
    stages = []
    for t, n in enumerate(counts):
        blocks = 0
        if t > 0:
            ratio = n / counts[t - 1]
            blocks = int(round(math.log2(ratio))) if ratio >= 1 else -1
            if blocks < 0 or counts[t - 1] * 2 ** blocks != n:
                raise ConfigError(f"stage sizes {counts[t - 1]} -> {n} are not related by a power of two")
        stages.append(StageConfig(n, float(lambdas[t]), blocks))
    return tuple(stages)


@dataclass(frozen=True)
class ModelConfig:
    d_raw: int = 16
    d: int = 32
    vocab_size: int = 16
    embed_dim: int = 32
    query_hidden: int = 32
    lstm_layers: int = 1
    stages: tuple = field(default_factory=lambda: make_stages([8, 32]))
    head: str = "convnet"
    positional_encoding: bool = False
    use_cfm: bool = True
    use_uc: bool = True
    share_cfm: bool = False
    share_fuse: bool = False
    dense_len: Optional[int] = None
    conv_kernel: int = 5
    uc_kernel: int = 3
    dtype: str = "float64"
    init_seed: int = 0

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        self.validate()

    def validate(self) -> None:
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.positional_encoding and self.d % 2:
            raise ConfigError("positional encoding needs an even feature width")
        if self.lstm_layers < 1:
            raise ConfigError("lstm_layers must be >= 1")
        if self.conv_kernel % 2 == 0 or self.uc_kernel % 2 == 0:
            raise ConfigError("convolution kernels must be odd")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        for t, s in enumerate(self.stages):
            if s.n_clips < 1:
                raise ConfigError("clip counts must be positive")
            if t == 0:
                if s.uc_blocks != 0:
                    raise ConfigError("the first stage has no upsampling connection")
                continue
            prev = self.stages[t - 1].n_clips
            if s.n_clips < prev:
                raise ConfigError("stages must be ordered coarse to fine")
            if s.uc_blocks < 0 or prev * 2 ** s.uc_blocks != s.n_clips:
                raise ConfigError(f"stage {t + 1}: {prev} * 2^{s.uc_blocks} != {s.n_clips}")

    @property
    def clip_counts(self) -> tuple[int, ...]:
        return tuple(s.n_clips for s in self.stages)

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(s.loss_weight for s in self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 2000
    l_v: int = 64
    d_raw: int = 16
    n_activities: int = 8
    query_len: int = 3
    n_filler_tokens: int = 0
    min_fraction: Optional[float] = None  # default 2 / l_v
    max_fraction: float = 0.8
    noise_sigma: float = 0.5
    distractor_spans: int = 2
    seed: int = 0
    signature_seed: int = 0  # shared by every split drawn from the same "world"

    @property
    def vocab_size(self) -> int:
        return 2 + self.n_activities + self.n_filler_tokens

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    tau: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("tau must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    strategy: int = 1
    t_select: Optional[int] = None  # None -> last stage
    nms_threshold: float = 0.5
    ranks: tuple = (1, 5)
    ious: tuple = (0.1, 0.3, 0.5, 0.7)
    n_buckets: int = 5
    topk_lengths: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset_path: Optional[str] = None
    val_fraction: float = 0.2
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        if self.dataset_path is not None and not Path(self.dataset_path).exists():
            raise ConfigError(f"dataset {self.dataset_path} does not exist")
        if self.dataset_path is None:
            if self.model.d_raw != self.data.d_raw:
                raise ConfigError("model.d_raw must equal data.d_raw")
            if self.model.vocab_size < self.data.vocab_size:
                raise ConfigError("model vocabulary smaller than the generator's")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.eval.strategy not in (1, 2):
            raise ConfigError("strategy must be 1 or 2")
        T = len(self.model.stages)
        if self.eval.t_select is not None and not 1 <= self.eval.t_select <= T:
            raise ConfigError(f"t_select must lie in [1, {T}]")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data.to_dict(),
                "eval": self.eval.to_dict(), "dataset_path": self.dataset_path,
                "val_fraction": self.val_fraction, "out_dir": self.out_dir, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if "seed" not in d:
            raise ConfigError("configs must state a seed explicitly")
        known = {"model", "train", "data", "eval", "dataset_path", "val_fraction", "out_dir", "seed", "preset"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = PRESETS[d["preset"]]() if d.get("preset") else cls()
        model_kw = dict(d.get("model", {}))
        if "stages" in model_kw:
            st = model_kw["stages"]
            if st and isinstance(st[0], (int, float)):
                model_kw["stages"] = make_stages(st, model_kw.pop("lambdas", None))
        try:
            model = dataclasses.replace(base.model, **model_kw)
            train = dataclasses.replace(base.train, **d.get("train", {}))
            data = dataclasses.replace(base.data, **d.get("data", {}))
            ev = d.get("eval", {})
            ev = {k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()}
            evalc = dataclasses.replace(base.eval, **ev)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(model=model, train=train, data=data, eval=evalc,
                   dataset_path=d.get("dataset_path", base.dataset_path),
                   val_fraction=d.get("val_fraction", base.val_fraction),
                   out_dir=d.get("out_dir", base.out_dir), seed=d["seed"])

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every seed (data, init, shuffling, baseline) set from ``seed``."""
        return dataclasses.replace(self, seed=seed, model=self.model.replace(init_seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed),
                                   data=dataclasses.replace(self.data, seed=seed))


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = RunConfig.from_dict(raw)
    cfg.validate()
    return cfg


def _synthetic() -> RunConfig:
    """Desk-scale two-stage setup used by the acceptance experiments."""
    data = DataConfig(n_samples=2500, l_v=64, d_raw=16, n_activities=8, noise_sigma=2.0, seed=0)
    model = ModelConfig(d_raw=16, d=32, vocab_size=data.vocab_size, embed_dim=32, query_hidden=32,
                        stages=make_stages([8, 32]), dtype="float32")
    return RunConfig(model=model, train=TrainConfig(lr=1e-3, batch_size=16, epochs=20),
                     data=data, eval=EvalConfig(nms_threshold=0.5), seed=0)


def _tacos_like() -> RunConfig:
    m = ModelConfig(stages=make_stages([32, 128]), lstm_layers=3, query_hidden=512)
    return RunConfig(model=m, train=TrainConfig(lr=1e-4, batch_size=32, epochs=50),
                     data=DataConfig(l_v=256), eval=EvalConfig(nms_threshold=0.4), seed=0)


def _activitynet_like() -> RunConfig:
    m = ModelConfig(stages=make_stages([16, 64]), lstm_layers=3, query_hidden=512, positional_encoding=True)
    return RunConfig(model=m, train=TrainConfig(lr=1e-4, batch_size=32, epochs=50),
                     data=DataConfig(l_v=128), eval=EvalConfig(nms_threshold=0.5), seed=0)


def _charades_like() -> RunConfig:
    m = ModelConfig(stages=make_stages([16, 64]), lstm_layers=3, query_hidden=512)
    return RunConfig(model=m, train=TrainConfig(lr=1e-4, batch_size=32, epochs=50),
                     data=DataConfig(l_v=128), eval=EvalConfig(nms_threshold=0.45), seed=0)


PRESETS = {
    "synthetic": _synthetic,
    "tacos-like": _tacos_like,
    "activitynet-like": _activitynet_like,
    "charades-like": _charades_like,
}
