"""Run configuration: dataclass defaults, a named budget, a key = value file, then flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

RUN_ROOT_ENV = "DEEPTOK_RUNS"

STAGE_KINDS = ("image", "mixed", "motion")

# step counts and corpus sizes per budget; ratios between stages are kept at 5:5:1
BUDGETS = {
    "full-desk": dict(n_train=2000, n_val=200, n_test=200, n_images=2000, tok_steps=2500,
                      stages="image:2500,mixed:2500,motion:500", warmup=250, eval_clips=32, checkpoint_every=500),
    "ci": dict(n_train=200, n_val=40, n_test=40, n_images=200, tok_steps=300,
               stages="image:200,mixed:200,motion:40", warmup=40, eval_clips=8, checkpoint_every=100),
    "tiny": dict(n_train=16, n_val=8, n_test=8, n_images=16, tok_steps=20,
                 stages="image:10,mixed:10,motion:2", warmup=4, eval_clips=2, checkpoint_every=10,
                 n_frames=22, ddim_steps=4),
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    budget: str = "full-desk"
    seed: int = 0
    precision: int = 64
    # synthetic corpus
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_images: int = 2000
    n_frames: int = 64
    image_size: int = 32
    # tokenizer and boundary decoder
    n_q: int = 16
    tok_width: int = 64
    tok_layers: int = 2
    tok_heads: int = 4
    patch: int = 8
    dec_width: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    clip_frames: int = 8
    freeze_encoder: bool = False
    tok_steps: int = 2500
    tok_lr: float = 1e-3
    tok_batch: int = 16
    cond_drop: float = 0.05
    checkpoint_every: int = 500
    # AR model
    preset: str = "small"
    head: str = "gmm"
    components: int = 16
    stages: str = "image:2500,mixed:2500,motion:500"
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup: int = 250
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.05
    l2_warm_fraction: float = 0.5
    image_ratio: float = 0.5
    motion_lo_pct: float = 30.0
    motion_hi_pct: float = 90.0
    token_drop: float = 0.05
    adapt_decoder: bool = False
    adapt_steps: int = 200
    # sampling and evaluation
    ddim_steps: int = 50
    cfg_scale: float = 7.5
    rescale: float = 0.7
    recon_cfg_scale: float = 1.0
    recon_rescale: float = 0.0
    eval_clips: int = 32

    def stage_plan(self) -> list[tuple[str, int]]:
        plan = []
        for part in self.stages.split(","):
            part = part.strip()
            if not part:
                continue
            kind, _, steps = part.partition(":")
            if kind not in STAGE_KINDS or not steps.strip().isdigit():
                raise ConfigError(f"bad stage entry {part!r}; expected <image|mixed|motion>:<steps>")
            plan.append((kind, int(steps)))
        return plan

    @property
    def total_ar_steps(self) -> int:
        return sum(s for _, s in self.stage_plan())

    @property
    def clip_stride(self) -> int:
        return self.clip_frames - 1

    def validate(self) -> "TrainConfig":
        if self.budget not in BUDGETS:
            raise ConfigError(f"unknown budget {self.budget!r}; choose from {sorted(BUDGETS)}")
        if self.head not in ("l2", "gaussian", "gmm"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        for name in ("tok_lr", "peak_lr", "beta1", "beta2", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.weight_decay:
            raise ConfigError("weight_decay must be non-negative")
        plan = self.stage_plan()
        if not plan or self.total_ar_steps <= 0:
            raise ConfigError("stage plan is empty")
        if not 0 <= self.warmup < self.total_ar_steps:
            raise ConfigError("warmup must be smaller than the total step count")
        if self.clip_frames < 2 or self.n_frames < self.clip_frames:
            raise ConfigError("clips need at least 2 frames and must fit in a video")
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(pairs: dict[str, str]) -> dict:
    return {k: _coerce(k, v) for k, v in pairs.items()}


def read_config_file(path: str | Path) -> dict:
    """Read ``key = value`` lines (``#`` comments allowed, no sections needed)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_pairs(dict(parser["run"]))


def resolve(file: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the budget preset, then the file, then overrides."""
    values = read_config_file(file) if file else {}
    overrides = dict(overrides or {})
    budget = overrides.get("budget", values.get("budget", TrainConfig.budget))
    if budget not in BUDGETS:
        raise ConfigError(f"unknown budget {budget!r}; choose from {sorted(BUDGETS)}")
    merged = {"budget": budget, **BUDGETS[budget], **values, **overrides}
    return TrainConfig(**merged).validate()


def replace(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, **kw).validate()


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))
