"""Run configuration: flat ``key = value`` files with typed parsing."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # model
    n_layers: int = 2
    d_model: int = 32
    head_dim: int = 8
    n_heads: int = 0
    gqa_ratio: int = 4
    d_ff: int = 0
    ff_multiple: int = 64
    vocab_size: int = 256
    context: int = 64
    block_style: str = "parallel"
    head_mode: str = "PIT"
    trainable_z: bool = False
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    dtype: str = "float32"
    # head initialization
    mode: str = "scratch"
    teacher_embedding: str = ""
    match_teacher_scale: bool = False
    # optimizer
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_frac: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    # loop
    steps: int = 300
    batch_size: int = 16
    grad_accum: int = 1
    corpus: str = ""
    log_interval: int = 10
    checkpoint_interval: int = 0
    diagnostics_interval: int = 50
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("scratch", "teacher"):
            raise ConfigError(f"mode must be scratch or teacher, not {self.mode!r}")
        if self.mode == "teacher" and not self.teacher_embedding:
            raise ConfigError("teacher mode needs teacher_embedding")
        if self.mode == "teacher" and self.head_mode != "PIT":
            raise ConfigError("teacher mode applies to PIT heads")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and grad_accum >= 1 are required")
        for name in ("log_interval", "diagnostics_interval", "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        self.model_config()

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        text = text[1:-1]
    return text


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """File values, then ``PIT_SEED``, then explicit overrides (already typed or raw strings)."""
    env = os.environ if env is None else env
    values = parse_text(Path(path).read_text()) if path else {}
    if env.get("PIT_SEED"):
        values["seed"] = coerce("seed", env["PIT_SEED"])
    for key, val in (overrides or {}).items():
        values[key] = coerce(key, val) if isinstance(val, str) else val
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
