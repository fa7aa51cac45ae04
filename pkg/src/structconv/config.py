"""Flat ``key = value`` run configuration with a closed schema."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class RunConfig:
    # paths; empty data/graph paths fall back to <out_dir>/data.csv and the built-in 5-node graph
    out_dir: str = "run"
    data_path: str = ""
    graph_path: str = ""
    checkpoint: str = ""
    # model
    family: str = "scnn"
    encoder: str = ""
    decoder: str = ""
    hop_k: int = 1
    # data preparation
    window: int = 500
    horizon: int = 100
    stride: int = 100
    split_train: float = 0.55
    split_test: float = 0.35
    split_validation: float = 0.10
    # optimization
    adam_alpha: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l1_lambda: float = 1e-4
    batch_count: int = 32
    batch_size: int = 0
    epochs: int = 30
    patience: int = 10
    min_delta: float = 1e-4
    stage1_max_epochs: int = 200
    seed: int = 0
    # synthetic data
    synth_t_len: int = 20000
    synth_coupling: float = 0.5
    synth_noise_sd: float = 0.05
    # analysis
    predict_offsets: str = "0"
    recurrence_layer: int = 1
    recurrence_node: int = 0
    recurrence_channel: int = -1
    recurrence_eps: float = 1e-4
    kernel_layer: int = 0
    sparsity_tau: float = 1e-3

    def resolved_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (raw strings)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {path}")
        values.update(parse_config_text(p.read_text(encoding="utf-8")))
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, raw)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.family not in ("scnn", "tcnn", "scae"):
        raise ConfigError("family", f"must be scnn, tcnn or scae, got {cfg.family!r}")
    for key in ("window", "stride", "batch_count", "patience", "stage1_max_epochs", "synth_t_len"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, "must be >= 1")
    for key in ("horizon", "hop_k", "batch_size", "epochs", "seed", "kernel_layer", "recurrence_node"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be >= 0")
    if cfg.family != "scae" and cfg.horizon < 1:
        raise ConfigError("horizon", "predictors need horizon >= 1")
    for key in ("l1_lambda", "min_delta", "synth_noise_sd", "recurrence_eps"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, "must be >= 0")
    if not 0 <= cfg.synth_coupling < 1:
        raise ConfigError("synth_coupling", "must lie in [0, 1)")
    if cfg.sparsity_tau <= 0:
        raise ConfigError("sparsity_tau", "must be > 0")
    if cfg.adam_alpha <= 0 or not 0 <= cfg.adam_beta1 < 1 or not 0 <= cfg.adam_beta2 < 1 or cfg.adam_eps <= 0:
        raise ConfigError("adam_*", "need alpha > 0, betas in [0, 1), eps > 0")
    try:
        [int(v) for v in cfg.predict_offsets.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("predict_offsets", "expected comma-separated integers") from None
