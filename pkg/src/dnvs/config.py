"""Flat run configuration shared by every subcommand.

One `key = value` namespace covers the model, losses, optimizer, data
generation, and analysis knobs. Files are line-oriented with `#` comments;
command-line overrides use the same keys and win over file values. The
resolved config is echoed next to every output so a run can be reproduced
from its artifacts alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights
from .model import ConfigError, ModelConfig

__all__ = ["RunConfig", "parse_config", "parse_overrides", "format_config",
           "echo_config", "model_config", "loss_weights", "config_digest"]


@dataclass
class RunConfig:
    # model
    D: int = 64
    n_heads: int = 4
    L: int = 4
    p: int = 4
    r: int = 4
    decouple: bool = True
    modulation: bool = True
    placement: str = "post-attn-ln-pre-ffn"
    direction: str = "both"
    qk_mode: str = "shared"
    ln_mode: str = "branch"
    n_registers: int = 0
    k_I: int | None = 2
    k_P: int | None = 3
    tokenizer_depth: int = 1
    # losses
    lam_vgg: float = 0.5
    lam_I: float = 0.5
    lam_P: float = 0.5
    teacher_dim: int = 32
    corr_threshold: int = 10
    depth_tol: float = 0.02
    # optimizer
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 5e-2
    warmup: int = 100
    clip_norm: float = 1.0
    adam_eps: float = 1e-8
    # training protocol
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 500
    ckpt_every: int = 1000
    n_inputs: int = 2
    n_targets: int = 2
    holdout_frac: float = 0.2
    # paths and data generation
    data_dir: str = "data"
    out_dir: str = "out"
    ckpt: str = ""
    scene_count: int = 2
    view_count: int = 10
    height: int = 32
    width: int = 32
    scene_seed: int = 0
    easy: bool = True
    # analysis and benchmarking
    layer: int | None = None
    layers: str = ""
    n_pairs: int = 10000
    bins: int = 50
    zero_rgb: bool = False
    bench_warmup: int = 3
    bench_measured: int = 10
    seeds: str = "0,1,2"
    parallel: bool = False


_FIELDS = {f.name: f for f in fields(RunConfig)}


def model_config(cfg: RunConfig) -> ModelConfig:
    """Model slice of the run config; raises ConfigError on any invalid
    combination."""
    return ModelConfig(
        D=cfg.D, n_heads=cfg.n_heads, L=cfg.L, p=cfg.p, r=cfg.r,
        decouple=cfg.decouple, modulation=cfg.modulation,
        modulation_placement=cfg.placement, modulation_direction=cfg.direction,
        qk_mode=cfg.qk_mode, ln_mode=cfg.ln_mode, n_registers=cfg.n_registers,
        k_I=cfg.k_I, k_P=cfg.k_P, tokenizer_depth=cfg.tokenizer_depth)


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(lam_vgg=cfg.lam_vgg, lam_I=cfg.lam_I, lam_P=cfg.lam_P)


def _convert(key: str, raw: str, where: str):
    f = _FIELDS[key]
    kind = f.type
    try:
        if kind == "int | None":
            return None if raw.lower() == "none" else int(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"bad value {raw!r} for key {key!r} ({where}): expected {kind}") from None


def _validate(cfg: RunConfig) -> RunConfig:
    model_config(cfg)  # cross-field model invariants
    loss_weights(cfg)
    if cfg.lam_P > 0 and not cfg.decouple:
        raise ConfigError("lam_P > 0 needs decouple = true (no spatial branch "
                          "in the entangled model)")
    if cfg.lam_I > 0 and cfg.k_I is None:
        raise ConfigError("lam_I > 0 needs a k_I tap layer")
    if cfg.lam_P > 0 and cfg.k_P is None:
        raise ConfigError("lam_P > 0 needs a k_P tap layer")
    for key in ("steps", "warmup", "eval_every", "ckpt_every", "scene_count",
                "view_count", "n_pairs", "bins", "bench_warmup"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0")
    for key in ("batch_size", "n_inputs", "n_targets", "height", "width",
                "bench_measured", "corr_threshold", "teacher_dim"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not 0.0 < cfg.holdout_frac < 1.0:
        raise ConfigError("holdout_frac must lie in (0, 1)")
    if cfg.lr < 0 or cfg.weight_decay < 0 or cfg.clip_norm <= 0:
        raise ConfigError("lr/weight_decay must be >= 0 and clip_norm > 0")
    if not 0.0 <= cfg.beta1 < 1.0 or not 0.0 <= cfg.beta2 < 1.0:
        raise ConfigError("betas must lie in [0, 1)")
    return cfg


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _convert(key, raw, "override"))
    return _validate(cfg)


def parse_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then file values, then overrides; validates the result."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        for lineno, raw_line in enumerate(path.read_text().splitlines(), 1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not eq or not key:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {raw_line!r}")
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _convert(key, raw, f"{path}:{lineno}"))
    return parse_overrides(overrides or {}, base=cfg)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def echo_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    path.write_text(format_config(cfg))
    return path


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:12]
