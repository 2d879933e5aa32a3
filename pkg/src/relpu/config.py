"""Experiment configuration: INI-backed, validated, hashable.

One flat dataclass holds every knob; the on-disk form groups the fields
into sections (dataset / model / training / protocol / output). Loading
rejects unknown sections and keys by name, serialization is canonical
(fixed section and key order), and the sha256 of that canonical text
identifies a config in run manifests.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, fields, replace

from .exceptions import ConfigError

MODEL_KINDS = ("baseline", "relpu_minus", "relpu")
SUBSAMPLE_MODES = ("fps", "random")
SEGMENT_ORDERS = ("random", "identity", "strided_fps")


@dataclass
class ExperimentConfig:
    """Every experiment knob, flat; section grouping lives in SECTIONS."""

    # dataset
    num_shapes: int = 40
    model_points: int = 8192
    num_patches: int = 8
    ratio: int = 4
    data_seed: int = 0
    subsample: str = "fps"
    segment_order: str = "random"
    test_fraction: float = 0.2
    # model
    variant: str = "relpu"
    k_neighbors: int = 4
    dec_hidden: int = 32
    model_seed: int = 0
    # training
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    lr_decay: float = 0.05
    lr_decay_every: int = 20
    save_every: int = 25
    train_seed: int = 0
    # protocol
    noise_betas: tuple = (0.0, 0.01, 0.02)
    uniformity_ps: tuple = (0.004, 0.006, 0.008, 0.010, 0.012)
    eval_input_points: int = 2048
    noise_seed: int = 0
    # output
    out_dir: str = "runs/exp"


SECTIONS = {
    "dataset": ("num_shapes", "model_points", "num_patches", "ratio",
                "data_seed", "subsample", "segment_order", "test_fraction"),
    "model": ("variant", "k_neighbors", "dec_hidden", "model_seed"),
    "training": ("epochs", "batch_size", "lr", "lr_decay", "lr_decay_every",
                 "save_every", "train_seed"),
    "protocol": ("noise_betas", "uniformity_ps", "eval_input_points",
                 "noise_seed"),
    "output": ("out_dir",),
}

_DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def _parse_value(key: str, text: str):
    """Convert INI text to the type of the field's default value."""
    default = _DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            raise AssertionError("no boolean config keys defined")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(
            f"key {key!r}: cannot parse value {text!r}") from None
    return text


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field consistency; returns cfg for chaining."""
    def require(cond: bool, key: str, why: str):
        if not cond:
            raise ConfigError(f"key {key!r}: {why}")

    require(cfg.num_shapes >= 1, "num_shapes", "must be >= 1")
    require(cfg.model_points >= 1, "model_points", "must be >= 1")
    require(cfg.num_patches >= 1, "num_patches", "must be >= 1")
    require(cfg.model_points % cfg.num_patches == 0, "num_patches",
            f"must divide model_points {cfg.model_points}")
    require(cfg.ratio >= 2, "ratio", "must be >= 2")
    require((cfg.model_points // cfg.num_patches) % cfg.ratio == 0, "ratio",
            "must divide the patch size "
            f"{cfg.model_points // cfg.num_patches}")
    require(cfg.subsample in SUBSAMPLE_MODES, "subsample",
            f"must be one of {SUBSAMPLE_MODES}")
    require(cfg.segment_order in SEGMENT_ORDERS, "segment_order",
            f"must be one of {SEGMENT_ORDERS}")
    require(0.0 <= cfg.test_fraction < 1.0, "test_fraction",
            "must be in [0, 1)")
    require(cfg.variant in MODEL_KINDS, "variant",
            f"must be one of {MODEL_KINDS}")
    require(cfg.k_neighbors >= 1, "k_neighbors", "must be >= 1")
    require(cfg.dec_hidden >= 1, "dec_hidden", "must be >= 1")
    require(cfg.epochs >= 1, "epochs", "must be >= 1")
    require(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    require(cfg.lr > 0, "lr", "must be > 0")
    require(0.0 <= cfg.lr_decay < 1.0, "lr_decay", "must be in [0, 1)")
    require(cfg.lr_decay_every >= 1, "lr_decay_every", "must be >= 1")
    require(cfg.save_every >= 1, "save_every", "must be >= 1")
    require(all(b >= 0 for b in cfg.noise_betas), "noise_betas",
            "levels must be >= 0")
    require(len(cfg.noise_betas) >= 1, "noise_betas", "must not be empty")
    require(all(0 < p < 1 for p in cfg.uniformity_ps), "uniformity_ps",
            "area fractions must be in (0, 1)")
    require(len(cfg.uniformity_ps) >= 1, "uniformity_ps",
            "must not be empty")
    require(cfg.eval_input_points >= 2, "eval_input_points", "must be >= 2")
    require(bool(cfg.out_dir), "out_dir", "must not be empty")
    return cfg


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def load_config(path) -> ExperimentConfig:
    """Read and validate a config file; unknown names are errors."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        for key, text in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section {section!r}")
            values[key] = _parse_value(key, text)
    return validate_config(ExperimentConfig(**values))


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical INI text: fixed section order, fixed key order."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
    os.replace(tmp, path)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()


def apply_overrides(cfg: ExperimentConfig, epochs: int | None = None,
                    seed: int | None = None, variant: str | None = None,
                    out: str | None = None) -> ExperimentConfig:
    """CLI-style targeted overrides; seed moves both model and training
    seeds (one run identity) while the dataset seed stays put."""
    updates = {}
    if epochs is not None:
        updates["epochs"] = int(epochs)
    if seed is not None:
        updates["model_seed"] = int(seed)
        updates["train_seed"] = int(seed)
    if variant is not None:
        updates["variant"] = variant
    if out is not None:
        updates["out_dir"] = out
    if not updates:
        return cfg
    return validate_config(replace(cfg, **updates))


def schedule_lr(cfg: ExperimentConfig, epoch: int) -> float:
    """Stepped decay: the rate loses `lr_decay` of itself every
    `lr_decay_every` epochs (epoch index is 0-based)."""
    return cfg.lr * (1.0 - cfg.lr_decay) ** (epoch // cfg.lr_decay_every)
