"""Experiment configuration: one TOML file with per-command sections.

The effective configuration (defaults applied) is written next to every run so
any run can be reproduced from its own artifact. Command-line flags override
file values; unknown keys are rejected before anything starts.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "ADVNORM_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    preset: str = "severe_shift_k2"
    subjects_per_domain: int = 10
    shape: tuple[int, int, int] = (48, 48, 48)
    deform_amplitude: float = 2.0
    seed: int = 0
    dir: str = ""                 # when set, synth writes / train reads volumes here
    format: str = "raw"           # on-disk volume format: raw | nifti


@dataclass
class ModelConfig:
    base_features: int = 8
    depth: int = 3
    disc_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    init_seed: int = 0


@dataclass
class EvalConfig:
    split: str = "test"
    bias_alpha: float = 0.0                    # fixed test-time degradation
    bias_alphas: tuple[float, ...] = (0.3, 0.5, 0.7, 0.9)
    disc_patches_per_domain: int = 64
    jsd_bins: int = 256
    pearson_slice: int = -1                    # -1: whole foreground, else z slice


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "run"

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV, "")
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig,
             "eval": EvalConfig}


def _build_section(cls, values: dict, section: str):
    allowed = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"invalid section [{section}]: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, raw.pop(name, {}), name)
    output_dir = raw.pop("output_dir", "run")
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    return ExperimentConfig(output_dir=str(output_dir), **sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    return config_from_dict(raw)


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r} to TOML")


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"output_dir = {_toml_scalar(cfg.output_dir)}", ""]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply dotted-key overrides like {'train.lam': 0.5, 'output_dir': 'x'}."""
    raw = {
        "output_dir": cfg.output_dir,
        **{name: asdict(getattr(cfg, name)) for name in _SECTIONS},
    }
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            raw[section][key] = value
        else:
            if dotted != "output_dir":
                raise ConfigError(f"unknown top-level option {dotted!r}")
            raw[dotted] = value
    return config_from_dict(raw)
