"""Experiment configuration: one dataclass per section, strict parsing from JSON/YAML."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .allometry import AllometryConfig
from .diffusion import DiffusionConfig
from .transformer import TransformerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_patients: int = 1000
    patient_cv: float = 0.30
    dose_mg: float = 100.0
    t_end_h: float = 24.0
    n_times: int = 50
    solver: str = "rk4"
    substeps: int = 10
    n_physio: int = 2000
    n_drugs: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    parallel_ablation: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    allometry: AllometryConfig = field(default_factory=AllometryConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def portable_dict(self) -> dict:
        """Every setting except the output directory, so a run's files do not depend on where they live."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "out_dir"}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.portable_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.portable_dict(), indent=2, sort_keys=True) + "\n")
        return path


_SECTION_TYPES = {
    "data": DataConfig,
    "transformer": TransformerConfig,
    "diffusion": DiffusionConfig,
    "allometry": AllometryConfig,
    "run": RunConfig,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}; allowed: {', '.join(known)}")
    default = cls()
    values = {}
    for k, v in raw.items():
        expected = type(getattr(default, k))
        if expected is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, expected) or (expected is int and isinstance(v, bool)):
            raise ConfigError(f"{where}.{k} must be {expected.__name__}, got {v!r}")
        values[k] = v
    try:
        return cls(**values)
    except ValueError as err:
        raise ConfigError(f"invalid {where!r} section: {err}") from err


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration document must be a mapping")
    unknown = sorted(set(raw) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}; allowed: {', '.join(_SECTION_TYPES)}")
    return ExperimentConfig(**{name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTION_TYPES.items()})


def load_config(path) -> ExperimentConfig:
    """Read a JSON or YAML document; both go through the YAML loader."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    return config_from_dict(raw)
