"""Run configuration: strict, declarative, stamped next to every output.

A run config is a YAML (or JSON) mapping loaded into nested dataclasses.
Unknown keys are rejected rather than ignored, and the fully resolved
config is written into each command's output directory so results are
reproducible from the artifact alone.  ``FRAMEWORLD_OUT`` overrides the
output root and nothing else.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .diffusion import TrainConfig
from .distill import DistillConfig
from .errors import ConfigError
from .model import ModelConfig
from .synthscene import TrajectoryConfig

OUT_ROOT_ENV = "FRAMEWORLD_OUT"


@dataclass
class DataConfig:
    n_sequences: int = 220
    first_seed: int = 1000
    resolution: int = 64
    fov_deg: float = 60.0
    n_frames: int = 16
    template_fraction: float = 0.5  # remaining sequences use stochastic motion
    step_scale: float = 0.35
    rotation_scale: float = 0.25
    min_clearance: float = 0.4
    p_drop: float = 0.3
    jitter_sigma: float | None = None

    def trajectory(self, index: int) -> TrajectoryConfig:
        templates = ("orbit", "dolly", "pan", "arc")
        if (index % 100) / 100.0 < self.template_fraction:
            return TrajectoryConfig(
                mode="template",
                template=templates[index % len(templates)],
                n_frames=self.n_frames,
                step_scale=self.step_scale,
                rotation_scale=self.rotation_scale,
                min_clearance=self.min_clearance,
            )
        return TrajectoryConfig(
            mode="stochastic",
            n_frames=self.n_frames,
            step_scale=self.step_scale,
            rotation_scale=self.rotation_scale,
            min_clearance=self.min_clearance,
        )


@dataclass
class ServeParams:
    host: str = "127.0.0.1"
    port: int = 8000
    checkpoint: str = ""
    t_mid: int = 200
    resolution: int = 64
    keyframe_threshold: float = 0.5
    keyframe_capacity: int = 16
    max_sessions: int = 8
    static_dir: str = ""


@dataclass
class FinetuneParams:
    max_steps_cap: int = 2000  # hard ceiling on synthetic-only continuation
    steps: int = 500


@dataclass
class RunConfig:
    out_root: str = "runs"
    run_name: str = "run"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage1_steps: int = 500
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneParams = field(default_factory=FinetuneParams)
    serve: ServeParams = field(default_factory=ServeParams)

    def resolved_out_root(self) -> Path:
        return Path(os.environ.get(OUT_ROOT_ENV, self.out_root))


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        target = _nested_type(cls, name)
        if target is not None and isinstance(value, dict):
            kwargs[name] = _build_dataclass(target, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config at {path or 'top level'}: {e}") from e


_NESTED = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "distill": DistillConfig,
    "finetune": FinetuneParams,
    "serve": ServeParams,
}


def _nested_type(cls, name: str):
    if cls is RunConfig:
        return _NESTED.get(name)
    return None


def load_config(path: str | Path | None) -> RunConfig:
    """Load a run config; a missing path yields all defaults."""
    if path is None:
        return RunConfig()
    raw = Path(path).read_text()
    data = yaml.safe_load(raw) or {}
    return _build_dataclass(RunConfig, data, "")


def _plain(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    """Write the fully resolved config next to a run's outputs."""
    Path(path).write_text(yaml.safe_dump(_plain(cfg), sort_keys=False))


def config_as_json(cfg) -> str:
    return json.dumps(_plain(cfg), indent=2)
