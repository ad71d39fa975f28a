"""JSON pipeline configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .features import TessellationConfig
from .fesolver import MaterialRanges
from .geometry import GeometryError, PhantomSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    n_sims: int = 100
    displacement_scale: float = 0.005
    load_steps: int = 4


@dataclass(frozen=True)
class InferenceConfig:
    points_per_pass: int = 512
    passes: Optional[int] = None
    latency_repeats: int = 5


SECTIONS = {
    "phantom": PhantomSpec,
    "materials": MaterialRanges,
    "simulation": SimulationConfig,
    "training": TrainConfig,
    "tessellation": TessellationConfig,
    "inference": InferenceConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    materials: MaterialRanges = field(default_factory=MaterialRanges)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    tessellation: TessellationConfig = field(default_factory=TessellationConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    source: str = ""

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        """Apply a ``--seed`` override to the global, phantom and training seeds."""
        if seed is None:
            return self
        return dataclasses.replace(
            self, seed=int(seed), phantom=dataclasses.replace(self.phantom, seed=int(seed)),
            training=dataclasses.replace(self.training, seed=int(seed)))

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            obj = getattr(self, name)
            out[name] = obj.to_dict() if hasattr(obj, "to_dict") else _plain(dataclasses.asdict(obj))
        return out


def _plain(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _build(name: str, cls, data, source: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: section '{name}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) in '{name}': {', '.join(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) and k != "network" else v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, GeometryError) as exc:
        raise ConfigError(f"{source}: invalid '{name}' section: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: JSON parse error: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"{source}: unknown top-level field(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"{source}: 'seed' must be an integer, got {seed!r}")
    # sections without their own seed inherit the global one
    sections = {name: dict(raw.get(name, {})) if isinstance(raw.get(name, {}), dict) else raw[name]
                for name in SECTIONS}
    for name in ("phantom", "training"):
        if isinstance(sections[name], dict):
            sections[name].setdefault("seed", seed)
    kwargs = {name: _build(name, cls, sections[name], source) for name, cls in SECTIONS.items()
              if name in raw or name in ("phantom", "training")}
    return PipelineConfig(seed=seed, source=source, **kwargs)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
