"""Run configuration: one dataclass per section of the TOML run file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import AugmentConfig
from .flowcodec import DecodeConfig
from .losses import LossWeights
from .nets import DiscriminatorSpec, GeneratorSpec, SegmenterSpec
from .perlinimg import PerlinConfig
from .synthmask import DeformConfig, EllipseConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@dataclass(frozen=True)
class Ablation:
    adv: bool = True
    perlin: bool = True
    m2i: bool = True
    cyc: bool = True

    def __post_init__(self):
        if not (self.cyc or self.adv or self.perlin or self.m2i):
            raise ValueError("all loss groups disabled: nothing to train")
        if not self.cyc and not (self.adv or self.perlin or self.m2i):
            raise ValueError("cycle loss disabled with no other loss enabled")

    def without(self, names) -> "Ablation":
        names = [n.strip() for n in names if n.strip()]
        unknown = set(names) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ValueError(f"unknown ablation flag(s): {sorted(unknown)}")
        return dataclasses.replace(self, **{n: False for n in names})


@dataclass(frozen=True)
class TrainConfig:
    epochs_const: int = 100
    epochs_decay: int = 100
    lr: float = 0.0008
    weight_decay: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    pool_size: int = 50
    seed: int = 0
    crop: int = 224
    select_every: int = 5          # epochs between selection checkpoints
    max_steps: int | None = None   # stop early, for smoke runs
    min_mask_area: int = 15
    ablation: Ablation = Ablation()

    def __post_init__(self):
        for name in ("epochs_const", "lr", "batch_size", "crop", "select_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs_decay < 0 or self.weight_decay < 0 or self.pool_size < 0:
            raise ValueError("epochs_decay, weight_decay and pool_size must be >= 0")
        if self.crop % 8:
            raise ValueError("crop must be divisible by 8")

    @property
    def epochs(self) -> int:
        return self.epochs_const + self.epochs_decay


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    losses: LossWeights = LossWeights()
    ellipse: EllipseConfig = EllipseConfig()
    deform: DeformConfig = DeformConfig()
    perlin: PerlinConfig = PerlinConfig()
    augment: AugmentConfig = AugmentConfig()
    generator: GeneratorSpec = GeneratorSpec()
    segmenter: SegmenterSpec = SegmenterSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    decode: DecodeConfig = DecodeConfig()
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "train": TrainConfig, "losses": LossWeights, "ellipse": EllipseConfig, "deform": DeformConfig,
    "perlin": PerlinConfig, "augment": AugmentConfig, "generator": GeneratorSpec,
    "segmenter": SegmenterSpec, "discriminator": DiscriminatorSpec, "decode": DecodeConfig,
}

# TOML nesting -> flat section names
_ALIASES = {("synth", "ellipse"): "ellipse", ("synth", "deform"): "deform", ("synth", "perlin"): "perlin",
            ("nets", "generator"): "generator", ("nets", "segmenter"): "segmenter",
            ("nets", "discriminator"): "discriminator"}


def _build(cls, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ValueError(f"unknown key(s) for [{cls.__name__}]: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for k, v in values.items():
        if k == "ablation" and isinstance(v, dict):
            v = Ablation(**v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    flat: dict[str, dict] = {}
    for key, value in d.items():
        if key in ("synth", "nets"):
            for sub, sv in value.items():
                if (key, sub) not in _ALIASES:
                    raise ValueError(f"unknown section [{key}.{sub}]")
                flat[_ALIASES[(key, sub)]] = sv
        else:
            flat[key] = value
    kwargs: dict[str, Any] = {}
    for name, values in flat.items():
        if name == "data":
            kwargs["data"] = dict(values)
        elif name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], values)
        else:
            raise ValueError(f"unknown section [{name}]")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    if path.suffix == ".json":
        return config_from_dict(json.loads(path.read_text()))
    return config_from_dict(load_toml(path))


def config_to_toml(cfg: RunConfig) -> str:
    """Render ``cfg`` back to TOML (enough for the value types used here)."""
    d = cfg.to_dict()
    lines: list[str] = []

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, float) and v == float("inf"):
            return "inf"
        if v is None:
            raise ValueError("None cannot be written to TOML")
        return repr(v)

    for section, values in d.items():
        scalars = {k: v for k, v in values.items() if not isinstance(v, dict) and v is not None}
        tables = {k: v for k, v in values.items() if isinstance(v, dict)}
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in scalars.items()]
        lines.append("")
        for k, v in tables.items():
            lines.append(f"[{section}.{k}]")
            lines += [f"{kk} = {fmt(vv)}" for kk, vv in v.items()]
            lines.append("")
    return "\n".join(lines)
