"""Run configuration: one JSON document, one section per pipeline stage."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cloudops import AugConfig
from .encoder import EncoderConfig
from .objective import ObjectiveConfig
from .scenegen import SceneConfig
from .transport import TransportConfig

SUPERVISION = ("observable", "masked_naive", "masked_jitter")


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))


@dataclass
class MaskConfig:
    ratio: float = 0.7
    block_size: float = 1.0
    jitter: float = 0.1  # std of coordinate jitter on masked points (masked_jitter)

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ValueError("ratio must be in [0, 1)")
        if not self.block_size > 0:
            raise ValueError("block_size must be positive")


@dataclass
class TrainConfig:
    supervision: str = "observable"
    epochs: int = 50
    batch_size: int = 4
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    ema_base: float = 0.996
    ema_final: float = 1.0
    num_prototypes: int = 64
    voxel_size: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.supervision not in SUPERVISION:
            raise ValueError(f"supervision must be one of {SUPERVISION}")
        if self.epochs < 0 or self.batch_size < 1 or self.num_prototypes < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and num_prototypes >= 1 required")
        if not (0 <= self.ema_base <= 1 and 0 <= self.ema_final <= 1):
            raise ValueError("EMA momenta must lie in [0, 1]")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")


@dataclass
class ProbeConfig:
    iters: int = 300
    lr: float = 0.5
    train_fraction: float = 0.8
    params: str = "teacher"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.params not in ("teacher", "student"):
            raise ValueError("params must be 'teacher' or 'student'")


SECTIONS = {
    "scene": SceneConfig,
    "views": AugConfig,
    "mask": MaskConfig,
    "encoder": EncoderConfig,
    "objective": ObjectiveConfig,
    "transport": TransportConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    views: AugConfig = field(default_factory=AugConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    num_scenes: int = 200

    def __post_init__(self):
        want = self.scene.feature_dim + 3
        if self.encoder.in_dim != want:
            self.encoder = dataclasses.replace(self.encoder, in_dim=want)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        problems: list[tuple[str, str]] = []
        if not isinstance(doc, dict):
            raise ConfigError([("", "config must be a JSON object")])
        built = {}
        for key, value in doc.items():
            if key == "num_scenes":
                if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                    problems.append(("/num_scenes", "expected a positive integer"))
                else:
                    built[key] = value
                continue
            if key not in SECTIONS:
                problems.append((f"/{key}", "unknown section"))
                continue
            section = _build_section(SECTIONS[key], value, f"/{key}", problems)
            if section is not None:
                built[key] = section
        if problems:
            raise ConfigError(problems)
        return cls(**built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError([("", f"invalid JSON at line {e.lineno}: {e.msg}")]) from e
        return cls.from_dict(doc)

    def override(self, **sections) -> "RunConfig":
        """Copy with per-section field overrides, e.g. ``train={"epochs": 3}``."""
        doc = self.to_dict()
        for name, values in sections.items():
            if name == "num_scenes":
                doc[name] = values
            else:
                doc[name].update(values)
        return RunConfig.from_dict(doc)


def _check_type(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is types.UnionType:
        return any(_check_type(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return True


def _build_section(kind, value, path, problems):
    if not isinstance(value, dict):
        problems.append((path, "expected an object"))
        return None
    hints = typing.get_type_hints(kind)
    names = {f.name for f in dataclasses.fields(kind)}
    ok = True
    for key, v in value.items():
        if key not in names:
            problems.append((f"{path}/{key}", "unknown key"))
            ok = False
        elif not _check_type(v, hints[key]):
            problems.append((f"{path}/{key}", f"expected {hints[key]}, got {type(v).__name__}"))
            ok = False
    if not ok:
        return None
    try:
        return kind(**value)
    except (TypeError, ValueError) as e:
        problems.append((path, str(e)))
        return None
