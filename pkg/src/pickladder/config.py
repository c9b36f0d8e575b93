"""Environment constants and their JSON form.

Everything the simulator depends on lives in :class:`EnvConfig`.  Its
:meth:`EnvConfig.config_hash` is embedded in datasets and in the recorder
handshake so that data produced under one set of constants is never mixed
with another.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

OBJECT_NAMES = ("apple", "orange", "rubiks_cube", "mug", "large_marker")

DEFAULT_RADII = {
    "apple": 0.040,
    "orange": 0.037,
    "rubiks_cube": 0.035,
    "mug": 0.045,
    "large_marker": 0.012,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkspaceConfig:
    x_half_extent: float = 0.175
    y_half_extent: float = 0.25
    table_z: float = 0.0
    gripper_home: tuple[float, float, float] = (0.0, -0.30, 0.10)
    control_hz: int = 20
    physics_substeps: int = 5
    horizon: int = 50
    translation_clamp: float = 0.02
    # Gripper travel box; keeps random policies from drifting off forever.
    gripper_bounds: tuple[tuple[float, float], ...] = ((-0.30, 0.30), (-0.45, 0.40), (0.0, 0.30))

    def __post_init__(self) -> None:
        if self.translation_clamp <= 0:
            raise ConfigError("translation_clamp must be positive")
        if self.control_hz <= 0 or self.physics_substeps <= 0 or self.horizon <= 0:
            raise ConfigError("rates and horizon must be positive")
        if len(self.gripper_home) != 3:
            raise ConfigError("gripper_home must be a 3-vector")

    @property
    def episode_seconds(self) -> float:
        return self.horizon / self.control_hz

    @property
    def physics_hz(self) -> int:
        return self.physics_substeps * self.control_hz


@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    name: str
    radius: float

    def __post_init__(self) -> None:
        if self.name not in OBJECT_NAMES:
            raise ConfigError(f"unknown object name {self.name!r}")
        if self.radius <= 0:
            raise ConfigError(f"radius of {self.name} must be positive")


@dataclass(frozen=True)
class GraspRule:
    """Thresholds of the attachment-based grasp model (meters)."""

    max_width: float = 0.08
    width_rate: float = 0.04  # per control step
    close_width: float = 0.02  # commanded width below this may attach
    capture_margin: float = 0.015  # planar slack beyond the object radius
    capture_height: float = 0.03  # max |z_gripper - table_z| for attachment
    release_width: float = 0.04  # actual width above this drops the object


def default_objects() -> tuple[ObjectSpec, ...]:
    return tuple(ObjectSpec(i, n, DEFAULT_RADII[n]) for i, n in enumerate(OBJECT_NAMES))


@dataclass(frozen=True)
class EnvConfig:
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)
    objects: tuple[ObjectSpec, ...] = field(default_factory=default_objects)
    grasp: GraspRule = field(default_factory=GraspRule)
    collision_margin: float = 0.005

    def __post_init__(self) -> None:
        ids = [o.object_id for o in self.objects]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError("object ids must be 0..n-1 and unique")
        if not 1 <= len(self.objects) <= len(OBJECT_NAMES):
            raise ConfigError("between 1 and 5 objects are supported")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_objects(self, names: Sequence[str]) -> "EnvConfig":
        """Config restricted to ``names`` (re-indexed in the given order)."""
        radii = {o.name: o.radius for o in self.objects}
        specs = tuple(ObjectSpec(i, n, radii.get(n, DEFAULT_RADII[n])) for i, n in enumerate(names))
        return replace(self, objects=specs)

    def first_objects(self, count: int) -> "EnvConfig":
        return self.with_objects([o.name for o in self.objects[:count]])

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        ws = dict(data.get("workspace", {}))
        if "gripper_home" in ws:
            ws["gripper_home"] = tuple(ws["gripper_home"])
        if "gripper_bounds" in ws:
            ws["gripper_bounds"] = tuple(tuple(b) for b in ws["gripper_bounds"])
        objects = data.get("objects")
        kwargs = {
            "workspace": WorkspaceConfig(**ws),
            "grasp": GraspRule(**data.get("grasp", {})),
        }
        if objects is not None:
            kwargs["objects"] = tuple(ObjectSpec(**o) for o in objects)
        if "collision_margin" in data:
            kwargs["collision_margin"] = data["collision_margin"]
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "EnvConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
