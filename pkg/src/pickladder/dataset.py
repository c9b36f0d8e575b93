"""Success-filtered trajectory datasets.

Layout of a dataset directory::

    meta/info.json          DatasetMeta, rewritten atomically after every episode
    data/shard-00000.jsonl  episode header line, then one line per frame
    data/shard-00001.jsonl  ...

Floats are written with 9 significant digits, which round-trips float32
exactly, so a write/read cycle is bit-exact.  ``meta/info.json`` records the
byte length of the open shard; reopening a dataset truncates anything past
it, so a crash mid-episode leaves no partial record behind.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import EnvConfig
from .env import ACTION_DIM, STATE_DIM

log = logging.getLogger(__name__)

FPS = 20
ROBOT_TYPE = "panda"
EPISODES_PER_SHARD = 1000
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


class RejectedEpisode(DatasetError):
    """Episode refused by validation or by the success filter."""


class ConfigMismatch(DatasetError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    episode_index: int
    frame_index: int
    state: np.ndarray
    action: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class EpisodeRecord:
    episode_index: int
    task: str
    regime: str
    placement_seed: int
    success: bool
    frame_count: int
    source_index: int = -1  # position in the generator's seed stream, for dedup on resume
    scenario: dict = field(default_factory=dict)

    def header(self) -> dict:
        d = asdict(self)
        d["type"] = "episode"
        return d


@dataclass
class TrajectoryRecord:
    episode: EpisodeRecord
    states: np.ndarray  # (T, 15) float32
    actions: np.ndarray  # (T, 7) float32

    @property
    def task(self) -> str:
        return self.episode.task

    @property
    def success(self) -> bool:
        return self.episode.success

    def __len__(self) -> int:
        return len(self.states)

    def frames(self) -> Iterator[FrameRecord]:
        for t in range(len(self.states)):
            yield FrameRecord(self.episode.episode_index, t, self.states[t], self.actions[t], t / FPS)

    def with_index(self, index: int) -> "TrajectoryRecord":
        ep = EpisodeRecord(**{**asdict(self.episode), "episode_index": index})
        return TrajectoryRecord(ep, self.states, self.actions)

    def same_payload(self, other: "TrajectoryRecord") -> bool:
        return (
            self.episode == other.episode
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )


@dataclass
class DatasetMeta:
    env_config_hash: str
    objects: list
    regime: str
    fps: int = FPS
    robot_type: str = ROBOT_TYPE
    total_episodes: int = 0
    total_frames: int = 0
    shard_index: int = 0
    shard_bytes: int = 0
    episodes_per_shard: int = EPISODES_PER_SHARD
    next_source_index: int = 0
    version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetMeta":
        return cls(**d)


def _f(x) -> str:
    s = format(float(x), ".9g")
    # keep a float literal so "-0" survives the JSON round trip as -0.0
    return s if ("." in s or "e" in s) else s + ".0"


def _floats(values) -> str:
    return "[" + ",".join(_f(v) for v in values) + "]"


def frame_line(frame: FrameRecord) -> str:
    return (
        '{"type":"frame","episode_index":%d,"frame_index":%d,"timestamp":%s,"observation.state":%s,"action":%s}\n'
        % (frame.episode_index, frame.frame_index, _f(frame.timestamp), _floats(frame.state), _floats(frame.action))
    )


def header_line(ep: EpisodeRecord) -> str:
    return json.dumps(ep.header(), sort_keys=True, separators=(",", ":")) + "\n"


def validate_record(rec: TrajectoryRecord, horizon: int = 50) -> None:
    ep = rec.episode
    if not ep.success:
        raise RejectedEpisode(f"episode {ep.episode_index}: rejected by success filter")
    states = np.asarray(rec.states)
    actions = np.asarray(rec.actions)
    if states.ndim != 2 or states.shape[1] != STATE_DIM:
        raise RejectedEpisode(f"episode {ep.episode_index}: observation.state must be {STATE_DIM}-dim, got {states.shape}")
    if actions.ndim != 2 or actions.shape[1] != ACTION_DIM:
        raise RejectedEpisode(f"episode {ep.episode_index}: action must be {ACTION_DIM}-dim, got {actions.shape}")
    if len(states) != len(actions) or len(states) != ep.frame_count:
        raise RejectedEpisode(f"episode {ep.episode_index}: frame count mismatch")
    if not 0 < ep.frame_count <= horizon:
        raise RejectedEpisode(f"episode {ep.episode_index}: frame count {ep.frame_count} outside 1..{horizon}")
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise RejectedEpisode(f"episode {ep.episode_index}: non-finite payload")


def validate_timestamps(timestamps) -> None:
    ts = np.asarray(timestamps, dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise RejectedEpisode("timestamps must increase within an episode")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def meta_path(root: Path) -> Path:
    return Path(root) / "meta" / "info.json"


def shard_path(root: Path, index: int) -> Path:
    return Path(root) / "data" / f"shard-{index:05d}.jsonl"


def load_meta(root: str | Path) -> DatasetMeta:
    p = meta_path(Path(root))
    if not p.exists():
        raise DatasetError(f"{root}: no dataset here (missing meta/info.json)")
    return DatasetMeta.from_dict(json.loads(p.read_text()))


class DatasetWriter:
    """Single writer.  Opening an existing dataset resumes it."""

    def __init__(self, root: str | Path, config: EnvConfig, regime: str, episodes_per_shard: int = EPISODES_PER_SHARD):
        self.root = Path(root)
        self.config = config
        self.horizon = config.workspace.horizon
        if meta_path(self.root).exists():
            self.meta = load_meta(self.root)
            if self.meta.env_config_hash != config.config_hash():
                raise ConfigMismatch(
                    f"{self.root}: dataset was written with env config {self.meta.env_config_hash}, "
                    f"current config is {config.config_hash()}"
                )
            self._truncate_tail()
            log.info("resuming %s at episode %d", self.root, self.meta.total_episodes)
        else:
            (self.root / "meta").mkdir(parents=True, exist_ok=True)
            (self.root / "data").mkdir(parents=True, exist_ok=True)
            self.meta = DatasetMeta(
                env_config_hash=config.config_hash(),
                objects=[o.name for o in config.objects],
                regime=regime,
                episodes_per_shard=episodes_per_shard,
            )
            shard_path(self.root, 0).touch()
            self._commit()

    def _truncate_tail(self) -> None:
        p = shard_path(self.root, self.meta.shard_index)
        if not p.exists():
            p.touch()
        size = p.stat().st_size
        if size > self.meta.shard_bytes:
            log.warning("%s: discarding %d bytes of partial episode", p, size - self.meta.shard_bytes)
            with open(p, "r+b") as f:
                f.truncate(self.meta.shard_bytes)
        elif size < self.meta.shard_bytes:
            raise DatasetError(f"{p}: shard shorter than recorded in meta ({size} < {self.meta.shard_bytes})")

    def _commit(self) -> None:
        _atomic_write(meta_path(self.root), self.meta.to_json())

    @property
    def total(self) -> int:
        return self.meta.total_episodes

    @property
    def next_source_index(self) -> int:
        return self.meta.next_source_index

    def write_episode(self, rec: TrajectoryRecord) -> int:
        """Append ``rec`` (its episode_index is reassigned) and return the
        stored index."""
        validate_record(rec, self.horizon)
        index = self.meta.total_episodes
        if index > 0 and index % self.meta.episodes_per_shard == 0 and self.meta.shard_bytes > 0:
            self.meta.shard_index += 1
            self.meta.shard_bytes = 0
            shard_path(self.root, self.meta.shard_index).touch()
        rec = rec.with_index(index)
        text = header_line(rec.episode) + "".join(frame_line(fr) for fr in rec.frames())
        data = text.encode()
        with open(shard_path(self.root, self.meta.shard_index), "ab") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        self.meta.shard_bytes += len(data)
        self.meta.total_episodes += 1
        self.meta.total_frames += len(rec)
        if rec.episode.source_index >= 0:
            self.meta.next_source_index = max(self.meta.next_source_index, rec.episode.source_index + 1)
        self._commit()
        return index


def _parse_shard(path: Path) -> list[TrajectoryRecord]:
    out: list[TrajectoryRecord] = []
    header = None
    states: list = []
    actions: list = []
    stamps: list = []

    def flush():
        if header is None:
            return
        ep = EpisodeRecord(**{k: v for k, v in header.items() if k != "type"})
        if len(states) != ep.frame_count:
            raise DatasetError(f"{path}: episode {ep.episode_index} has {len(states)} frames, header says {ep.frame_count}")
        validate_timestamps(stamps)
        out.append(TrajectoryRecord(ep, np.array(states, dtype=np.float32), np.array(actions, dtype=np.float32)))

    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if d["type"] == "episode":
                flush()
                header, states, actions, stamps = d, [], [], []
            elif d["type"] == "frame":
                if header is None or d["episode_index"] != header["episode_index"]:
                    raise DatasetError(f"{path}:{lineno}: frame outside its episode")
                if d["frame_index"] != len(states):
                    raise DatasetError(f"{path}:{lineno}: frame index out of order")
                states.append(d["observation.state"])
                actions.append(d["action"])
                stamps.append(d["timestamp"])
            else:
                raise DatasetError(f"{path}:{lineno}: unknown line type {d['type']!r}")
    flush()
    return out


def shard_files(root: str | Path) -> list[Path]:
    return sorted((Path(root) / "data").glob("shard-*.jsonl"))


def read_dataset(
    root: str | Path,
    subset: int | None = None,
    config: EnvConfig | None = None,
    shard_order: Iterable[Path] | None = None,
) -> list[TrajectoryRecord]:
    """Episodes in index order; ``subset`` keeps the first k.

    The meta hash must match ``config`` (by default the standard config with
    the dataset's object set).
    """
    root = Path(root)
    meta = load_meta(root)
    expected = (config or EnvConfig().with_objects(meta.objects)).config_hash()
    if meta.env_config_hash != expected:
        raise ConfigMismatch(
            f"{root}: recorded env config {meta.env_config_hash} does not match {expected}; "
            "the environment changed since the data was written"
        )
    episodes: list[TrajectoryRecord] = []
    for p in shard_order if shard_order is not None else shard_files(root):
        for rec in _parse_shard(Path(p)):
            if rec.episode.episode_index < meta.total_episodes:
                episodes.append(rec)
    episodes.sort(key=lambda r: r.episode.episode_index)
    if [r.episode.episode_index for r in episodes] != list(range(len(episodes))):
        raise DatasetError(f"{root}: episode indices are not contiguous")
    if len(episodes) != meta.total_episodes:
        raise DatasetError(f"{root}: meta lists {meta.total_episodes} episodes, shards hold {len(episodes)}")
    if subset is not None:
        if subset > len(episodes):
            raise DatasetError(f"{root}: asked for {subset} episodes, dataset has {len(episodes)}")
        episodes = episodes[:subset]
    return episodes


def dataset_stats(root: str | Path) -> dict:
    meta = load_meta(root)
    regimes: dict[str, int] = {}
    tasks: dict[str, int] = {}
    frames = 0
    for p in shard_files(root):
        for rec in _parse_shard(p):
            regimes[rec.episode.regime] = regimes.get(rec.episode.regime, 0) + 1
            tasks[rec.task] = tasks.get(rec.task, 0) + 1
            frames += len(rec)
    return {
        "episodes": meta.total_episodes,
        "frames": frames,
        "shards": len(shard_files(root)),
        "fps": meta.fps,
        "robot_type": meta.robot_type,
        "env_config_hash": meta.env_config_hash,
        "objects": meta.objects,
        "regimes": dict(sorted(regimes.items())),
        "tasks": dict(sorted(tasks.items())),
    }


def format_stats(stats: dict) -> str:
    lines = [
        f"episodes   {stats['episodes']}",
        f"frames     {stats['frames']}",
        f"shards     {stats['shards']}",
        f"fps        {stats['fps']}",
        f"robot      {stats['robot_type']}",
        f"config     {stats['env_config_hash']}",
        f"objects    {', '.join(stats['objects'])}",
    ]
    for regime, n in stats["regimes"].items():
        lines.append(f"regime     {regime}: {n}")
    return "\n".join(lines) + "\n"
