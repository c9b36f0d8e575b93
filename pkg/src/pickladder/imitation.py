"""Behavior cloning with action chunking.

The learner regresses a chunk of ``chunk_size`` future actions from the
current observation, executes the first ``execution_horizon`` of them and
then re-predicts, discarding the unexecuted tail.

Two observation encoders exist.  ``grounded`` sees object identities (the
instructed object's relative position is an input).  ``identity_blind`` sees
the same positions as an unlabeled set: slots are put in a canonical order
by assigning them to fixed workspace anchor points, so the encoding depends
only on where objects are, never on which object is where.  Under full
randomization that makes the instruction impossible to ground.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import EnvConfig
from .dataset import TrajectoryRecord
from .env import ACTION_DIM, BatchEnv, BlindObs, PrivilegedObs
from .nets import load_weights, mlp, read_manifest, save_checkpoint
from .placement import REGION_CENTERS
from .policies import Policy
from .rollout import Scenario, evaluate, sample_episode

log = logging.getLogger(__name__)

CHUNK_SIZES = (8, 16, 32)
EXECUTION_HORIZONS = (1, 4, 8, 16)
BATCH_SIZES = (64, 128)

POS_SCALE = 10.0  # relative positions in decimetres


class ObsMode(str, enum.Enum):
    GROUNDED = "grounded"
    IDENTITY_BLIND = "identity_blind"

    @property
    def obs_kind(self) -> str:
        return "privileged" if self is ObsMode.GROUNDED else "blind"


@dataclass(frozen=True)
class BCConfig:
    chunk_size: int = 16
    execution_horizon: int = 4
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 20
    obs_mode: ObsMode = ObsMode.IDENTITY_BLIND
    hidden: tuple[int, ...] = (256, 256)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "obs_mode", ObsMode(self.obs_mode))
        if self.chunk_size not in CHUNK_SIZES:
            raise ValueError(f"chunk_size must be one of {CHUNK_SIZES}")
        if self.execution_horizon not in EXECUTION_HORIZONS:
            raise ValueError(f"execution_horizon must be one of {EXECUTION_HORIZONS}")
        if self.execution_horizon > self.chunk_size:
            raise ValueError("execution_horizon cannot exceed chunk_size")
        if self.batch_size not in BATCH_SIZES:
            raise ValueError(f"batch_size must be one of {BATCH_SIZES}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_mode"] = self.obs_mode.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BCConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# -- encoders -----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _injections(n: int, m: int) -> np.ndarray:
    """All injective maps from n slots into m anchors, as an (K, n) array."""
    return np.array(list(itertools.permutations(range(m), n)), dtype=int).reshape(-1, n)


def canonical_slot_order(positions: np.ndarray, anchors: np.ndarray = np.array(REGION_CENTERS)) -> np.ndarray:
    """Slot order induced by the minimum-cost assignment of slots to anchors.

    ``positions`` is (B, n, 2); returns (B, n) indices such that
    ``positions[b, order[b]]`` lists the slots by their anchor.  The result
    is a function of the set of positions only.
    """
    b, n, _ = positions.shape
    maps = _injections(n, len(anchors))  # (K, n)
    d = positions[:, :, None, :] - anchors[None, None, :, :]
    cost = np.einsum("bnmk,bnmk->bnm", d, d)  # (B, n, m)
    totals = cost[:, np.arange(n)[None, :], maps].sum(axis=2)  # (B, K)
    best = maps[np.argmin(totals, axis=1)]  # (B, n): anchor of each slot
    return np.argsort(best, axis=1, kind="stable")


def _gripper_block(gripper_position: np.ndarray, gripper_width: np.ndarray, max_width: float) -> np.ndarray:
    return np.concatenate([gripper_position * 5.0, (gripper_width / max_width)[:, None]], axis=1)


def encode_grounded(obs: PrivilegedObs, max_width: float = 0.08) -> np.ndarray:
    b = obs.positions.shape[0]
    g = obs.gripper_position
    rel = obs.positions - g[:, None, :2]
    target = rel[np.arange(b), np.argmax(obs.one_hot, axis=1)]
    return np.concatenate(
        [
            _gripper_block(g, obs.gripper_width, max_width),
            target * POS_SCALE,
            rel.reshape(b, -1) * POS_SCALE,
            obs.one_hot,
        ],
        axis=1,
    )


def encode_blind(obs: BlindObs, max_width: float = 0.08) -> np.ndarray:
    b = obs.positions.shape[0]
    g = obs.gripper_position
    order = canonical_slot_order(obs.positions)
    slots = np.take_along_axis(obs.positions, order[:, :, None], axis=1)
    rel = slots - g[:, None, :2]
    return np.concatenate(
        [_gripper_block(g, obs.gripper_width, max_width), rel.reshape(b, -1) * POS_SCALE, obs.one_hot], axis=1
    )


def encode(obs, mode: ObsMode, max_width: float = 0.08) -> np.ndarray:
    return encode_grounded(obs, max_width) if ObsMode(mode) is ObsMode.GROUNDED else encode_blind(obs, max_width)


def encoding_dim(n_objects: int, mode: ObsMode) -> int:
    base = 4 + 2 * n_objects + n_objects
    return base + 2 if ObsMode(mode) is ObsMode.GROUNDED else base


def action_scale(config: EnvConfig) -> np.ndarray:
    s = np.ones(ACTION_DIM)
    s[:3] = config.workspace.translation_clamp
    return s


# -- training set -------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkSample:
    observation: np.ndarray
    actions: np.ndarray  # (C, 7)
    mask: np.ndarray  # (C,) True on real steps, False on padding


@dataclass
class ChunkSet:
    observations: np.ndarray  # (N, D)
    actions: np.ndarray  # (N, C, 7), env units
    mask: np.ndarray  # (N, C)
    episode: np.ndarray  # (N,) source episode index
    t: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.observations)

    def __getitem__(self, i: int) -> ChunkSample:
        return ChunkSample(self.observations[i], self.actions[i], self.mask[i])


def chunk_indices(length: int, t: int, chunk: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices for the chunk starting at ``t`` (past-the-end steps repeat
    the last frame) and the mask of real steps."""
    idx = np.arange(t, t + chunk)
    return np.minimum(idx, length - 1), idx < length


def replay_observations(records: Sequence[TrajectoryRecord], mode: ObsMode, base: EnvConfig | None = None):
    """Re-simulate each episode from its placement seed and recorded actions
    and return per-episode (T, D) observation encodings.  Raises if the
    simulation does not reproduce the stored states."""
    out: list[np.ndarray | None] = [None] * len(records)
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault((json.dumps(r.episode.scenario, sort_keys=True), len(r)), []).append(i)
    for (scenario_json, length), members in groups.items():
        scenario = Scenario.from_dict(json.loads(scenario_json), base)
        cfg = scenario.config
        setups = [sample_episode(scenario, records[i].episode.placement_seed) for i in members]
        env = BatchEnv(cfg, len(members))
        env.reset_rows(range(len(members)), [s.placement for s in setups], [s.instruction.target_id for s in setups],
                       [s.permutation for s in setups])
        feats = []
        for t in range(length):
            states = env.state15().astype(np.float32)
            for k, i in enumerate(members):
                if not np.array_equal(states[k], records[i].states[t]):
                    raise ValueError(f"episode {records[i].episode.episode_index} does not replay at frame {t}")
            feats.append(encode(env.observe(mode.obs_kind), mode, cfg.grasp.max_width))
            env.step(np.stack([records[i].actions[t] for i in members]))
        stacked = np.stack(feats, axis=1)
        for k, i in enumerate(members):
            out[i] = stacked[k]
    return out


def build_training_set(records: Sequence[TrajectoryRecord], cfg: BCConfig, base: EnvConfig | None = None) -> ChunkSet:
    if not records:
        raise ValueError("empty dataset")
    obs = replay_observations(records, cfg.obs_mode, base)
    O, A, M, E, T = [], [], [], [], []
    for i, (r, o) in enumerate(zip(records, obs)):
        n = len(r)
        idx = np.minimum(np.arange(n)[:, None] + np.arange(cfg.chunk_size)[None, :], n - 1)
        O.append(o)
        A.append(r.actions[idx].astype(float))
        M.append((np.arange(n)[:, None] + np.arange(cfg.chunk_size)[None, :]) < n)
        E.append(np.full(n, i))
        T.append(np.arange(n))
    return ChunkSet(np.concatenate(O), np.concatenate(A), np.concatenate(M), np.concatenate(E), np.concatenate(T))


# -- model and training -------------------------------------------------------------

class ChunkNet(nn.Module):
    def __init__(self, obs_dim: int, chunk_size: int, hidden: Sequence[int] = (256, 256), bias: bool = True):
        super().__init__()
        self.obs_dim, self.chunk_size, self.hidden = obs_dim, chunk_size, tuple(hidden)
        self.body = mlp(obs_dim, chunk_size * ACTION_DIM, hidden, bias)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.body(obs).reshape(*obs.shape[:-1], self.chunk_size, ACTION_DIM)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over unpadded steps only."""
    m = mask.to(pred.dtype).unsqueeze(-1)
    return ((pred - target) ** 2 * m).sum() / (m.sum() * pred.shape[-1]).clamp_min(1.0)


@dataclass
class BCResult:
    net: ChunkNet
    cfg: BCConfig
    losses: list = field(default_factory=list)


def bc_train(cfg: BCConfig, samples: ChunkSet, config: EnvConfig | None = None) -> BCResult:
    config = config or EnvConfig()
    torch.manual_seed(cfg.seed)
    net = ChunkNet(samples.observations.shape[1], cfg.chunk_size, cfg.hidden)
    result = BCResult(net, cfg)
    if cfg.epochs == 0:
        return result
    scale = torch.as_tensor(action_scale(config), dtype=torch.float32)
    obs = torch.as_tensor(samples.observations, dtype=torch.float32)
    target = torch.as_tensor(samples.actions, dtype=torch.float32) / scale
    mask = torch.as_tensor(samples.mask)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(obs)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            loss = masked_mse(net(obs[idx]), target[idx], mask[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite BC loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        sched.step()
        result.losses.append(total / max(batches, 1))
        log.debug("epoch %d loss %.6f", epoch, result.losses[-1])
    return result


class BCPolicy(Policy):
    """Executes ``execution_horizon`` actions of each predicted chunk."""

    def __init__(self, net: ChunkNet, cfg: BCConfig, config: EnvConfig, name: str | None = None):
        self.net = net
        self.cfg = cfg
        self.config = config
        self.obs_kind = cfg.obs_mode.obs_kind
        self.name = name or f"bc-{cfg.obs_mode.value}"
        self._scale = action_scale(config)
        self._chunk = None
        self._k = 0
        self.predictions = 0

    def reset_batch(self, seeds) -> None:
        self._chunk = None
        self._k = 0
        self.predictions = 0

    def act_batch(self, obs) -> np.ndarray:
        if self._chunk is None or self._k >= self.cfg.execution_horizon:
            x = torch.as_tensor(encode(obs, self.cfg.obs_mode, self.config.grasp.max_width), dtype=torch.float32)
            with torch.no_grad():
                self._chunk = self.net(x).numpy()
            self._k = 0
            self.predictions += 1
        a = np.clip(self._chunk[:, self._k], -1.0, 1.0) * self._scale
        self._k += 1
        return a


def make_policy(result: BCResult, config: EnvConfig, name: str | None = None) -> BCPolicy:
    return BCPolicy(result.net, result.cfg, config, name)


def save_bc(path, result: BCResult, config: EnvConfig, extra: dict | None = None) -> None:
    save_checkpoint(
        path,
        result.net,
        {
            "kind": "bc",
            "obs_dim": result.net.obs_dim,
            "bc_config": result.cfg.to_dict(),
            "env_config_hash": config.config_hash(),
            "objects": [o.name for o in config.objects],
            "losses": result.losses,
            **(extra or {}),
        },
    )


def load_bc(path, config: EnvConfig | None = None) -> BCPolicy:
    manifest = read_manifest(path)
    if manifest.get("kind") != "bc":
        raise ValueError(f"{path} is not a behavior-cloning checkpoint")
    cfg = BCConfig.from_dict(manifest["bc_config"])
    config = config or EnvConfig().with_objects(manifest["objects"])
    net = ChunkNet(manifest["obs_dim"], cfg.chunk_size, cfg.hidden)
    load_weights(path, net)
    return BCPolicy(net, cfg, config)


# -- grid search --------------------------------------------------------------------

@dataclass
class GridRow:
    cfg: BCConfig
    success: float
    grasp_any: float
    reach: float
    n: int


def _tie_key(row: GridRow):
    return (-row.success, row.cfg.chunk_size, row.cfg.execution_horizon)


def grid_search(cfgs: Sequence[BCConfig], records: Sequence[TrajectoryRecord], scenario: Scenario,
                n_episodes: int = 100, base_seed: int = 1_000_003, score=None) -> tuple[BCConfig, list[GridRow]]:
    """Train and evaluate every config; best by success, ties to the smaller
    chunk and then the smaller horizon.  ``score(cfg)`` may replace training
    and evaluation (it must return a GridRow)."""
    if not cfgs:
        raise ValueError("grid search needs at least one config")
    rows = []
    for cfg in cfgs:
        if score is not None:
            rows.append(score(cfg))
            continue
        result = bc_train(cfg, build_training_set(records, cfg, scenario.config), scenario.config)
        outs = evaluate(make_policy(result, scenario.config), scenario, n_episodes, base_seed=base_seed)
        n = len(outs)
        rows.append(GridRow(cfg, sum(o.success for o in outs) / n, sum(o.grasp_any for o in outs) / n,
                            sum(o.reach for o in outs) / n, n))
    best = min(rows, key=_tie_key)
    return best.cfg, rows


def grid_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chunk_size", "execution_horizon", "batch_size", "learning_rate", "epochs", "obs_mode",
                "n", "success", "grasp_any", "reach"])
    for r in rows:
        c = r.cfg
        w.writerow([c.chunk_size, c.execution_horizon, c.batch_size, c.learning_rate, c.epochs, c.obs_mode.value,
                    r.n, f"{r.success:.4f}", f"{r.grasp_any:.4f}", f"{r.reach:.4f}"])
    return buf.getvalue()


def default_grid(base: BCConfig) -> list[BCConfig]:
    return [
        replace(base, chunk_size=c, execution_horizon=h)
        for c in CHUNK_SIZES
        for h in EXECUTION_HORIZONS
        if h <= c
    ]
