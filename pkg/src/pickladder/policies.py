"""Scripted reference policies.

A policy is a small stateful object.  ``reset_batch(seeds)`` starts one
episode per row and ``act_batch(obs)`` maps a batched observation to a
``(B, 7)`` action array.  ``reset``/``act`` are the single-episode forms
and go through the same batched code.  ``obs_kind`` tells the runner which
observation to build ("privileged" or "blind").

All but :class:`RandomPolicy` share one reach-and-grasp controller and
differ only in which position they go for, which is what lets their
success rates be worked out by hand.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import EnvConfig
from .env import ACTION_DIM, BlindObs, PrivilegedObs, batch_obs
from .placement import REGION_CENTERS, default_assignment

DESCEND_RADIUS = 0.03  # planar distance at which the gripper starts descending
CLOSE_RADIUS = 0.01  # planar distance at which the gripper closes
GRASP_HEIGHT = 0.01  # above the table


class Policy:
    name = "policy"
    obs_kind = "blind"

    def reset_batch(self, seeds: Sequence[int]) -> None:
        pass

    def act_batch(self, obs) -> np.ndarray:
        raise NotImplementedError

    def reset(self, seed: int) -> None:
        self.reset_batch([seed])

    def act(self, obs) -> np.ndarray:
        return self.act_batch(batch_obs(obs))[0]


def reach_and_grasp(config: EnvConfig, gripper_pos: np.ndarray, target_xy: np.ndarray) -> np.ndarray:
    """Move at full speed toward ``target_xy``, drop to grasp height once
    close, and close the fingers when directly above it.

    Batched: ``gripper_pos`` is (B, 3), ``target_xy`` is (B, 2).
    """
    ws = config.workspace
    clamp = ws.translation_clamp
    v = np.asarray(target_xy, dtype=float) - gripper_pos[:, :2]
    dist = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1])
    scale = np.where(dist > clamp, clamp / np.where(dist > 0, dist, 1.0), 1.0)
    action = np.zeros((len(v), ACTION_DIM))
    action[:, :2] = v * scale[:, None]
    near = dist <= DESCEND_RADIUS
    action[:, 2] = np.where(near, ws.table_z + GRASP_HEIGHT - gripper_pos[:, 2], 0.0)
    low = np.abs(gripper_pos[:, 2] - ws.table_z) <= config.grasp.capture_height
    action[:, 6] = np.where((dist <= CLOSE_RADIUS) & low, -1.0, 1.0)
    return action


def nearest_slot(positions: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Index of the slot nearest ``point``; positions (B, n, 2), point (B, 2)."""
    dx = positions[:, :, 0] - point[:, None, 0]
    dy = positions[:, :, 1] - point[:, None, 1]
    return np.argmin(dx * dx + dy * dy, axis=1)


def _take(positions: np.ndarray, slots: np.ndarray) -> np.ndarray:
    return positions[np.arange(len(slots)), slots]


class OraclePolicy(Policy):
    """Privileged expert: goes straight for the instructed object."""

    name = "oracle"
    obs_kind = "privileged"

    def __init__(self, config: EnvConfig):
        self.config = config

    def act_batch(self, obs: PrivilegedObs) -> np.ndarray:
        target = np.argmax(obs.one_hot, axis=1)
        return reach_and_grasp(self.config, obs.gripper_position, _take(obs.positions, target))


class ShortcutPolicy(Policy):
    """Identity-blind policy that has memorized where each object usually is.

    It heads for the observed slot nearest to the memorized region centroid
    of the instructed object, whatever object actually sits there.
    """

    name = "shortcut"
    obs_kind = "blind"

    def __init__(self, config: EnvConfig, region_of: Sequence[int] | None = None):
        region_of = default_assignment(config) if region_of is None else region_of
        if len(region_of) != len(config.objects):
            raise ValueError("need one memorized region per object")
        self.config = config
        self.region_of = tuple(int(r) for r in region_of)
        self._centroids = np.array([REGION_CENTERS[r] for r in self.region_of])

    def act_batch(self, obs: BlindObs) -> np.ndarray:
        centroid = self._centroids[np.argmax(obs.one_hot, axis=1)]
        slot = nearest_slot(obs.positions, centroid)
        return reach_and_grasp(self.config, obs.gripper_position, _take(obs.positions, slot))


class NearestPolicy(Policy):
    """Ignores the instruction and grasps whatever is closest."""

    name = "nearest"
    obs_kind = "blind"

    def __init__(self, config: EnvConfig):
        self.config = config

    def act_batch(self, obs: BlindObs) -> np.ndarray:
        slot = nearest_slot(obs.positions, obs.gripper_position[:, :2])
        return reach_and_grasp(self.config, obs.gripper_position, _take(obs.positions, slot))


def random_act(rng: np.random.Generator, clamp: float) -> np.ndarray:
    """Translation uniform in the clamp ball, grip uniform in [-1, 1]."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = clamp * rng.random() ** (1.0 / 3.0)
    action = np.zeros(ACTION_DIM)
    action[:3] = direction * radius
    action[6] = rng.uniform(-1.0, 1.0)
    return action


class RandomPolicy(Policy):
    name = "random"
    obs_kind = "blind"

    def __init__(self, config: EnvConfig):
        self.config = config
        self.rngs = [np.random.default_rng(0)]

    def reset_batch(self, seeds: Sequence[int]) -> None:
        self.rngs = [np.random.default_rng(s) for s in seeds]

    def act_batch(self, obs=None) -> np.ndarray:
        clamp = self.config.workspace.translation_clamp
        return np.stack([random_act(r, clamp) for r in self.rngs])


SCRIPTED = ("oracle", "shortcut", "nearest", "random")


def make_scripted(name: str, config: EnvConfig, region_of: Sequence[int] | None = None) -> Policy:
    if name == "oracle":
        return OraclePolicy(config)
    if name == "shortcut":
        return ShortcutPolicy(config, region_of)
    if name == "nearest":
        return NearestPolicy(config)
    if name == "random":
        return RandomPolicy(config)
    raise ValueError(f"unknown scripted policy {name!r}; choose from {', '.join(SCRIPTED)}")
