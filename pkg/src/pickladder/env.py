"""Kinematic tabletop: disc objects, a point gripper with a width, and
attachment-based grasping.

States are values.  :func:`reset` and :func:`step` never mutate their
inputs, so any number of episodes can be stepped side by side.  The
dynamics are written once, vectorized over a leading batch axis, and shared
by the single-episode API and by :class:`BatchEnv`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .config import EnvConfig
from .placement import PlacementSample, validate_sample

NO_OBJECT = -1
STATE_DIM = 15
ACTION_DIM = 7


class EnvError(RuntimeError):
    pass


class InvalidInstruction(EnvError):
    pass


class EpisodeOver(EnvError):
    pass


@dataclass(frozen=True)
class Instruction:
    target_id: int
    text: str

    @classmethod
    def for_target(cls, config: EnvConfig, target_id: int) -> "Instruction":
        if not 0 <= target_id < len(config.objects):
            raise InvalidInstruction(
                f"target_id {target_id} not in scene with {len(config.objects)} objects"
            )
        return cls(target_id, instruction_text(config.objects[target_id].name))


def instruction_text(name: str) -> str:
    return f"grasp the {name}"


@dataclass(frozen=True)
class GripperState:
    position: np.ndarray
    width: float
    velocity: np.ndarray


@dataclass(frozen=True)
class ObjectState:
    position: np.ndarray
    attached: bool


@dataclass(frozen=True, eq=False)
class EnvState:
    config: EnvConfig
    object_positions: np.ndarray  # (n, 3)
    attached: int  # object id or NO_OBJECT
    gripper: GripperState
    instruction: Instruction
    step: int
    grasp_any_latch: bool
    rng_seed: int

    @property
    def objects(self) -> tuple[ObjectState, ...]:
        return tuple(
            ObjectState(self.object_positions[i].copy(), i == self.attached)
            for i in range(len(self.object_positions))
        )

    @property
    def done(self) -> bool:
        return self.step >= self.config.workspace.horizon

    def target_planar_distance(self) -> float:
        return float(planar_distance(self.gripper.position, self.object_positions[self.instruction.target_id]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.object_positions, other.object_positions)
            and self.attached == other.attached
            and np.array_equal(self.gripper.position, other.gripper.position)
            and np.array_equal(self.gripper.velocity, other.gripper.velocity)
            and self.gripper.width == other.gripper.width
            and self.instruction == other.instruction
            and self.step == other.step
            and self.grasp_any_latch == other.grasp_any_latch
            and self.rng_seed == other.rng_seed
        )


@dataclass(frozen=True)
class StepInfo:
    attached_event: int | None  # object that attached during this step
    released_event: int | None
    holding: int | None
    planar_distances: np.ndarray = field(repr=False)
    done: bool = False


def reset(
    config: EnvConfig,
    placement: PlacementSample,
    instruction: Instruction | int,
    seed: int = 0,
) -> EnvState:
    n = len(config.objects)
    if isinstance(instruction, (int, np.integer)):
        instruction = Instruction.for_target(config, int(instruction))
    if not 0 <= instruction.target_id < n:
        raise InvalidInstruction(f"target_id {instruction.target_id} not in scene with {n} objects")
    if instruction.text != instruction_text(config.objects[instruction.target_id].name):
        raise InvalidInstruction(f"instruction text {instruction.text!r} does not match target")
    validate_sample(config, placement)

    ws = config.workspace
    pos = np.zeros((n, 3))
    pos[:, :2] = placement.positions
    pos[:, 2] = ws.table_z
    gripper = GripperState(np.array(ws.gripper_home, dtype=float), config.grasp.max_width, np.zeros(3))
    return EnvState(config, pos, NO_OBJECT, gripper, instruction, 0, False, int(seed))


def clamp_translation(d_pos: np.ndarray, limit: float) -> np.ndarray:
    """Scale the last-axis 3-vectors so their norm is at most ``limit``."""
    d = np.asarray(d_pos, dtype=float)
    norm = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
    scale = np.where(norm > limit, limit / np.where(norm > 0, norm, 1.0), 1.0)
    return d * scale[..., None]


def grip_to_width(grip: np.ndarray, max_width: float) -> np.ndarray:
    g = np.minimum(np.maximum(grip, -1.0), 1.0)
    return (g + 1.0) * 0.5 * max_width


@lru_cache(maxsize=64)
def _constants(config: EnvConfig):
    ws = config.workspace
    radii = np.array([o.radius for o in config.objects])
    lo = np.array([b[0] for b in ws.gripper_bounds], dtype=float)
    hi = np.array([b[1] for b in ws.gripper_bounds], dtype=float)
    lo[2] = max(lo[2], ws.table_z)
    fractions = np.arange(1, ws.physics_substeps + 1) / ws.physics_substeps
    return radii, lo, hi, fractions


def _dynamics(config: EnvConfig, grip_pos, width, obj_pos, attached, action):
    """One control step for a batch.

    Shapes: grip_pos (B,3), width (B,), obj_pos (B,n,3), attached (B,) int,
    action (B,7).  Returns new arrays plus per-row attach/release events
    (object id or NO_OBJECT) and planar distances after the step.
    """
    ws, rule = config.workspace, config.grasp
    radii, lo, hi, fractions = _constants(config)
    batch = grip_pos.shape[0]
    rows = np.arange(batch)

    d = clamp_translation(action[:, :3], ws.translation_clamp)
    target_width = grip_to_width(action[:, 6], rule.max_width)

    # Substep k sits at start + d * k/n (clipped to the travel box); the
    # fingers move at most width_rate/n per substep toward the target.
    path = np.minimum(np.maximum(grip_pos[:, None, :] + d[:, None, :] * fractions[None, :, None], lo), hi)
    pos = path[:, -1]
    reach = rule.width_rate * fractions[-1]
    w = width + np.minimum(np.maximum(target_width - width, -reach), reach)
    w = np.minimum(np.maximum(w, 0.0), rule.max_width)
    velocity = (pos - grip_pos) * ws.control_hz

    obj = obj_pos.copy()
    att = attached.copy()
    released = np.full(batch, NO_OBJECT)
    drop = (att != NO_OBJECT) & (w > rule.release_width)
    if drop.any():
        r = rows[drop]
        released[drop] = att[drop]
        obj[r, att[drop], 2] = ws.table_z
        att[drop] = NO_OBJECT

    dx = pos[:, None, 0] - obj[:, :, 0]
    dy = pos[:, None, 1] - obj[:, :, 1]
    planar = np.sqrt(dx * dx + dy * dy)

    attached_now = np.full(batch, NO_OBJECT)
    can_attach = (att == NO_OBJECT) & (target_width < rule.close_width)
    can_attach &= np.abs(pos[:, 2] - ws.table_z) <= rule.capture_height
    if can_attach.any():
        eligible = planar <= radii[None, :] + rule.capture_margin
        eligible &= can_attach[:, None]
        masked = np.where(eligible, planar, np.inf)
        nearest = np.argmin(masked, axis=1)
        hit = np.isfinite(masked[rows, nearest])
        attached_now[hit] = nearest[hit]
        att[hit] = nearest[hit]

    holding = att != NO_OBJECT
    if holding.any():
        obj[rows[holding], att[holding]] = pos[holding]
        dx = pos[:, None, 0] - obj[:, :, 0]
        dy = pos[:, None, 1] - obj[:, :, 1]
        planar = np.sqrt(dx * dx + dy * dy)
    return pos, velocity, w, obj, att, attached_now, released, planar


def _as_action(action: Sequence[float]) -> np.ndarray:
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have {ACTION_DIM} components, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("action contains non-finite values")
    return a


def step(state: EnvState, action: Sequence[float]) -> tuple[EnvState, StepInfo]:
    if state.done:
        raise EpisodeOver(f"episode already finished at step {state.step}")
    a = _as_action(action)
    pos, vel, w, obj, att, att_ev, rel_ev, planar = _dynamics(
        state.config,
        state.gripper.position[None],
        np.array([state.gripper.width]),
        state.object_positions[None],
        np.array([state.attached]),
        a[None],
    )
    attached = int(att[0])
    new = EnvState(
        config=state.config,
        object_positions=obj[0],
        attached=attached,
        gripper=GripperState(pos[0], float(w[0]), vel[0]),
        instruction=state.instruction,
        step=state.step + 1,
        grasp_any_latch=state.grasp_any_latch or attached != NO_OBJECT,
        rng_seed=state.rng_seed,
    )
    info = StepInfo(
        attached_event=None if att_ev[0] == NO_OBJECT else int(att_ev[0]),
        released_event=None if rel_ev[0] == NO_OBJECT else int(rel_ev[0]),
        holding=None if attached == NO_OBJECT else attached,
        planar_distances=planar[0],
        done=new.done,
    )
    return new, info


def encode_state15(state: EnvState) -> np.ndarray:
    """Proprioceptive vector: pose (xyz + identity quaternion), velocity
    (linear + zero angular + pad), gripper width."""
    g = state.gripper
    out = np.zeros(STATE_DIM)
    out[0:3] = g.position
    out[3] = 1.0
    out[7:10] = g.velocity
    out[14] = g.width
    return out


@dataclass(frozen=True)
class PrivilegedObs:
    positions: np.ndarray  # (n, 2), slot i is object i
    one_hot: np.ndarray  # (n,)
    gripper_position: np.ndarray
    gripper_width: float

    @property
    def target_id(self) -> int:
        return int(np.argmax(self.one_hot))


@dataclass(frozen=True)
class BlindObs:
    positions: np.ndarray  # (n, 2), permuted, no identities
    one_hot: np.ndarray
    gripper_position: np.ndarray
    gripper_width: float


def _one_hot(state: EnvState) -> np.ndarray:
    v = np.zeros(len(state.object_positions))
    v[state.instruction.target_id] = 1.0
    return v


def observe_privileged(state: EnvState) -> PrivilegedObs:
    return PrivilegedObs(
        state.object_positions[:, :2].copy(),
        _one_hot(state),
        state.gripper.position.copy(),
        state.gripper.width,
    )


def observe_identity_blind(state: EnvState, permutation: Sequence[int]) -> BlindObs:
    perm = np.asarray(permutation, dtype=int)
    n = len(state.object_positions)
    if perm.shape != (n,):
        raise ValueError(f"permutation has length {perm.shape[0] if perm.ndim else 0}, scene has {n} objects")
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("permutation must be a bijection on the present objects")
    return BlindObs(
        state.object_positions[perm, :2].copy(),
        _one_hot(state),
        state.gripper.position.copy(),
        state.gripper.width,
    )


def batch_obs(obs):
    """Add a leading batch axis of size one to every field of ``obs``."""
    return type(obs)(
        obs.positions[None],
        obs.one_hot[None],
        obs.gripper_position[None],
        np.array([obs.gripper_width]),
    )


def planar_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    return np.sqrt(dx * dx + dy * dy)


class BatchEnv:
    """``B`` synchronized episodes stepped together.

    All rows share one config and so one object count.  Rows are reset
    explicitly with :meth:`reset_rows`; nothing auto-resets.  Observations
    come back with a leading batch axis.
    """

    def __init__(self, config: EnvConfig, batch: int):
        self.config = config
        self.batch = batch
        n = len(config.objects)
        ws = config.workspace
        self.grip_pos = np.tile(np.array(ws.gripper_home, dtype=float), (batch, 1))
        self.grip_vel = np.zeros((batch, 3))
        self.width = np.full(batch, config.grasp.max_width)
        self.obj_pos = np.zeros((batch, n, 3))
        self.attached = np.full(batch, NO_OBJECT)
        self.latch = np.zeros(batch, dtype=bool)
        self.steps = np.zeros(batch, dtype=int)
        self.targets = np.zeros(batch, dtype=int)
        self.permutations = np.tile(np.arange(n), (batch, 1))

    def reset_rows(
        self,
        rows: Sequence[int],
        placements: Sequence[PlacementSample],
        targets: Sequence[int],
        permutations: Sequence[Sequence[int]] | None = None,
    ) -> None:
        ws = self.config.workspace
        n = len(self.config.objects)
        for k, (r, p, t) in enumerate(zip(rows, placements, targets)):
            if not 0 <= t < n:
                raise InvalidInstruction(f"target_id {t} not in scene with {n} objects")
            validate_sample(self.config, p)
            self.grip_pos[r] = ws.gripper_home
            self.grip_vel[r] = 0.0
            self.width[r] = self.config.grasp.max_width
            self.obj_pos[r, :, :2] = p.positions
            self.obj_pos[r, :, 2] = ws.table_z
            self.attached[r] = NO_OBJECT
            self.latch[r] = False
            self.steps[r] = 0
            self.targets[r] = t
            self.permutations[r] = np.arange(n) if permutations is None else permutations[k]

    def step(self, actions: np.ndarray) -> dict:
        if np.any(self.steps >= self.config.workspace.horizon):
            raise EpisodeOver("some rows are past the horizon; reset them first")
        a = np.asarray(actions, dtype=float)
        pos, vel, w, obj, att, att_ev, rel_ev, planar = _dynamics(
            self.config, self.grip_pos, self.width, self.obj_pos, self.attached, a
        )
        self.grip_pos, self.grip_vel, self.width, self.obj_pos, self.attached = pos, vel, w, obj, att
        self.latch |= att != NO_OBJECT
        self.steps += 1
        return {
            "attached_event": att_ev,
            "released_event": rel_ev,
            "planar_distances": planar,
            "done": self.steps >= self.config.workspace.horizon,
        }

    def _one_hot(self) -> np.ndarray:
        v = np.zeros((self.batch, self.obj_pos.shape[1]))
        v[np.arange(self.batch), self.targets] = 1.0
        return v

    def observe_privileged(self) -> PrivilegedObs:
        return PrivilegedObs(self.obj_pos[:, :, :2].copy(), self._one_hot(), self.grip_pos.copy(), self.width.copy())

    def observe_identity_blind(self) -> BlindObs:
        rows = np.arange(self.batch)[:, None]
        return BlindObs(
            self.obj_pos[rows, self.permutations, :2], self._one_hot(), self.grip_pos.copy(), self.width.copy()
        )

    def observe(self, kind: str):
        return self.observe_privileged() if kind == "privileged" else self.observe_identity_blind()

    def target_distance(self) -> np.ndarray:
        tgt = self.obj_pos[np.arange(self.batch), self.targets]
        return planar_distance(self.grip_pos, tgt)

    def state15(self) -> np.ndarray:
        out = np.zeros((self.batch, STATE_DIM))
        out[:, 0:3] = self.grip_pos
        out[:, 3] = 1.0
        out[:, 7:10] = self.grip_vel
        out[:, 14] = self.width
        return out

    def row_state(self, r: int, instruction: Instruction, seed: int = 0) -> EnvState:
        """Snapshot of one row as an :class:`EnvState`."""
        return EnvState(
            self.config,
            self.obj_pos[r].copy(),
            int(self.attached[r]),
            GripperState(self.grip_pos[r].copy(), float(self.width[r]), self.grip_vel[r].copy()),
            instruction,
            int(self.steps[r]),
            bool(self.latch[r]),
            seed,
        )
