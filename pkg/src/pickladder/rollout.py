"""Episode sampling and rollout.

An episode is a pure function of ``(scenario, episode_seed)`` and the
policy, and ``episode_seed`` is derived from ``(base_seed, index)``.  The
result therefore does not depend on which worker runs which episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .config import EnvConfig
from .env import BatchEnv, EnvState, Instruction, encode_state15, observe_identity_blind, observe_privileged, reset, step
from .metrics import REACH_RADIUS, EpisodeOutcome, episode_outcome
from .placement import (
    PairingSplit,
    Phase,
    PlacementSample,
    Regime,
    sample_compositional,
    sample_placement,
)


def episode_seed(base_seed: int, index: int) -> int:
    """64-bit seed for episode ``index`` of a run seeded with ``base_seed``."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class Scenario:
    """How episodes are drawn: scene, regime and optional pairing split."""

    config: EnvConfig = field(default_factory=EnvConfig)
    regime: Regime = Regime.SMALL_JITTER
    split: PairingSplit | None = None
    phase: Phase | None = None

    def __post_init__(self) -> None:
        if (self.split is None) != (self.phase is None):
            raise ValueError("split and phase go together")

    @property
    def n_objects(self) -> int:
        return len(self.config.objects)

    @property
    def phase_label(self) -> str:
        if self.phase is None:
            return ""
        return "ID" if self.phase is Phase.TRAIN else "OOD"

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "objects": [o.name for o in self.config.objects],
            "split": None if self.split is None else self.split.to_dict(),
            "phase": None if self.phase is None else self.phase.value,
        }

    @classmethod
    def from_dict(cls, d: dict, base: EnvConfig | None = None) -> "Scenario":
        base = base or EnvConfig()
        config = base.with_objects(d["objects"]) if "objects" in d else base
        split = None if d.get("split") is None else PairingSplit.from_dict(d["split"])
        phase = None if d.get("phase") is None else Phase(d["phase"])
        return cls(config, Regime.parse(d["regime"]), split, phase)

    def with_phase(self, phase: Phase) -> "Scenario":
        return replace(self, phase=phase)


@dataclass(frozen=True)
class EpisodeSetup:
    placement: PlacementSample
    instruction: Instruction
    permutation: np.ndarray
    policy_seed: int
    seed: int


def sample_episode(scenario: Scenario, seed: int) -> EpisodeSetup:
    rng = np.random.default_rng(seed)
    cfg = scenario.config
    n = len(cfg.objects)
    if scenario.split is not None and scenario.phase is Phase.EVAL:
        target = int(rng.integers(n))
        placement = sample_compositional(cfg, scenario.split, Phase.EVAL, scenario.regime, rng, target)
    elif scenario.split is not None:
        placement = sample_compositional(cfg, scenario.split, Phase.TRAIN, scenario.regime, rng)
        target = int(rng.integers(n))
    else:
        placement = sample_placement(cfg, scenario.regime, rng)
        target = int(rng.integers(n))
    placement = replace(placement, seed=seed)
    permutation = rng.permutation(n)
    policy_seed = int(rng.integers(2**63))
    return EpisodeSetup(placement, Instruction.for_target(cfg, target), permutation, policy_seed, seed)


def observe(policy, state: EnvState, setup: EpisodeSetup):
    if policy.obs_kind == "privileged":
        return observe_privileged(state)
    return observe_identity_blind(state, setup.permutation)


@dataclass
class Episode:
    setup: EpisodeSetup
    states: list[EnvState]
    actions: np.ndarray  # (T, 7) float32, exactly what the env executed
    states15: np.ndarray  # (T, 15) float32, state before each action

    @property
    def final(self) -> EnvState:
        return self.states[-1]

    @property
    def success(self) -> bool:
        return self.final.attached == self.final.instruction.target_id

    @property
    def task(self) -> str:
        return self.setup.instruction.text


def run_episode(policy, scenario: Scenario, seed: int) -> Episode:
    setup = sample_episode(scenario, seed)
    state = reset(scenario.config, setup.placement, setup.instruction, seed)
    policy.reset(setup.policy_seed)
    states = [state]
    actions, states15 = [], []
    while not state.done:
        # float32 so that recorded actions replay bit-exactly
        a = np.asarray(policy.act(observe(policy, state, setup)), dtype=np.float32)
        states15.append(encode_state15(state).astype(np.float32))
        actions.append(a)
        state, _ = step(state, a)
        states.append(state)
    return Episode(setup, states, np.array(actions), np.array(states15))


def replay(scenario: Scenario, seed: int, actions: np.ndarray) -> EnvState:
    """Re-run recorded actions from the episode's initial placement."""
    setup = sample_episode(scenario, seed)
    state = reset(scenario.config, setup.placement, setup.instruction, seed)
    for a in actions:
        state, _ = step(state, a)
    return state


def rollout_batch(policy, scenario: Scenario, setups: list[EpisodeSetup], record: bool = False) -> dict:
    """Run ``setups`` in lockstep.  Returns final env arrays and, with
    ``record``, the (B, T, 15) states and (B, T, 7) actions."""
    env = BatchEnv(scenario.config, len(setups))
    env.reset_rows(
        range(len(setups)),
        [s.placement for s in setups],
        [s.instruction.target_id for s in setups],
        [s.permutation for s in setups],
    )
    policy.reset_batch([s.policy_seed for s in setups])
    states15, actions = [], []
    for _ in range(scenario.config.workspace.horizon):
        a = np.asarray(policy.act_batch(env.observe(policy.obs_kind)), dtype=np.float32)
        if record:
            states15.append(env.state15().astype(np.float32))
            actions.append(a)
        env.step(a)
    out = {"env": env}
    if record:
        out["states15"] = np.stack(states15, axis=1)
        out["actions"] = np.stack(actions, axis=1)
    return out


def evaluate(
    policy,
    scenario: Scenario,
    n_episodes: int,
    base_seed: int = 0,
    start: int = 0,
    labels: dict | None = None,
    batch_size: int = 1000,
) -> list[EpisodeOutcome]:
    """Score ``n_episodes`` episodes with seeds ``(base_seed, start + i)``.

    Episodes run in lockstep batches; results are identical to calling
    :func:`run_episode` one by one.
    """
    labels = dict(labels or {})
    labels.setdefault("regime", scenario.regime.value)
    labels.setdefault("policy", getattr(policy, "name", type(policy).__name__))
    labels.setdefault("phase", scenario.phase_label)
    labels.setdefault("n_objects", scenario.n_objects)
    out: list[EpisodeOutcome] = []
    for lo in range(start, start + n_episodes, batch_size):
        idx = range(lo, min(lo + batch_size, start + n_episodes))
        setups = [sample_episode(scenario, episode_seed(base_seed, i)) for i in idx]
        env = rollout_batch(policy, scenario, setups)["env"]
        dist = env.target_distance()
        for r, s in enumerate(setups):
            out.append(
                EpisodeOutcome(
                    success=bool(env.attached[r] == env.targets[r]),
                    grasp_any=bool(env.latch[r]),
                    reach=bool(dist[r] <= REACH_RADIUS),
                    episode_seed=s.seed,
                    instruction=s.instruction.text,
                    **labels,
                )
            )
    return out


def iter_episodes(policy, scenario: Scenario, base_seed: int, start: int = 0) -> Iterable[tuple[int, Episode]]:
    i = start
    while True:
        yield i, run_episode(policy, scenario, episode_seed(base_seed, i))
        i += 1
