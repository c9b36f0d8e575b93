"""State-based PPO expert.

The expert sees privileged state (object identities and exact positions)
and is trained on :class:`~pickladder.env.BatchEnv` with one episode per
environment per rollout (the rollout length equals the episode horizon).
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import EnvConfig
from .env import ACTION_DIM, BatchEnv, EnvState, PrivilegedObs, planar_distance
from .nets import load_weights, mlp, read_manifest, save_checkpoint
from .placement import Regime
from .policies import Policy
from .rollout import Scenario, episode_seed, evaluate, sample_episode

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0

DISTANCE_COST = 0.1
TARGET_GRASP_BONUS = 2.0
SUCCESS_BONUS = 5.0
WRONG_GRASP_PENALTY = 1.0


@dataclass(frozen=True)
class PPOConfig:
    total_timesteps: int = 2_000_000
    num_envs: int = 64
    rollout_steps: int = 50
    num_minibatches: int = 2
    update_epochs: int = 4
    gamma: float = 0.8
    gae_lambda: float = 0.9
    clip_coef: float = 0.2
    ent_coef: float = 0.1
    vf_coef: float = 0.5
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    max_episode_steps: int = 50
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (256, 256)
    log_std_init: float = -0.5
    eval_every: int = 100
    eval_episodes: int = 100
    seed: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> "PPOConfig":
        return cls(**{"total_timesteps": 30_000_000, "num_envs": 1024, **overrides})

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_steps

    @property
    def num_updates(self) -> int:
        return self.total_timesteps // self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class ActorCritic(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int = ACTION_DIM, hidden: Sequence[int] = (256, 256),
                 log_std_init: float = -0.5, bias: bool = True):
        super().__init__()
        self.obs_dim, self.act_dim, self.hidden = obs_dim, act_dim, tuple(hidden)
        self.actor = mlp(obs_dim, act_dim, hidden, bias)
        self.critic = mlp(obs_dim, 1, hidden, bias)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std_init)))

    def dist(self, obs: torch.Tensor) -> torch.distributions.Normal:
        mean = self.actor(obs)
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return torch.distributions.Normal(mean, log_std.exp().expand_as(mean))

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(obs).squeeze(-1)


def compute_gae(rewards, values, bootstrap, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates.

    ``dones[t]`` marks that the episode ended with step ``t``, so neither the
    next value nor later advantages leak across it.  Arrays are (T,) or
    (T, N); ``bootstrap`` is the value after the last step.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not (r.shape == v.shape == d.shape):
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    adv = np.zeros_like(r)
    next_value = np.broadcast_to(np.asarray(bootstrap, dtype=float), r.shape[1:]).copy()
    next_adv = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_value * live - v[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = v[t]
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    a = np.asarray(adv, dtype=float)
    std = a.std()
    return (a - a.mean()) / (std if std > 0 else 1.0)


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Closed form: sum over dimensions of log(sigma) + 0.5*log(2*pi*e)."""
    return float(np.sum(np.asarray(log_std) + 0.5 * math.log(2 * math.pi * math.e)))


# -- observation and action mapping -------------------------------------------------

def obs_features(obs: PrivilegedObs, step_fraction: np.ndarray, max_width: float = 0.08) -> np.ndarray:
    """Batched privileged features for the expert network."""
    b = obs.positions.shape[0]
    target = obs.positions[np.arange(b), np.argmax(obs.one_hot, axis=1)]
    g = obs.gripper_position
    rel_t = target - g[:, :2]
    dist = planar_distance(target, g)
    rel_all = (obs.positions - g[:, None, :2]).reshape(b, -1)
    return np.concatenate(
        [
            g * 5.0,
            (obs.gripper_width / max_width)[:, None],
            rel_t * 10.0,
            dist[:, None] * 10.0,
            rel_all * 5.0,
            obs.one_hot,
            np.asarray(step_fraction, dtype=float).reshape(b, 1),
        ],
        axis=1,
    )


def feature_dim(n_objects: int) -> int:
    return 8 + 3 * n_objects


def to_env_action(raw: np.ndarray, clamp: float) -> np.ndarray:
    """Network output -> Action7: translation scaled by the clamp, rotation
    zeroed (inert), grip clipped to [-1, 1]."""
    raw = np.asarray(raw, dtype=float)
    out = np.zeros(raw.shape)
    out[..., :3] = np.clip(raw[..., :3], -1.0, 1.0) * clamp
    out[..., 6] = np.clip(raw[..., 6], -1.0, 1.0)
    return out


# -- reward -------------------------------------------------------------------------

def reward_terms(distance, attach_event, target, holding, done, target_seen):
    """Vectorized shaping shared by :func:`reward_fn` and the trainer."""
    attach_event = np.asarray(attach_event)
    r = -DISTANCE_COST * np.asarray(distance, dtype=float)
    first = (attach_event == target) & ~np.asarray(target_seen, dtype=bool)
    wrong = (attach_event >= 0) & (attach_event != target)
    r = r + TARGET_GRASP_BONUS * first - WRONG_GRASP_PENALTY * wrong
    r = r + SUCCESS_BONUS * (np.asarray(done) & (np.asarray(holding) == target))
    return r


def reward_fn(prev: EnvState, action, next_state: EnvState, target_seen: bool = False) -> float:
    """Per-step reward.  ``target_seen`` says whether the instructed object
    was already attached earlier in the episode (the +2 bonus pays once)."""
    target = next_state.instruction.target_id
    event = next_state.attached if next_state.attached != prev.attached else -1
    return float(
        reward_terms(
            next_state.target_planar_distance(), event, target, next_state.attached, next_state.done, target_seen
        )
    )


# -- update -------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, N, obs_dim)
    actions: np.ndarray  # (T, N, act_dim) raw network samples
    logprobs: np.ndarray  # (T, N)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray

    @classmethod
    def empty(cls, steps: int, envs: int, obs_dim: int, act_dim: int = ACTION_DIM) -> "RolloutBuffer":
        z = np.zeros
        return cls(z((steps, envs, obs_dim)), z((steps, envs, act_dim)), z((steps, envs)),
                   z((steps, envs)), z((steps, envs)), z((steps, envs)))

    @property
    def capacity(self) -> int:
        return self.rewards.size


def ppo_loss(net: ActorCritic, obs, actions, old_logprobs, advantages, returns, cfg: PPOConfig):
    """Clipped-surrogate loss (to minimize) and its diagnostics."""
    dist = net.dist(obs)
    logprob = dist.log_prob(actions).sum(-1)
    log_ratio = logprob - old_logprobs
    ratio = log_ratio.exp()
    surr = torch.min(ratio * advantages, ratio.clamp(1 - cfg.clip_coef, 1 + cfg.clip_coef) * advantages).mean()
    entropy = dist.entropy().sum(-1).mean()
    v_loss = ((net.value(obs) - returns) ** 2).mean()
    loss = -surr - cfg.ent_coef * entropy + cfg.vf_coef * v_loss
    with torch.no_grad():
        stats = {
            "surrogate": float(surr),
            "entropy": float(entropy),
            "value_loss": float(v_loss),
            "approx_kl": float(((ratio - 1) - log_ratio).mean()),
            "clip_fraction": float(((ratio - 1.0).abs() > cfg.clip_coef).float().mean()),
        }
    return loss, stats


def ppo_update(buffer: RolloutBuffer, advantages: np.ndarray, returns: np.ndarray, net: ActorCritic,
               optimizer: torch.optim.Optimizer, cfg: PPOConfig, generator: torch.Generator) -> dict:
    """``update_epochs`` passes of ``num_minibatches`` shuffled minibatches."""
    obs = torch.as_tensor(buffer.obs.reshape(-1, buffer.obs.shape[-1]), dtype=torch.float32)
    acts = torch.as_tensor(buffer.actions.reshape(-1, buffer.actions.shape[-1]), dtype=torch.float32)
    old_lp = torch.as_tensor(buffer.logprobs.reshape(-1), dtype=torch.float32)
    adv = torch.as_tensor(normalize_advantages(advantages.reshape(-1)), dtype=torch.float32)
    ret = torch.as_tensor(returns.reshape(-1), dtype=torch.float32)
    n = obs.shape[0]
    mb = n // cfg.num_minibatches
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.update_epochs):
        perm = torch.randperm(n, generator=generator)
        for k in range(cfg.num_minibatches):
            idx = perm[k * mb:(k + 1) * mb]
            loss, stats = ppo_loss(net, obs[idx], acts[idx], old_lp[idx], adv[idx], ret[idx], cfg)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss; diagnostics: {stats}")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            optimizer.step()
            stats["loss"] = loss.item()
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            count += 1
    return {k: v / max(count, 1) for k, v in totals.items()}


# -- policy wrapper -----------------------------------------------------------------

class PPOPolicy(Policy):
    """Deterministic (mean-action) expert for evaluation and recording."""

    name = "ppo"
    obs_kind = "privileged"

    def __init__(self, net: ActorCritic, config: EnvConfig):
        self.net = net
        self.config = config
        self._t = 0

    def reset_batch(self, seeds) -> None:
        self._t = 0

    def act_batch(self, obs: PrivilegedObs) -> np.ndarray:
        b = obs.positions.shape[0]
        frac = np.full(b, self._t / self.config.workspace.horizon)
        self._t += 1
        x = torch.as_tensor(obs_features(obs, frac, self.config.grasp.max_width), dtype=torch.float32)
        with torch.no_grad():
            mean = self.net.actor(x).numpy()
        return to_env_action(mean, self.config.workspace.translation_clamp)


def make_net(cfg: PPOConfig, n_objects: int) -> ActorCritic:
    torch.manual_seed(cfg.seed)
    return ActorCritic(feature_dim(n_objects), ACTION_DIM, cfg.hidden, cfg.log_std_init)


@dataclass
class TrainResult:
    net: ActorCritic
    curve: list[dict] = field(default_factory=list)

    def final_success(self) -> float:
        return self.curve[-1]["success"] if self.curve else float("nan")


def train(cfg: PPOConfig, scenario: Scenario | Regime, eval_seed: int = 10_000, progress=None) -> TrainResult:
    """Train an expert.  Deterministic for a given ``cfg.seed``."""
    if isinstance(scenario, Regime):
        scenario = Scenario(EnvConfig(), scenario)
    env_cfg = scenario.config
    if cfg.rollout_steps != env_cfg.workspace.horizon or cfg.max_episode_steps != env_cfg.workspace.horizon:
        raise ValueError("rollout_steps and max_episode_steps must equal the env horizon")
    n_obj = scenario.n_objects
    net = make_net(cfg, n_obj)
    result = TrainResult(net)
    if cfg.num_updates == 0:
        return result

    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    env = BatchEnv(env_cfg, cfg.num_envs)
    horizon = env_cfg.workspace.horizon
    clamp = env_cfg.workspace.translation_clamp
    buf = RolloutBuffer.empty(cfg.rollout_steps, cfg.num_envs, feature_dim(n_obj))
    episode_counter = 0
    floor = None

    def evaluate_now(update: int) -> None:
        nonlocal floor
        pol = PPOPolicy(net, env_cfg)
        outs = evaluate(pol, scenario, cfg.eval_episodes, base_seed=eval_seed)
        success = sum(o.success for o in outs) / len(outs)
        if floor is None:
            from .policies import RandomPolicy

            rnd = evaluate(RandomPolicy(env_cfg), scenario, cfg.eval_episodes, base_seed=eval_seed)
            floor = sum(o.success for o in rnd) / len(rnd)
        row = {
            "update": update,
            "timesteps": update * cfg.batch_size,
            "success": success,
            "grasp_any": sum(o.grasp_any for o in outs) / len(outs),
            "reach": sum(o.reach for o in outs) / len(outs),
        }
        result.curve.append(row)
        log.info("update %d: success %.3f", update, success)
        if progress is not None:
            progress(row)
        if update >= cfg.num_updates // 2 and success <= floor:
            warnings.warn(f"PPO has not beaten the random floor ({floor:.3f}) after half the budget", RuntimeWarning)

    for update in range(1, cfg.num_updates + 1):
        setups = [sample_episode(scenario, episode_seed(cfg.seed, episode_counter + i)) for i in range(cfg.num_envs)]
        episode_counter += cfg.num_envs
        env.reset_rows(range(cfg.num_envs), [s.placement for s in setups], [s.instruction.target_id for s in setups])
        seen = np.zeros(cfg.num_envs, dtype=bool)
        for t in range(cfg.rollout_steps):
            feats = obs_features(env.observe_privileged(), np.full(cfg.num_envs, t / horizon), env_cfg.grasp.max_width)
            x = torch.as_tensor(feats, dtype=torch.float32)
            with torch.no_grad():
                dist = net.dist(x)
                raw = dist.mean + dist.stddev * torch.randn(dist.mean.shape, generator=gen)
                logprob = dist.log_prob(raw).sum(-1)
                value = net.value(x)
            info = env.step(to_env_action(raw.numpy(), clamp))
            r = reward_terms(env.target_distance(), info["attached_event"], env.targets, env.attached, info["done"], seen)
            seen |= info["attached_event"] == env.targets
            buf.obs[t], buf.actions[t] = feats, raw.numpy()
            buf.logprobs[t], buf.values[t] = logprob.numpy(), value.numpy()
            buf.rewards[t], buf.dones[t] = r, info["done"]
        adv, ret = compute_gae(buf.rewards, buf.values, 0.0, buf.dones, cfg.gamma, cfg.gae_lambda)
        ppo_update(buf, adv, ret, net, optimizer, cfg, gen)
        if update % cfg.eval_every == 0 or update == cfg.num_updates:
            evaluate_now(update)
    return result


def save_expert(path: str | Path, result: TrainResult, cfg: PPOConfig, scenario: Scenario) -> None:
    path = Path(path)
    save_checkpoint(
        path,
        result.net,
        {
            "kind": "ppo",
            "obs_dim": result.net.obs_dim,
            "hidden": list(result.net.hidden),
            "ppo_config": cfg.to_dict(),
            "scenario": scenario.to_dict(),
            "env_config_hash": scenario.config.config_hash(),
        },
    )
    write_curve(path / "curve.csv", result.curve)


def load_expert(path: str | Path, config: EnvConfig) -> PPOPolicy:
    manifest = read_manifest(path)
    if manifest.get("kind") != "ppo":
        raise ValueError(f"{path} is not a PPO checkpoint")
    net = ActorCritic(manifest["obs_dim"], ACTION_DIM, manifest["hidden"])
    load_weights(path, net)
    return PPOPolicy(net, config)


def write_curve(path: str | Path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if not curve:
            return
        w = csv.DictWriter(f, fieldnames=list(curve[0]))
        w.writeheader()
        w.writerows(curve)
