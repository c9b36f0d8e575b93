import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from pickladder.config import EnvConfig
from pickladder.env import BlindObs
from pickladder.imitation import (
    BCConfig,
    BCPolicy,
    ChunkNet,
    ChunkSet,
    GridRow,
    ObsMode,
    action_scale,
    bc_train,
    build_training_set,
    canonical_slot_order,
    chunk_indices,
    default_grid,
    encode_blind,
    encoding_dim,
    grid_csv,
    grid_search,
    load_bc,
    make_policy,
    masked_mse,
    save_bc,
)
from pickladder.placement import REGION_CENTERS, Regime
from pickladder.policies import OraclePolicy
from pickladder.recorder import record_in_process
from pickladder.dataset import read_dataset
from pickladder.rollout import Scenario, episode_seed, evaluate, rollout_batch, sample_episode

CFG = EnvConfig()
SC = Scenario(CFG, Regime.SMALL_JITTER)


@pytest.fixture(scope="module")
def demos(tmp_path_factory):
    root = tmp_path_factory.mktemp("demos")
    record_in_process(OraclePolicy(CFG), SC, root, 8, base_seed=3)
    return read_dataset(root)


def test_chunk_near_episode_end():
    idx, mask = chunk_indices(50, 40, 16)
    assert mask.sum() == 10 and (~mask).sum() == 6
    assert idx.tolist() == list(range(40, 50)) + [49] * 6


@given(st.integers(1, 60), st.data(), st.sampled_from([8, 16, 32]))
def test_chunk_mask_counts(length, data, chunk):
    t = data.draw(st.integers(0, length - 1))
    idx, mask = chunk_indices(length, t, chunk)
    assert mask.sum() == min(chunk, length - t)
    assert idx.max() <= length - 1


def test_training_set_shapes_and_targets(demos):
    blind = build_training_set(demos, BCConfig(chunk_size=16, obs_mode=ObsMode.IDENTITY_BLIND))
    grounded = build_training_set(demos, BCConfig(chunk_size=16, obs_mode=ObsMode.GROUNDED))
    n = sum(len(r) for r in demos)
    assert len(blind) == len(grounded) == n
    assert blind.observations.shape[1] == encoding_dim(5, ObsMode.IDENTITY_BLIND)
    assert grounded.observations.shape[1] == encoding_dim(5, ObsMode.GROUNDED)
    # same supervision, different inputs
    np.testing.assert_array_equal(blind.actions, grounded.actions)
    np.testing.assert_array_equal(blind.mask, grounded.mask)
    s = blind[40]
    assert s.actions.shape == (16, 7) and s.mask.sum() == 10
    np.testing.assert_array_equal(s.actions[0], demos[0].actions[40])


def test_tampered_record_does_not_replay(demos):
    bad = demos[0].states.copy()
    bad[10, 0] += 0.01
    rec = replace(demos[0], states=bad)
    with pytest.raises(ValueError, match="replay"):
        build_training_set([rec], BCConfig())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        build_training_set([], BCConfig())


@pytest.mark.parametrize("kw", [{"chunk_size": 12}, {"execution_horizon": 3}, {"batch_size": 100},
                                {"chunk_size": 8, "execution_horizon": 16}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BCConfig(**kw)


def test_default_grid():
    grid = default_grid(BCConfig())
    assert len(grid) == 11 and all(c.execution_horizon <= c.chunk_size for c in grid)


@given(st.integers(0, 2**31 - 1))
def test_masked_loss_ignores_padding(seed):
    g = torch.Generator().manual_seed(seed)
    pred, target = torch.randn(4, 8, 7, generator=g), torch.randn(4, 8, 7, generator=g)
    mask = torch.rand(4, 8, generator=g) > 0.3
    mask[:, 0] = True
    noise = torch.randn(4, 8, 7, generator=g) * (~mask).unsqueeze(-1)
    a = masked_mse(pred, target, mask)
    b = masked_mse(pred + noise, target - noise, mask)
    assert torch.allclose(a, b)
    ref = ((pred - target) ** 2)[mask].mean()
    assert torch.allclose(a, ref)


def test_masked_loss_gradient():
    g = torch.Generator().manual_seed(0)
    pred = torch.randn(3, 8, 7, dtype=torch.float64, generator=g, requires_grad=True)
    target = torch.randn(3, 8, 7, dtype=torch.float64, generator=g)
    mask = torch.rand(3, 8, generator=g) > 0.5
    assert torch.autograd.gradcheck(lambda p: masked_mse(p, target, mask), (pred,))


def test_learns_constant_actions():
    rng = np.random.default_rng(0)
    n, c = 512, 8
    act = np.array([0.01, -0.005, 0.0, 0.0, 0.0, 0.0, 0.5])
    samples = ChunkSet(rng.normal(size=(n, 10)), np.broadcast_to(act, (n, c, 7)).copy(), np.ones((n, c), bool),
                       np.zeros(n, int), np.zeros(n, int))
    res = bc_train(BCConfig(chunk_size=c, execution_horizon=1, batch_size=64, epochs=150), samples, CFG)
    assert res.losses[-1] < 1e-4
    assert res.losses[-1] < res.losses[0]


def test_zero_epochs_is_initialization(demos):
    cfg = BCConfig(epochs=0, seed=5)
    ts = build_training_set(demos[:2], cfg)
    res = bc_train(cfg, ts, CFG)
    torch.manual_seed(5)
    fresh = ChunkNet(ts.observations.shape[1], cfg.chunk_size, cfg.hidden)
    for a, b in zip(res.net.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)
    assert res.losses == []


class StepNet(ChunkNet):
    """Chunk whose k-th action has x = k / 100, to expose which entries run."""

    def forward(self, obs):
        out = torch.zeros(obs.shape[0], self.chunk_size, 7)
        out[:, :, 0] = torch.arange(self.chunk_size) / 100.0
        return out


@pytest.mark.parametrize("chunk,horizon", [(16, 4), (16, 16), (16, 1), (8, 8), (32, 4)])
def test_receding_horizon(chunk, horizon):
    cfg = BCConfig(chunk_size=chunk, execution_horizon=horizon)
    net = StepNet(encoding_dim(5, cfg.obs_mode), chunk)
    pol = BCPolicy(net, cfg, CFG)
    setups = [sample_episode(SC, episode_seed(0, i)) for i in range(3)]
    out = rollout_batch(pol, SC, setups, record=True)
    assert pol.predictions == math.ceil(50 / horizon)
    xs = out["actions"][0, :, 0]
    expect = (np.arange(50) % horizon) / 100.0 * CFG.workspace.translation_clamp
    np.testing.assert_allclose(xs, expect, rtol=1e-6)


def anchor_order_oracle(pos):
    anchors = np.array(REGION_CENTERS)
    cost = ((pos[:, None, :] - anchors[None]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    return rows[np.argsort(cols)]


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_canonical_order_matches_assignment_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pos = rng.uniform([-0.175, -0.25], [0.175, 0.25], size=(n, 2))
    assert canonical_slot_order(pos[None])[0].tolist() == anchor_order_oracle(pos).tolist()


@given(st.integers(0, 2**31 - 1))
def test_blind_encoding_ignores_slot_permutation(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform([-0.175, -0.25], [0.175, 0.25], size=(1, 5, 2))
    perm = rng.permutation(5)
    kw = dict(one_hot=np.eye(5)[[2]], gripper_position=np.array([[0.0, -0.3, 0.1]]), gripper_width=np.array([0.08]))
    a = encode_blind(BlindObs(pos, **kw))
    b = encode_blind(BlindObs(pos[:, perm], **kw))
    np.testing.assert_allclose(a, b)


def test_action_scale():
    s = action_scale(CFG)
    assert s[:3].tolist() == [0.02] * 3 and s[3:].tolist() == [1.0] * 4


def row(c, h, success):
    return GridRow(BCConfig(chunk_size=c, execution_horizon=h), success, success, success, 100)


def test_grid_search_argmax_and_ties():
    scores = {(8, 1): 0.5, (8, 4): 0.7, (16, 4): 0.7, (16, 16): 0.9, (32, 16): 0.9, (32, 4): 0.2}
    cfgs = [BCConfig(chunk_size=c, execution_horizon=h) for c, h in scores]
    best, rows = grid_search(cfgs, [], SC, score=lambda c: row(c.chunk_size, c.execution_horizon,
                                                                scores[(c.chunk_size, c.execution_horizon)]))
    assert (best.chunk_size, best.execution_horizon) == (16, 16)
    assert len(rows) == 6 and grid_csv(rows).count("\n") == 7
    tied = {(16, 8): 0.6, (16, 4): 0.6, (32, 1): 0.6}
    best, _ = grid_search([BCConfig(chunk_size=c, execution_horizon=h) for c, h in tied], [], SC,
                          score=lambda c: row(c.chunk_size, c.execution_horizon, 0.6))
    assert (best.chunk_size, best.execution_horizon) == (16, 4)
    with pytest.raises(ValueError):
        grid_search([], [], SC)


def test_checkpoint_round_trip(tmp_path, demos):
    cfg = BCConfig(epochs=1, obs_mode=ObsMode.GROUNDED)
    res = bc_train(cfg, build_training_set(demos[:2], cfg), CFG)
    save_bc(tmp_path / "ckpt", res, CFG)
    a, b = make_policy(res, CFG), load_bc(tmp_path / "ckpt", CFG)
    assert b.cfg == cfg
    setups = [sample_episode(SC, episode_seed(9, i)) for i in range(4)]
    np.testing.assert_array_equal(rollout_batch(a, SC, setups, True)["actions"],
                                  rollout_batch(b, SC, setups, True)["actions"])


def test_chunk_start_has_no_padding():
    idx, mask = chunk_indices(50, 0, 8)
    assert idx.tolist() == list(range(8)) and mask.all()


def test_toy_net_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = ChunkNet(6, 8, hidden=(5, 5)).double()
    obs, target = torch.randn(4, 6, dtype=torch.float64), torch.randn(4, 8, 7, dtype=torch.float64)
    mask = torch.ones(4, 8, dtype=torch.bool)
    mask[:, 5:] = False
    params = list(net.parameters())
    masked_mse(net(obs), target, mask).backward()
    eps, worst = 1e-6, 0.0
    for p in params:
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in range(0, flat.numel(), 7):
            old = flat[i].item()
            flat[i] = old + eps
            hi = masked_mse(net(obs), target, mask).item()
            flat[i] = old - eps
            lo = masked_mse(net(obs), target, mask).item()
            flat[i] = old
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, abs(fd - grad[i].item()) / max(abs(fd), abs(grad[i].item()), 1e-8))
    assert worst < 1e-3


def test_blind_bc_learns_fixed_layout(tmp_path):
    # with identities implied by location, the blind learner succeeds
    record_in_process(OraclePolicy(CFG), SC, tmp_path, 5000, base_seed=0)
    cfg = BCConfig(epochs=10)
    res = bc_train(cfg, build_training_set(read_dataset(tmp_path), cfg), CFG)
    outs = evaluate(make_policy(res, CFG), SC, 300, base_seed=77)
    assert sum(o.success for o in outs) / 300 >= 0.6
