import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pickladder.config import EnvConfig, WorkspaceConfig
from pickladder.dataset import (
    ConfigMismatch,
    DatasetError,
    DatasetWriter,
    EpisodeRecord,
    RejectedEpisode,
    TrajectoryRecord,
    dataset_stats,
    format_stats,
    load_meta,
    read_dataset,
    shard_files,
    shard_path,
    validate_timestamps,
)
from pickladder.placement import Regime
from pickladder.policies import OraclePolicy
from pickladder.recorder import record_in_process
from pickladder.rollout import Scenario, replay

CFG = EnvConfig()
f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


def make_rec(rng, success=True, frames=50, state_dim=15, source=-1):
    ep = EpisodeRecord(-1, "grasp the apple", "small", int(rng.integers(2**63)), success, frames, source, {"regime": "small"})
    return TrajectoryRecord(ep, rng.normal(size=(frames, state_dim)).astype(np.float32),
                            rng.normal(size=(frames, 7)).astype(np.float32))


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    w = DatasetWriter(tmp_path, CFG, "small")
    recs = [make_rec(rng, frames=int(rng.integers(1, 51))) for _ in range(10)]
    for i, r in enumerate(recs):
        assert w.write_episode(r) == i
    back = read_dataset(tmp_path)
    assert len(back) == 10 and load_meta(tmp_path).total_episodes == 10
    for i, (a, b) in enumerate(zip(recs, back)):
        assert b.same_payload(a.with_index(i))
        assert b.states.dtype == np.float32


@given(st.lists(st.lists(f32, min_size=22, max_size=22), min_size=1, max_size=50))
def test_float_payload_bit_exact(tmp_path_factory, rows):
    root = tmp_path_factory.mktemp("ds")
    a = np.array(rows, dtype=np.float32)
    ep = EpisodeRecord(-1, "grasp the mug", "full", 1, True, len(a))
    DatasetWriter(root, CFG, "full").write_episode(TrajectoryRecord(ep, a[:, :15], a[:, 15:]))
    (back,) = read_dataset(root)
    assert back.states.tobytes() == a[:, :15].tobytes() and back.actions.tobytes() == a[:, 15:].tobytes()


def test_success_filter(tmp_path):
    w = DatasetWriter(tmp_path, CFG, "small")
    with pytest.raises(RejectedEpisode, match="success filter"):
        w.write_episode(make_rec(np.random.default_rng(0), success=False))
    assert w.total == 0


def test_schema_errors(tmp_path):
    w = DatasetWriter(tmp_path, CFG, "small")
    rng = np.random.default_rng(0)
    with pytest.raises(RejectedEpisode, match="15-dim"):
        w.write_episode(make_rec(rng, state_dim=14))
    with pytest.raises(RejectedEpisode):
        w.write_episode(make_rec(rng, frames=51))
    bad = make_rec(rng)
    bad.actions[3, 2] = np.nan
    with pytest.raises(RejectedEpisode, match="non-finite"):
        w.write_episode(bad)
    with pytest.raises(RejectedEpisode):
        validate_timestamps([0.0, 0.05, 0.05])


def test_sharding_and_order_independence(tmp_path):
    rng = np.random.default_rng(1)
    w = DatasetWriter(tmp_path, CFG, "small", episodes_per_shard=3)
    for _ in range(8):
        w.write_episode(make_rec(rng, frames=5))
    assert len(shard_files(tmp_path)) == 3
    fwd = read_dataset(tmp_path)
    rev = read_dataset(tmp_path, shard_order=list(reversed(shard_files(tmp_path))))
    assert all(a.same_payload(b) for a, b in zip(fwd, rev))


def test_prefix_subset(tmp_path):
    rng = np.random.default_rng(2)
    w = DatasetWriter(tmp_path, CFG, "small")
    for _ in range(10):
        w.write_episode(make_rec(rng, frames=3))
    sub = read_dataset(tmp_path, subset=3)
    assert [r.episode.episode_index for r in sub] == [0, 1, 2]
    with pytest.raises(DatasetError):
        read_dataset(tmp_path, subset=11)


def test_config_hash_guard(tmp_path):
    DatasetWriter(tmp_path, CFG, "small").write_episode(make_rec(np.random.default_rng(0)))
    drifted = EnvConfig(workspace=WorkspaceConfig(translation_clamp=0.03))
    with pytest.raises(ConfigMismatch):
        read_dataset(tmp_path, config=drifted)
    with pytest.raises(ConfigMismatch):
        DatasetWriter(tmp_path, drifted, "small")


def test_resume_continues_and_drops_partial_tail(tmp_path):
    rng = np.random.default_rng(3)
    w = DatasetWriter(tmp_path, CFG, "small")
    for _ in range(3):
        w.write_episode(make_rec(rng, frames=4))
    with open(shard_path(tmp_path, 0), "a") as f:
        f.write('{"type":"episode","episode_index":3,"frame_count":50')  # crash mid-write
    w2 = DatasetWriter(tmp_path, CFG, "small")
    assert w2.total == 3
    assert w2.write_episode(make_rec(rng, frames=4)) == 3
    assert [r.episode.episode_index for r in read_dataset(tmp_path)] == [0, 1, 2, 3]


def test_meta_fields(tmp_path):
    DatasetWriter(tmp_path, CFG, "small")
    meta = json.loads((tmp_path / "meta" / "info.json").read_text())
    assert meta["fps"] == 20 and meta["robot_type"] == "panda" and meta["env_config_hash"] == CFG.config_hash()
    assert meta["total_episodes"] == 0


def test_frame_timestamps(tmp_path):
    DatasetWriter(tmp_path, CFG, "small").write_episode(make_rec(np.random.default_rng(0), frames=3))
    frames = [json.loads(line) for line in shard_path(tmp_path, 0).read_text().splitlines()[1:]]
    assert [f["timestamp"] for f in frames] == [0.0, 0.05, 0.1]
    assert set(frames[0]) == {"type", "episode_index", "frame_index", "timestamp", "observation.state", "action"}


def test_recorded_episodes_replay_to_success(tmp_path):
    sc = Scenario(CFG, Regime.LARGE_JITTER)
    assert record_in_process(OraclePolicy(CFG), sc, tmp_path, 25, base_seed=4) == 25
    for rec in read_dataset(tmp_path):
        final = replay(Scenario.from_dict(rec.episode.scenario), rec.episode.placement_seed, rec.actions)
        assert rec.success and final.attached == final.instruction.target_id
        assert final.instruction.text == rec.task


def test_stats(tmp_path):
    sc = Scenario(CFG, Regime.SMALL_JITTER)
    record_in_process(OraclePolicy(CFG), sc, tmp_path, 4)
    s = dataset_stats(tmp_path)
    assert s["episodes"] == 4 and s["frames"] == 200 and s["regimes"] == {"small": 4}
    assert "episodes   4" in format_stats(s)


def test_empty_dataset(tmp_path):
    assert record_in_process(OraclePolicy(CFG), Scenario(CFG), tmp_path, 0) == 0
    assert read_dataset(tmp_path) == []
