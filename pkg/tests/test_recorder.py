import itertools
import socket
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pickladder.config import EnvConfig, WorkspaceConfig
from pickladder.dataset import read_dataset
from pickladder.placement import Regime
from pickladder.policies import NearestPolicy, OraclePolicy
from pickladder.recorder import (
    MAX_PAYLOAD,
    EpisodeServer,
    FrameTooLarge,
    ProtocolError,
    SessionRefused,
    backoff_delays,
    check_sequence,
    client_record,
    frame_decode,
    frame_encode,
    parse_address,
    recv_message,
    record_in_process,
    send_message,
)
from pickladder.rollout import Scenario

CFG = EnvConfig()
SC = Scenario(CFG, Regime.SMALL_JITTER)


def test_bye_framing():
    data = frame_encode({"type": "BYE"})
    assert data[:4] == b"\x00\x00\x00\x0e" and data[4:] == b'{"type":"BYE"}' and len(data) == 18


f32 = st.floats(width=32, allow_nan=False, allow_infinity=False).map(float)
messages = st.one_of(
    st.builds(lambda h: {"type": "HELLO", "protocol_version": 1, "env_config_hash": h}, st.text(max_size=20)),
    st.builds(lambda i, t, s: {"type": "EPISODE_BEGIN", "episode_id": i, "task": t, "regime": "small", "placement_seed": s},
              st.integers(0, 10**6), st.text(max_size=30), st.integers(0, 2**64 - 1)),
    st.builds(lambda i, t, s, a: {"type": "FRAME", "episode_id": i, "t": t, "state15": s, "action7": a},
              st.integers(0, 10**6), st.integers(0, 49), st.lists(f32, min_size=15, max_size=15),
              st.lists(f32, min_size=7, max_size=7)),
    st.builds(lambda i, s: {"type": "EPISODE_END", "episode_id": i, "success": s}, st.integers(0, 10**6), st.booleans()),
    st.builds(lambda i, s: {"type": "ACK", "episode_id": i, "stored": s}, st.integers(0, 10**6), st.booleans()),
    st.just({"type": "BYE"}),
)


@given(st.lists(messages, min_size=1, max_size=5))
def test_framing_round_trip(msgs):
    data = b"".join(frame_encode(m) for m in msgs)
    out = []
    while data:
        m, data = frame_decode(data)
        out.append(m)
    assert out == msgs


def test_oversize_rejected():
    with pytest.raises(FrameTooLarge):
        frame_encode({"type": "BYE", "pad": "x" * MAX_PAYLOAD})
    with pytest.raises(FrameTooLarge):
        frame_decode((MAX_PAYLOAD + 1).to_bytes(4, "big") + b"{}")


def test_malformed_messages():
    with pytest.raises(ProtocolError):
        frame_encode({"type": "NOPE"})
    with pytest.raises(ProtocolError):
        frame_encode({"type": "FRAME", "episode_id": 0, "t": 0, "state15": [0.0] * 14, "action7": [0.0] * 7})
    with pytest.raises(ProtocolError):
        frame_decode(b"\x00\x00")


def stream(frames=4, eid=7):
    out = [{"type": "HELLO", "protocol_version": 1, "env_config_hash": "x"},
           {"type": "EPISODE_BEGIN", "episode_id": eid, "task": "grasp the mug", "regime": "small", "placement_seed": 1}]
    out += [{"type": "FRAME", "episode_id": eid, "t": t, "state15": [0.0] * 15, "action7": [0.0] * 7}
            for t in range(frames)]
    out += [{"type": "EPISODE_END", "episode_id": eid, "success": True}, {"type": "BYE"}]
    return out


def test_valid_sequence_accepted():
    check_sequence(stream())


@pytest.mark.parametrize("drop", [1, 2])
def test_frame_or_end_without_begin(drop):
    s = stream()
    del s[1]  # no BEGIN
    with pytest.raises(ProtocolError):
        check_sequence(s if drop == 1 else [s[0], s[-2]])


def test_frame_for_other_episode():
    s = stream()
    s[3] = dict(s[3], episode_id=8)
    with pytest.raises(ProtocolError):
        check_sequence(s)


@given(st.permutations(range(8)))
def test_shuffled_sequences_rejected(order):
    s = stream()
    if list(order) == list(range(8)):
        check_sequence(s)
    else:
        with pytest.raises(ProtocolError):
            check_sequence([s[i] for i in order])


def run_server(policy, scenario, budget=10**6, base_seed=0, stop_on_bye=True):
    srv = EpisodeServer(policy, scenario, budget=budget, base_seed=base_seed, stop_on_bye=stop_on_bye)
    t = threading.Thread(target=srv.serve, daemon=True)
    t.start()
    return srv, t


def test_budget_over_loopback(tmp_path):
    srv, t = run_server(OraclePolicy(CFG), SC, budget=5)
    ends = []
    assert client_record(srv.address, tmp_path, 100, SC, received=ends) == 5
    t.join(5)
    assert len(ends) == 5 and srv.stats.served == 5


def test_stale_config_refused(tmp_path):
    srv, t = run_server(OraclePolicy(CFG), SC, budget=5)
    other = Scenario(EnvConfig(workspace=WorkspaceConfig(horizon=40)), Regime.SMALL_JITTER)
    with pytest.raises(SessionRefused, match="hash"):
        client_record(srv.address, tmp_path, 3, other)
    assert srv.stats.refused == 1
    srv._stop = True
    socket.create_connection(srv.address).close()
    t.join(5)


def fake_server(n_episodes, successes):
    """Streams synthetic episodes with the given success pattern."""
    sock = socket.create_server(("127.0.0.1", 0))
    seen = {"ends": 0}

    def serve():
        conn, _ = sock.accept()
        with conn:
            hello = recv_message(conn)
            send_message(conn, {"type": "HELLO", "protocol_version": 1, "env_config_hash": hello["env_config_hash"]})
            for i in range(hello["resume_index"], n_episodes):
                msgs = [{"type": "EPISODE_BEGIN", "episode_id": i, "task": "grasp the apple", "regime": "small",
                         "placement_seed": i, "scenario": SC.to_dict()}]
                msgs += [{"type": "FRAME", "episode_id": i, "t": t, "state15": [float(i)] * 15, "action7": [0.5] * 7}
                         for t in range(3)]
                msgs.append({"type": "EPISODE_END", "episode_id": i, "success": successes(i)})
                for m in msgs:
                    send_message(conn, m)
                seen["ends"] += 1
                if recv_message(conn)["type"] == "BYE":
                    return
            send_message(conn, {"type": "BYE"})
        sock.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    return sock.getsockname()[:2], t, seen


def test_alternating_success_filter(tmp_path):
    addr, t, seen = fake_server(100, lambda i: i % 2 == 1)
    ends = []
    assert client_record(addr, tmp_path, 5, SC, received=ends) == 5
    t.join(5)
    assert len(ends) == 10
    recs = read_dataset(tmp_path)
    assert [r.episode.source_index for r in recs] == [1, 3, 5, 7, 9] and all(r.success for r in recs)


def test_network_matches_in_process_and_resumes(tmp_path):
    sc = Scenario(CFG.first_objects(2), Regime.FULL_RANDOM)
    record_in_process(NearestPolicy(sc.config), sc, tmp_path / "local", 5, base_seed=11)
    srv, t = run_server(NearestPolicy(sc.config), sc, base_seed=11, stop_on_bye=False)
    assert client_record(srv.address, tmp_path / "net", 3, sc) == 3
    assert client_record(srv.address, tmp_path / "net", 5, sc) == 5  # restart with a higher target
    srv._stop = True
    socket.create_connection(srv.address).close()
    t.join(5)
    net = read_dataset(tmp_path / "net")
    assert len({r.episode.source_index for r in net}) == 5
    for name in ("meta/info.json", "data/shard-00000.jsonl"):
        assert (tmp_path / "net" / name).read_bytes() == (tmp_path / "local" / name).read_bytes()


def test_mid_episode_disconnect_discards(tmp_path):
    srv, t = run_server(OraclePolicy(CFG), SC, budget=3)
    with socket.create_connection(srv.address) as s:
        send_message(s, {"type": "HELLO", "protocol_version": 1, "env_config_hash": CFG.config_hash(), "resume_index": 0})
        assert recv_message(s)["type"] == "HELLO"
        assert recv_message(s)["type"] == "EPISODE_BEGIN"
        assert recv_message(s)["type"] == "FRAME"
    assert client_record(srv.address, tmp_path, 3, SC) == 3
    t.join(5)
    assert srv.stats.discarded == 1 and srv.stats.served == 3
    assert all(len(r) == 50 for r in read_dataset(tmp_path))


def test_client_backoff_and_give_up(tmp_path):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    addr = sock.getsockname()
    sock.close()  # nothing listens here
    slept = []
    with pytest.raises(ConnectionError, match="giving up"):
        client_record(addr, tmp_path, 1, SC, max_retries=4, sleep=slept.append)
    assert slept == [0.1, 0.2, 0.4, 0.8]


def test_backoff_cap():
    assert list(itertools.islice(backoff_delays(), 12))[-1] == 30.0


def test_parse_address():
    assert parse_address("localhost:5555") == ("localhost", 5555)
    with pytest.raises(ValueError):
        parse_address("5555")
