"""Episode recording, in process or streamed from a server.

Wire format: a 4-byte big-endian payload length followed by a compact UTF-8
JSON object with a ``type`` field.  A session looks like::

    client  HELLO{protocol_version, env_config_hash, resume_index}
    server  HELLO{protocol_version, env_config_hash}      (or BYE{error})
    server  EPISODE_BEGIN  FRAME*  EPISODE_END
    client  ACK
    ...                                                   (repeat)
    either  BYE

Both paths draw episode ``i`` from seed ``(base_seed, i)``, and the client
writes only successful episodes, so the resulting datasets are byte-identical.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetWriter, EpisodeRecord, TrajectoryRecord
from .rollout import Episode, Scenario, episode_seed, rollout_batch, run_episode, sample_episode

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 20
BACKOFF_START = 0.1
BACKOFF_CAP = 30.0

MESSAGE_FIELDS = {
    "HELLO": ("protocol_version", "env_config_hash"),
    "EPISODE_BEGIN": ("episode_id", "task", "regime", "placement_seed"),
    "FRAME": ("episode_id", "t", "state15", "action7"),
    "EPISODE_END": ("episode_id", "success"),
    "ACK": ("episode_id", "stored"),
    "BYE": (),
}


class ProtocolError(RuntimeError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class SessionRefused(ProtocolError):
    pass


# -- framing --------------------------------------------------------------------------

def validate_message(msg) -> dict:
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_FIELDS:
        raise ProtocolError(f"not a protocol message: {msg!r}"[:200])
    missing = [f for f in MESSAGE_FIELDS[msg["type"]] if f not in msg]
    if missing:
        raise ProtocolError(f"{msg['type']} missing fields {missing}")
    if msg["type"] == "FRAME" and (len(msg["state15"]) != 15 or len(msg["action7"]) != 7):
        raise ProtocolError("FRAME payload must carry 15 state and 7 action values")
    return msg


def frame_encode(msg: dict) -> bytes:
    validate_message(msg)
    payload = json.dumps(msg, separators=(",", ":"), allow_nan=False).encode()
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return struct.pack(">I", len(payload)) + payload


def frame_decode(data: bytes) -> tuple[dict, bytes]:
    """Decode one message from the front of ``data``; returns it and the rest."""
    if len(data) < 4:
        raise ProtocolError("incomplete length prefix")
    (n,) = struct.unpack(">I", data[:4])
    if n > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {n} exceeds {MAX_PAYLOAD}")
    if len(data) < 4 + n:
        raise ProtocolError("incomplete payload")
    return validate_message(json.loads(data[4 : 4 + n].decode())), data[4 + n :]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def recv_message(sock: socket.socket) -> dict:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    if n > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {n} exceeds {MAX_PAYLOAD}")
    return validate_message(json.loads(_recv_exact(sock, n).decode()))


def send_message(sock: socket.socket, msg: dict) -> None:
    sock.sendall(frame_encode(msg))


# -- protocol state machine -----------------------------------------------------------

class StreamState:
    """Checks the order of server-to-client messages."""

    def __init__(self) -> None:
        self.phase = "handshake"
        self.episode_id = None
        self.next_t = 0

    def accept(self, msg: dict) -> dict:
        kind = msg["type"]
        if kind == "BYE":
            self.phase = "closed"
            return msg
        if self.phase == "closed":
            raise ProtocolError(f"{kind} after BYE")
        if self.phase == "handshake":
            if kind != "HELLO":
                raise ProtocolError(f"expected HELLO, got {kind}")
            if msg["protocol_version"] != PROTOCOL_VERSION:
                raise ProtocolError(f"protocol version {msg['protocol_version']} unsupported")
            self.phase = "idle"
        elif self.phase == "idle":
            if kind != "EPISODE_BEGIN":
                raise ProtocolError(f"{kind} outside an episode")
            self.phase, self.episode_id, self.next_t = "episode", msg["episode_id"], 0
        elif self.phase == "episode":
            if kind not in ("FRAME", "EPISODE_END"):
                raise ProtocolError(f"{kind} inside episode {self.episode_id}")
            if msg["episode_id"] != self.episode_id:
                raise ProtocolError(f"{kind} for episode {msg['episode_id']} inside episode {self.episode_id}")
            if kind == "FRAME":
                if msg["t"] != self.next_t:
                    raise ProtocolError(f"frame t={msg['t']} out of order (expected {self.next_t})")
                self.next_t += 1
            else:
                self.phase = "awaiting_ack"
        elif self.phase == "awaiting_ack":
            raise ProtocolError(f"{kind} before the previous episode was acknowledged")
        return msg

    def acknowledged(self) -> None:
        if self.phase != "awaiting_ack":
            raise ProtocolError("ACK without a finished episode")
        self.phase, self.episode_id = "idle", None


def check_sequence(messages) -> None:
    """Raise :class:`ProtocolError` unless ``messages`` is a well-ordered stream."""
    st = StreamState()
    for m in messages:
        st.accept(validate_message(m))
        if m["type"] == "EPISODE_END":
            st.acknowledged()


# -- records --------------------------------------------------------------------------

def make_record(scenario: Scenario, setup, states15, actions, success: bool, source_index: int) -> TrajectoryRecord:
    states15 = np.asarray(states15, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float32)
    ep = EpisodeRecord(
        episode_index=-1,
        task=setup.instruction.text,
        regime=scenario.regime.value,
        placement_seed=int(setup.seed),
        success=bool(success),
        frame_count=len(actions),
        source_index=int(source_index),
        scenario=scenario.to_dict(),
    )
    return TrajectoryRecord(ep, states15, actions)


def episode_messages(scenario: Scenario, source_index: int, episode: Episode) -> list[dict]:
    setup = episode.setup
    msgs = [
        {
            "type": "EPISODE_BEGIN",
            "episode_id": source_index,
            "task": setup.instruction.text,
            "regime": scenario.regime.value,
            "placement_seed": int(setup.seed),
            "scenario": scenario.to_dict(),
        }
    ]
    for t in range(len(episode.actions)):
        msgs.append(
            {
                "type": "FRAME",
                "episode_id": source_index,
                "t": t,
                "state15": [float(x) for x in episode.states15[t]],
                "action7": [float(x) for x in episode.actions[t]],
            }
        )
    msgs.append({"type": "EPISODE_END", "episode_id": source_index, "success": bool(episode.success)})
    return msgs


def record_in_process(policy, scenario: Scenario, root: str | Path, count: int, base_seed: int = 0,
                      batch: int = 256, max_attempts: int | None = None) -> int:
    """Run episodes ``(base_seed, i)`` and store successful ones until the
    dataset holds ``count``.  Resumes an existing dataset."""
    writer = DatasetWriter(root, scenario.config, scenario.regime.value)
    i = writer.next_source_index
    attempts = 0
    while writer.total < count:
        if max_attempts is not None and attempts >= max_attempts:
            raise RuntimeError(f"only {writer.total} of {count} episodes succeeded after {attempts} attempts")
        setups = [sample_episode(scenario, episode_seed(base_seed, i + k)) for k in range(batch)]
        out = rollout_batch(policy, scenario, setups, record=True)
        env = out["env"]
        for k, s in enumerate(setups):
            attempts += 1
            success = bool(env.attached[k] == env.targets[k])
            if success:
                writer.write_episode(make_record(scenario, s, out["states15"][k], out["actions"][k], True, i + k))
                if writer.total >= count:
                    break
        i += batch
    return writer.total


# -- server ---------------------------------------------------------------------------

@dataclass
class ServerStats:
    served: int = 0
    sessions: int = 0
    refused: int = 0
    discarded: int = 0


class EpisodeServer:
    """Single-client server: runs ``policy`` and streams episodes.

    Serves at most ``budget`` complete episodes in total, then says BYE and
    stops.  A client BYE also stops the server unless ``stop_on_bye`` is off.
    """

    def __init__(self, policy, scenario: Scenario, address=("127.0.0.1", 0), budget: int = 100,
                 base_seed: int = 0, stop_on_bye: bool = True):
        self.policy = policy
        self.scenario = scenario
        self.budget = budget
        self.base_seed = base_seed
        self.stop_on_bye = stop_on_bye
        self.stats = ServerStats()
        self.sock = socket.create_server(tuple(address), backlog=8)
        self.address = self.sock.getsockname()[:2]
        self._stop = False

    def close(self) -> None:
        self.sock.close()

    def serve(self) -> int:
        try:
            while not self._stop and self.stats.served < self.budget:
                conn, peer = self.sock.accept()
                with conn:
                    self.stats.sessions += 1
                    try:
                        self._session(conn)
                    except (ConnectionError, OSError, ProtocolError) as e:
                        log.warning("session with %s ended: %s", peer, e)
        finally:
            self.close()
        return self.stats.served

    def _session(self, conn: socket.socket) -> None:
        hello = recv_message(conn)
        ours = self.scenario.config.config_hash()
        if hello["type"] != "HELLO":
            raise ProtocolError(f"expected HELLO, got {hello['type']}")
        if hello["protocol_version"] != PROTOCOL_VERSION or hello["env_config_hash"] != ours:
            self.stats.refused += 1
            send_message(conn, {"type": "BYE", "error": f"config hash mismatch: server {ours}, client {hello['env_config_hash']}"})
            return
        send_message(conn, {"type": "HELLO", "protocol_version": PROTOCOL_VERSION, "env_config_hash": ours})
        index = int(hello.get("resume_index", 0))
        while self.stats.served < self.budget:
            ep = run_episode(self.policy, self.scenario, episode_seed(self.base_seed, index))
            msgs = episode_messages(self.scenario, index, ep)
            try:
                conn.sendall(b"".join(frame_encode(m) for m in msgs))
                reply = recv_message(conn)
            except (ConnectionError, OSError):
                self.stats.discarded += 1
                log.warning("client left during episode %d; partial episode discarded", index)
                raise
            if reply["type"] == "BYE":
                # BYE in place of the ACK: the client took this episode and is done
                self.stats.served += 1
                self._stop = self.stop_on_bye
                return
            if reply["type"] != "ACK" or reply["episode_id"] != index:
                raise ProtocolError(f"expected ACK for {index}, got {reply}")
            self.stats.served += 1
            index += 1
        send_message(conn, {"type": "BYE"})


def serve(policy, scenario: Scenario, address, budget: int, base_seed: int = 0) -> int:
    return EpisodeServer(policy, scenario, address, budget, base_seed).serve()


# -- client ---------------------------------------------------------------------------

def backoff_delays(start: float = BACKOFF_START, cap: float = BACKOFF_CAP):
    d = start
    while True:
        yield d
        d = min(d * 2, cap)


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def client_record(address, root: str | Path, target: int, scenario: Scenario, max_retries: int = 8,
                  sleep=time.sleep, received: list | None = None) -> int:
    """Store successful streamed episodes until the dataset holds ``target``.

    Reconnects with exponential backoff after a lost connection and resumes
    from the dataset's recorded position.  ``received`` (optional) collects
    every EPISODE_END seen, for inspection.
    """
    writer = DatasetWriter(root, scenario.config, scenario.regime.value)
    delays = backoff_delays()
    failures = 0
    while writer.total < target:
        try:
            with socket.create_connection(tuple(address), timeout=60) as sock:
                done = _client_session(sock, writer, target, scenario, received)
            delays, failures = backoff_delays(), 0
            if done:
                break
        except SessionRefused:
            raise
        except (ConnectionError, OSError, ProtocolError) as e:
            failures += 1
            if failures > max_retries:
                raise ConnectionError(f"giving up after {max_retries} retries: {e}") from e
            d = next(delays)
            log.warning("connection lost (%s); retrying in %.1fs", e, d)
            sleep(d)
    return writer.total


def _client_session(sock, writer: DatasetWriter, target: int, scenario: Scenario, received) -> bool:
    """Returns True when the session ended for good (target reached or
    server out of budget)."""
    send_message(
        sock,
        {
            "type": "HELLO",
            "protocol_version": PROTOCOL_VERSION,
            "env_config_hash": writer.config.config_hash(),
            "resume_index": writer.next_source_index,
        },
    )
    state = StreamState()
    begin = None
    states: list = []
    actions: list = []
    while True:
        msg = state.accept(recv_message(sock))
        kind = msg["type"]
        if kind == "BYE":
            if "error" in msg:
                raise SessionRefused(msg["error"])
            return True
        if kind == "EPISODE_BEGIN":
            begin, states, actions = msg, [], []
        elif kind == "FRAME":
            states.append(msg["state15"])
            actions.append(msg["action7"])
        elif kind == "EPISODE_END":
            if received is not None:
                received.append(msg)
            sid = msg["episode_id"]
            stored = False
            if msg["success"] and sid >= writer.next_source_index:
                rec = TrajectoryRecord(
                    EpisodeRecord(
                        episode_index=-1,
                        task=begin["task"],
                        regime=begin["regime"],
                        placement_seed=int(begin["placement_seed"]),
                        success=True,
                        frame_count=len(actions),
                        source_index=sid,
                        scenario=begin.get("scenario", scenario.to_dict()),
                    ),
                    np.array(states, dtype=np.float32),
                    np.array(actions, dtype=np.float32),
                )
                writer.write_episode(rec)
                stored = True
            if writer.total >= target:
                send_message(sock, {"type": "BYE"})
                return True
            send_message(sock, {"type": "ACK", "episode_id": sid, "stored": stored})
            state.acknowledged()
