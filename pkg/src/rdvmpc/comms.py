"""Message transport between agents and coordinator.

Two transports share one message schema: a synchronous in-process bus for
deterministic simulation, and newline-delimited JSON over TCP with a broker
process for running agents as separate processes. Communication accounting
counts ThetaUpdate records only; turn grants and acknowledgements are
transport plumbing, not algorithm traffic.
"""
from __future__ import annotations

import json
import logging
import socket
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("ThetaUpdate", "Flag", "Ack", "StateAnnounce")


class BusClosedError(Exception):
    pass


class TransportError(Exception):
    pass


@dataclass
class Message:
    kind: str
    sender: int
    step: int
    theta: Optional[np.ndarray] = None
    alpha: Optional[Dict[int, float]] = None
    ts: float = 0.0  # sim time, seconds
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=float)
            if theta.shape != (3,) or not np.all(np.isfinite(theta)):
                raise ValueError("theta payload must be a finite 3-vector")
            self.theta = theta


def encode_message(msg: Message) -> bytes:
    d = {"kind": msg.kind, "sender": msg.sender, "step": msg.step, "ts": msg.ts}
    if msg.theta is not None:
        d["theta"] = list(msg.theta)
    if msg.alpha is not None:
        d["alpha"] = {str(k): float(v) for k, v in msg.alpha.items()}
    if msg.extra:
        d["extra"] = msg.extra
    return (json.dumps(d, separators=(",", ":")) + "\n").encode()


def decode_message(line: bytes) -> Message:
    d = json.loads(line)
    alpha = {int(k): float(v) for k, v in d["alpha"].items()} if "alpha" in d else None
    return Message(
        kind=d["kind"],
        sender=int(d["sender"]),
        step=int(d["step"]),
        theta=np.asarray(d["theta"], dtype=float) if "theta" in d else None,
        alpha=alpha,
        ts=float(d.get("ts", 0.0)),
        extra=d.get("extra", {}),
    )


@dataclass
class BusStats:
    total_messages: int = 0
    messages_per_step: Dict[int, int] = field(default_factory=dict)
    bytes_on_wire: int = 0

    def count(self, msg: Message, nbytes: int = 0) -> None:
        if msg.kind == "ThetaUpdate":
            self.total_messages += 1
            self.messages_per_step[msg.step] = self.messages_per_step.get(msg.step, 0) + 1
        self.bytes_on_wire += nbytes


class InProcessBus:
    """Synchronous broadcast bus: a published message is visible to every
    other agent before that agent's next step begins."""

    def __init__(self, agent_ids):
        self.agent_ids = list(agent_ids)
        self.queues: Dict[int, List[Message]] = {i: [] for i in self.agent_ids}
        self.flags: Dict[int, bool] = {i: False for i in self.agent_ids}
        self.stats = BusStats()
        self.message_log: List[Message] = []
        self._seen = set()
        self.closed = False

    def publish(self, msg: Message) -> str:
        if self.closed:
            raise BusClosedError("publish on a closed bus")
        key = (msg.sender, msg.step, msg.kind)
        if key in self._seen:
            return "duplicate"
        self._seen.add(key)
        self.stats.count(msg)
        self.message_log.append(msg)
        for i in self.agent_ids:
            if i != msg.sender:
                self.queues[i].append(msg)
                if msg.kind == "ThetaUpdate":
                    self.flags[i] = True
        return "delivered"

    def poll(self, agent: int) -> List[Message]:
        pending = sorted(self.queues[agent], key=lambda m: (m.step, m.sender))
        self.queues[agent] = []
        if any(m.kind == "ThetaUpdate" for m in pending):
            self.flags[agent] = False
        return pending

    def flag(self, agent: int) -> bool:
        return self.flags[agent]

    def close(self):
        self.closed = True


# --- socket transport --------------------------------------------------------


class LineChannel:
    """Blocking newline-delimited JSON channel over a socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = sock.makefile("rb")
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message) -> int:
        data = encode_message(msg)
        self.sock.sendall(data)
        self.bytes_sent += len(data)
        return len(data)

    def recv(self, timeout: Optional[float] = None) -> Message:
        if timeout is not None:
            self.sock.settimeout(timeout)
        line = self.reader.readline()
        if not line:
            raise TransportError("peer closed the connection")
        self.bytes_received += len(line)
        return decode_message(line)

    def close(self):
        try:
            self.reader.close()
        finally:
            self.sock.close()


def connect_with_retries(host: str, port: int, retries: int = 3, delay: float = 0.5) -> LineChannel:
    last = None
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection((host, port), timeout=30.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return LineChannel(sock)
        except OSError as exc:
            last = exc
            if attempt < retries:
                time.sleep(delay)
    raise TransportError(f"could not connect to broker at {host}:{port} after {retries} retries: {last}")


class BrokerServer:
    """Accepts one connection per expected agent; the caller then drives the
    turn-taking loop over the per-agent channels."""

    def __init__(self, port: int, n_agents: int, host: str = "127.0.0.1", accept_timeout: float = 60.0):
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind((host, port))
        self.listener.listen(n_agents)
        self.listener.settimeout(accept_timeout)
        self.port = self.listener.getsockname()[1]
        self.n_agents = n_agents
        self.channels: Dict[int, LineChannel] = {}
        self.stats = BusStats()
        self._seen = set()

    def accept_agents(self) -> Dict[int, Message]:
        """Wait for a StateAnnounce from every expected agent; returns them."""
        announcements = {}
        while len(self.channels) < self.n_agents:
            sock, _ = self.listener.accept()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            ch = LineChannel(sock)
            msg = ch.recv(timeout=60.0)
            if msg.kind != "StateAnnounce":
                raise TransportError(f"expected StateAnnounce, got {msg.kind}")
            if msg.sender in self.channels:
                raise TransportError(f"duplicate agent id {msg.sender}")
            self.channels[msg.sender] = ch
            announcements[msg.sender] = msg
            self.stats.bytes_on_wire += ch.bytes_received
        return announcements

    def send(self, agent: int, msg: Message) -> None:
        n = self.channels[agent].send(msg)
        self.stats.bytes_on_wire += n

    def recv(self, agent: int, timeout: float = 600.0) -> Message:
        ch = self.channels[agent]
        before = ch.bytes_received
        msg = ch.recv(timeout=timeout)
        self.stats.bytes_on_wire += ch.bytes_received - before
        if msg.kind == "ThetaUpdate":
            key = (msg.sender, msg.step)
            if key in self._seen:
                return self.recv(agent, timeout)  # duplicate delivery: drop
            self._seen.add(key)
            self.stats.count(msg)
        return msg

    def close(self):
        for ch in self.channels.values():
            try:
                ch.close()
            except OSError:
                pass
        self.listener.close()
