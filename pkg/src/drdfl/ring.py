"""Ring-topology messaging: wire codec, token passing, faults and Learngene merge.

Wire format of a message (little-endian)::

    header (24 bytes)
        magic  "DRRM"   4s
        version         u8
        flags           u8    bit 0 set -> float64 payload, else float32
        K               u16
        round           u32
        sender          u32
        P (learngene)   u32
        d_p             u32
    payload            P + 2*K*d_p floats (learngene, class means, class log-variances)
    crc32              u32   over header and payload
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"DRRM"
VERSION = 1
HEADER = struct.Struct("<4sBBHIIII")
assert HEADER.size == 24
FLAG_F64 = 0x01
WIRE_DTYPES = {"f32": "<f4", "f64": "<f8"}


class MessageError(ValueError):
    pass


class LocalOnlyRound(Exception):
    """No other alive client to talk to this round."""


@dataclass
class RingMessage:
    round: int
    sender: int
    learngene_params: np.ndarray
    class_means: np.ndarray
    class_logvars: np.ndarray

    @property
    def K(self) -> int:
        return self.class_means.shape[0]

    @property
    def d_p(self) -> int:
        return self.class_means.shape[1]


def message_size(P: int, K: int, d_p: int, wire_dtype: str = "f32") -> int:
    width = 8 if wire_dtype == "f64" else 4
    return HEADER.size + width * (P + 2 * K * d_p) + 4


def encode(msg: RingMessage, wire_dtype: str = "f32") -> bytes:
    if wire_dtype not in WIRE_DTYPES:
        raise MessageError(f"unknown wire dtype {wire_dtype!r}")
    phi = np.asarray(msg.learngene_params, dtype=np.float64).ravel()
    means = np.asarray(msg.class_means, dtype=np.float64)
    logvars = np.asarray(msg.class_logvars, dtype=np.float64)
    if means.ndim != 2 or means.shape != logvars.shape:
        raise MessageError(f"class statistics shape mismatch {means.shape} vs {logvars.shape}")
    with np.errstate(over="ignore"):
        payload = np.concatenate([phi, means.ravel(), logvars.ravel()]).astype(WIRE_DTYPES[wire_dtype])
    if not np.all(np.isfinite(payload)):
        raise MessageError(f"refusing to encode values that are non-finite in {wire_dtype}")
    K, d_p = means.shape
    flags = FLAG_F64 if wire_dtype == "f64" else 0
    head = HEADER.pack(MAGIC, VERSION, flags, K, msg.round, msg.sender, phi.size, d_p)
    body = head + payload.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes, expected_params: int | None = None) -> RingMessage:
    if len(buf) < HEADER.size + 4:
        raise MessageError(f"message too short: {len(buf)} bytes")
    magic, version, flags, K, rnd, sender, P, d_p = HEADER.unpack_from(buf, 0)
    if magic != MAGIC or version != VERSION:
        raise MessageError(f"bad magic/version {magic!r}/{version}")
    wire = "f64" if flags & FLAG_F64 else "f32"
    expected = message_size(P, K, d_p, wire)
    if len(buf) != expected:
        raise MessageError(f"length mismatch: header implies {expected} bytes, got {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if crc != zlib.crc32(buf[:-4]) & 0xFFFFFFFF:
        raise MessageError("checksum mismatch")
    if expected_params is not None and P != expected_params:
        raise MessageError(f"learngene parameter count {P} != expected {expected_params}")
    vals = np.frombuffer(buf, dtype=WIRE_DTYPES[wire], offset=HEADER.size,
                         count=P + 2 * K * d_p).astype(np.float64)
    n = K * d_p
    return RingMessage(rnd, sender, vals[:P].copy(),
                       vals[P:P + n].reshape(K, d_p).copy(),
                       vals[P + n:].reshape(K, d_p).copy())


def merge_learngene(local: np.ndarray, received: np.ndarray) -> np.ndarray:
    local = np.asarray(local, dtype=np.float64)
    received = np.asarray(received, dtype=np.float64)
    if local.shape != received.shape:
        raise MessageError(f"learngene layout mismatch {local.shape} vs {received.shape}")
    return (received + local) / 2.0


# --- topology ------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultEvent:
    round: int
    client: int
    up: bool = False


def parse_fault(text: str) -> FaultEvent:
    """``"round:client"`` takes a client down; ``"round:client:up"`` revives it."""
    parts = text.split(":")
    if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] not in ("up", "down")):
        raise ValueError(f"bad fault spec {text!r}; expected round:client[:up|down]")
    return FaultEvent(int(parts[0]), int(parts[1]), len(parts) == 3 and parts[2] == "up")


@dataclass
class RingTopology:
    order: list[int]
    alive: dict[int, bool] = field(default_factory=dict)
    mode: str = "sequential"

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("order must be a permutation of client ids")
        if self.mode not in ("sequential", "parallel_snapshot"):
            raise ValueError(f"unknown ring mode {self.mode!r}")
        for c in self.order:
            self.alive.setdefault(c, True)

    @classmethod
    def ring(cls, M: int, mode: str = "sequential") -> "RingTopology":
        return cls(list(range(M)), mode=mode)

    @property
    def M(self) -> int:
        return len(self.order)

    def alive_clients(self) -> list[int]:
        return [c for c in self.order if self.alive[c]]

    def apply_faults(self, round_idx: int, schedule: Iterable[FaultEvent]) -> None:
        for ev in schedule:
            if ev.round == round_idx:
                self.alive[ev.client] = ev.up


@dataclass
class CommLedger:
    messages: list[tuple[int, int, int, int]] = field(default_factory=list)  # round, sender, receiver, bytes
    skips: list[tuple[int, int, int]] = field(default_factory=list)          # round, from, skipped
    local_only: list[tuple[int, int]] = field(default_factory=list)          # round, client

    @property
    def total_bytes(self) -> int:
        return sum(m[3] for m in self.messages)

    def bytes_in_round(self, t: int) -> int:
        return sum(m[3] for m in self.messages if m[0] == t)

    def messages_in_round(self, t: int) -> int:
        return sum(1 for m in self.messages if m[0] == t)

    def bytes_sent_by(self, t: int, client: int) -> int:
        return sum(m[3] for m in self.messages if m[0] == t and m[1] == client)


def advance_token(topology: RingTopology, frm: int, ledger: CommLedger | None = None,
                  round_idx: int = -1) -> int:
    """Next alive client clockwise from ``frm``; each dead client jumped over is
    logged as a skip. Raises :class:`LocalOnlyRound` when nobody else is alive."""
    if not topology.alive.get(frm, False):
        raise ValueError(f"client {frm} is not alive")
    pos = topology.order.index(frm)
    skipped = []
    for step in range(1, topology.M):
        cand = topology.order[(pos + step) % topology.M]
        if topology.alive[cand]:
            if ledger is not None:
                ledger.skips.extend((round_idx, frm, s) for s in skipped)
            return cand
        skipped.append(cand)
    raise LocalOnlyRound(f"client {frm} has no alive successor")


TrainFn = Callable[[int, "RingMessage | None"], RingMessage]


@dataclass
class Delivery:
    client: int
    inherited: RingMessage | None
    outgoing: RingMessage
    receiver: int | None
    nbytes: int


class Ring:
    """Drives rounds over a topology, moving encoded messages between inboxes.

    Sequential mode passes the token around starting at client ``t mod M``
    (or the next alive one); each visited client consumes any unread message
    from its predecessor, trains and forwards. The start client therefore has
    nothing unread and trains on its own state. Parallel-snapshot mode hands
    every client the message its predecessor sent at the end of the previous
    round; all clients train on that snapshot.
    """

    def __init__(self, topology: RingTopology, wire_dtype: str = "f32",
                 expected_params: int | None = None, trace_dir: str | Path | None = None,
                 communicate: bool = True):
        self.topology = topology
        self.wire_dtype = wire_dtype
        self.expected_params = expected_params
        self.trace_dir = Path(trace_dir) if trace_dir else None
        self.communicate = communicate
        self.ledger = CommLedger()
        self.inbox: dict[int, bytes] = {}
        self.last_message: RingMessage | None = None

    def _receive(self, client: int) -> RingMessage | None:
        buf = self.inbox.pop(client, None)
        return None if buf is None else decode(buf, self.expected_params)

    def _send(self, t: int, msg: RingMessage, frames: list) -> tuple[int | None, int, bytes | None]:
        self.last_message = msg
        if not self.communicate:
            return None, 0, None
        try:
            receiver = advance_token(self.topology, msg.sender, self.ledger, t)
        except LocalOnlyRound:
            self.ledger.local_only.append((t, msg.sender))
            return None, 0, None
        buf = encode(msg, self.wire_dtype)
        self.ledger.messages.append((t, msg.sender, receiver, len(buf)))
        frames.append((msg.sender, receiver, buf))
        return receiver, len(buf), buf

    def visit_order(self, t: int) -> list[int]:
        alive = self.topology.alive_clients()
        if not alive:
            raise RuntimeError(f"round {t}: no alive clients")
        order = self.topology.order
        start_pos = t % self.topology.M
        for step in range(self.topology.M):
            c = order[(start_pos + step) % self.topology.M]
            if self.topology.alive[c]:
                start_pos = (start_pos + step) % self.topology.M
                break
        return [order[(start_pos + i) % self.topology.M] for i in range(self.topology.M)
                if self.topology.alive[order[(start_pos + i) % self.topology.M]]]

    def run_round(self, t: int, train_fn: TrainFn) -> list[Delivery]:
        frames: list = []
        out: list[Delivery] = []
        if self.topology.mode == "sequential":
            for c in self.visit_order(t):
                inherited = self._receive(c)
                msg = train_fn(c, inherited)
                receiver, nbytes, buf = self._send(t, msg, frames)
                if buf is not None:
                    self.inbox[receiver] = buf
                out.append(Delivery(c, inherited, msg, receiver, nbytes))
        else:
            clients = self.topology.alive_clients()
            if not clients:
                raise RuntimeError(f"round {t}: no alive clients")
            snapshot = {c: self._receive(c) for c in clients}
            staged = {}
            for c in clients:
                msg = train_fn(c, snapshot[c])
                receiver, nbytes, buf = self._send(t, msg, frames)
                if buf is not None:
                    staged[receiver] = buf
                out.append(Delivery(c, snapshot[c], msg, receiver, nbytes))
            self.inbox.update(staged)
        if self.trace_dir is not None:
            self._dump(t, frames)
        return out

    def _dump(self, t: int, frames: list) -> None:
        self.trace_dir.mkdir(parents=True, exist_ok=True)
        with open(self.trace_dir / f"round_{t:05d}.bin", "wb") as fh:
            for sender, receiver, buf in frames:
                fh.write(struct.pack("<III", sender, receiver, len(buf)))
                fh.write(buf)


def read_trace(path: str | Path) -> list[tuple[int, int, RingMessage]]:
    data = Path(path).read_bytes()
    out, off = [], 0
    while off < len(data):
        sender, receiver, n = struct.unpack_from("<III", data, off)
        off += 12
        out.append((sender, receiver, decode(data[off:off + n])))
        off += n
    return out
