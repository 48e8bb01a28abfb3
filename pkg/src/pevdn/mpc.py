"""Three-phase n-party summation over additive secret shares.

Each agent encodes its message vector into the field, splits every element
into ``n`` shares, keeps its own piece and mails piece ``j`` to agent ``j``
(SHARE).  Once it holds ``n`` pieces it broadcasts their elementwise sum
(PARTIAL_SUM).  The sum of all ``n`` partial sums decodes to the sum of the
agents' vectors.  No single message reveals anything about an individual
agent's values.

Wire frame (little endian)::

    round_id u32 | sender u16 | receiver u16 (0xFFFF = broadcast) | kind u8
    | payload_len u32 | payload_len x u64

Transports carry these bytes; :class:`InProcessTransport` is deterministic
and is what training uses, :class:`TcpTransport` is a loopback equivalent.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .errors import IncompleteRound, LengthMismatch, ProtocolError, ProtocolTimeout
from .field import DEFAULT_FIELD, M_MAX, PRECISION, PrimeField, from_bytes, to_bytes

BROADCAST = 0xFFFF
HEADER = struct.Struct("<IHHBI")


class Kind(enum.IntEnum):
    SHARE = 0
    PARTIAL_SUM = 1
    INDICES = 2
    # plaintext float64 messages; only the non-private decentralized mode uses it
    PLAIN = 3


PRIVATE_KINDS = frozenset({Kind.SHARE, Kind.PARTIAL_SUM, Kind.INDICES})


@dataclass(frozen=True)
class ProtocolMessage:
    round_id: int
    sender: int
    receiver: int
    kind: Kind
    payload: np.ndarray

    def to_bytes(self) -> bytes:
        payload = np.asarray(self.payload, dtype=np.uint64)
        return HEADER.pack(self.round_id, self.sender, self.receiver, int(self.kind),
                           payload.size) + to_bytes(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtocolMessage":
        msg, used = cls.read(data, 0)
        if used != len(data):
            raise ProtocolError(f"{len(data) - used} trailing bytes after frame")
        return msg

    @classmethod
    def read(cls, data: bytes, offset: int):
        """Parse one frame at ``offset``; returns ``(message, next_offset)``."""
        if len(data) - offset < HEADER.size:
            raise ProtocolError("truncated frame header")
        round_id, sender, receiver, kind, n = HEADER.unpack_from(data, offset)
        start = offset + HEADER.size
        stop = start + 8 * n
        if stop > len(data):
            raise ProtocolError("truncated frame payload")
        return cls(round_id, sender, receiver, Kind(kind), from_bytes(data[start:stop])), stop

    def floats(self) -> np.ndarray:
        return self.payload.view(np.float64)


def parse_transcript(data: bytes) -> list[ProtocolMessage]:
    out, off = [], 0
    while off < len(data):
        msg, off = ProtocolMessage.read(data, off)
        out.append(msg)
    return out


class Transport:
    """Reliable channels between ``n`` agents.

    Per-(sender, receiver) order is preserved; nothing is promised about the
    interleaving of different senders.  Every frame sent is appended to
    ``transcript`` as raw bytes.
    """

    def __init__(self, n: int):
        self.n = n
        self.transcript: list[bytes] = []

    def send(self, msg: ProtocolMessage):
        raw = msg.to_bytes()
        self.transcript.append(raw)
        targets = [j for j in range(self.n) if j != msg.sender] if msg.receiver == BROADCAST \
            else [msg.receiver]
        for j in targets:
            self._deliver(j, msg.sender, raw)

    def _deliver(self, receiver: int, sender: int, raw: bytes):
        raise NotImplementedError

    def receive(self, agent: int, count: int) -> list[ProtocolMessage]:
        raise NotImplementedError

    def dump_transcript(self, path):
        with open(path, "ab") as fh:
            fh.write(b"".join(self.transcript))

    def close(self):
        pass


class InProcessTransport(Transport):
    """Queue-backed transport with a seeded cross-sender delivery order.

    ``order`` is ``"shuffle"`` (random interleaving from ``rng``), ``"fifo"``
    (senders ascending) or ``"reverse"`` (senders descending).
    """

    def __init__(self, n: int, rng: np.random.Generator | None = None, order: str = "shuffle"):
        super().__init__(n)
        if order not in ("shuffle", "fifo", "reverse"):
            raise ValueError(f"unknown delivery order {order!r}")
        if order == "shuffle" and rng is None:
            rng = np.random.default_rng(0)
        self.rng = rng
        self.order = order
        self._queues = [defaultdict(deque) for _ in range(n)]

    def _deliver(self, receiver, sender, raw):
        self._queues[receiver][sender].append(raw)

    def receive(self, agent, count):
        pending = self._queues[agent]
        available = sum(len(q) for q in pending.values())
        if available < count:
            raise ProtocolTimeout(f"agent {agent} expected {count} messages, only {available} arrived")
        out = []
        while len(out) < count:
            senders = sorted(s for s, q in pending.items() if q)
            if self.order == "shuffle":
                s = senders[int(self.rng.integers(len(senders)))]
            elif self.order == "reverse":
                s = senders[-1]
            else:
                s = senders[0]
            out.append(ProtocolMessage.from_bytes(pending[s].popleft()))
        return out


class TcpTransport(Transport):
    """Loopback TCP with one listening socket per agent and one stream per pair."""

    def __init__(self, n: int, host: str = "127.0.0.1", timeout: float = 10.0):
        super().__init__(n)
        self.host = host
        self.timeout = timeout
        self._inbox = [queue.Queue() for _ in range(n)]
        self._servers = []
        self._threads = []
        self._out = {}
        self._lock = threading.Lock()
        self._closed = False
        for j in range(n):
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, 0))
            srv.listen(n)
            self._servers.append(srv)
            t = threading.Thread(target=self._accept_loop, args=(j, srv), daemon=True)
            t.start()
            self._threads.append(t)

    def _accept_loop(self, j, srv):
        while not self._closed:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read_loop, args=(j, conn), daemon=True)
            t.start()

    def _read_loop(self, j, conn):
        buf = b""
        with conn:
            while True:
                try:
                    chunk = conn.recv(65536)
                except OSError:
                    return
                if not chunk:
                    return
                buf += chunk
                while len(buf) >= HEADER.size:
                    n = HEADER.unpack_from(buf, 0)[4]
                    size = HEADER.size + 8 * n
                    if len(buf) < size:
                        break
                    self._inbox[j].put(buf[:size])
                    buf = buf[size:]

    def _conn(self, sender, receiver):
        key = (sender, receiver)
        with self._lock:
            if key not in self._out:
                s = socket.create_connection(self._servers[receiver].getsockname())
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._out[key] = s
            return self._out[key]

    def send(self, msg):
        with self._lock:
            self.transcript.append(msg.to_bytes())
        raw = msg.to_bytes()
        targets = [j for j in range(self.n) if j != msg.sender] if msg.receiver == BROADCAST \
            else [msg.receiver]
        for j in targets:
            self._conn(msg.sender, j).sendall(raw)

    def receive(self, agent, count):
        out = []
        for _ in range(count):
            try:
                raw = self._inbox[agent].get(timeout=self.timeout)
            except queue.Empty:
                raise ProtocolTimeout(f"agent {agent} timed out after {len(out)}/{count} messages")
            out.append(ProtocolMessage.from_bytes(raw))
        return out

    def close(self):
        self._closed = True
        for s in list(self._out.values()) + self._servers:
            try:
                s.close()
            except OSError:
                pass


class Phase(enum.Enum):
    IDLE = 0
    SHARES_SENT = 1
    AWAITING_SHARES = 2
    SUMMED = 3
    AWAITING_PARTIALS = 4
    DONE = 5


def sum_shares(field: PrimeField, kept, received) -> np.ndarray:
    """Elementwise field sum of the kept piece and the ``n - 1`` received pieces."""
    payloads = [np.asarray(kept, dtype=np.uint64)] + [np.asarray(r, dtype=np.uint64) for r in received]
    lengths = {len(p) for p in payloads}
    if len(lengths) != 1:
        raise LengthMismatch(f"share payload lengths differ: {sorted(lengths)}")
    return field.sum(np.stack(payloads))


def combine_partials(field: PrimeField, partials, precision: int = PRECISION) -> np.ndarray:
    """Reconstruct and decode the per-entry sums from all ``n`` partial sums."""
    lengths = {len(p) for p in partials}
    if len(lengths) > 1:
        raise LengthMismatch(f"partial-sum payload lengths differ: {sorted(lengths)}")
    return field.decode(field.sum(np.stack(partials)), precision)


class SummationParty:
    """One agent's side of the summation protocol for a single round at a time."""

    def __init__(self, agent_id: int, n: int, field: PrimeField = DEFAULT_FIELD,
                 precision: int = PRECISION, m_max: float = M_MAX):
        self.agent_id = agent_id
        self.n = n
        self.field = field
        self.precision = precision
        self.m_max = m_max
        self.phase = Phase.IDLE
        self.round_id = None
        self._reset()

    def _reset(self):
        self.kept = None
        self.received_shares: dict[int, np.ndarray] = {}
        self.partials: dict[int, np.ndarray] = {}
        self.length = None

    def open_round(self, round_id: int, m_vector, rng: np.random.Generator) -> list[ProtocolMessage]:
        if self.phase not in (Phase.IDLE, Phase.DONE):
            raise ProtocolError(f"agent {self.agent_id} opened a round while in {self.phase.name}")
        if self.round_id is not None and round_id <= self.round_id:
            raise ProtocolError(f"round id {round_id} does not increase past {self.round_id}")
        m = np.asarray(m_vector, dtype=np.float64)
        if m.size and np.max(np.abs(m)) > self.m_max:
            raise ProtocolError(f"message magnitude exceeds the bound {self.m_max:g}")
        self._reset()
        self.round_id = round_id
        self.length = m.size
        codes = self.field.encode(m, self.precision)
        shares = self.field.share(np.asarray(codes, dtype=np.uint64), self.n, rng)
        self.kept = shares[self.agent_id]
        self.phase = Phase.SHARES_SENT
        msgs = [ProtocolMessage(round_id, self.agent_id, j, Kind.SHARE, shares[j])
                for j in range(self.n) if j != self.agent_id]
        self.phase = Phase.AWAITING_SHARES
        return msgs

    def deliver(self, msg: ProtocolMessage):
        if msg.round_id != self.round_id:
            raise ProtocolError(f"message for round {msg.round_id} during round {self.round_id}")
        if msg.kind == Kind.SHARE:
            target = self.received_shares
        elif msg.kind == Kind.PARTIAL_SUM:
            target = self.partials
        else:
            raise ProtocolError(f"unexpected {msg.kind.name} message in summation round")
        if msg.sender in target or msg.sender == self.agent_id:
            raise ProtocolError(f"duplicate {msg.kind.name} from agent {msg.sender}")
        if len(msg.payload) != self.length:
            raise LengthMismatch(f"payload length {len(msg.payload)} != {self.length}")
        target[msg.sender] = msg.payload

    def on_shares_complete(self) -> ProtocolMessage:
        if self.phase != Phase.AWAITING_SHARES or len(self.received_shares) != self.n - 1:
            raise IncompleteRound(
                f"agent {self.agent_id} holds {len(self.received_shares)}/{self.n - 1} shares")
        received = [self.received_shares[j] for j in sorted(self.received_shares)]
        partial = sum_shares(self.field, self.kept, received)
        self.phase = Phase.SUMMED
        self.own_partial = partial
        self.phase = Phase.AWAITING_PARTIALS
        return ProtocolMessage(self.round_id, self.agent_id, BROADCAST, Kind.PARTIAL_SUM, partial)

    def close_round(self) -> np.ndarray:
        if self.phase != Phase.AWAITING_PARTIALS or len(self.partials) != self.n - 1:
            raise IncompleteRound(
                f"agent {self.agent_id} holds {len(self.partials)}/{self.n - 1} partial sums")
        partials = [self.own_partial] + [self.partials[j] for j in sorted(self.partials)]
        out = combine_partials(self.field, partials, self.precision)
        self.phase = Phase.DONE
        return out


def run_summation(transport: Transport, parties: list[SummationParty], m_vectors, rngs,
                  round_id: int) -> list[np.ndarray]:
    """Drive every party through one round on a single thread.

    The two barriers sit exactly between the share and partial-sum phases and
    after the partial-sum phase.
    """
    n = len(parties)
    for p, m, rng in zip(parties, m_vectors, rngs):
        for msg in p.open_round(round_id, m, rng):
            transport.send(msg)
    for p in parties:
        for msg in transport.receive(p.agent_id, n - 1):
            p.deliver(msg)
    for p in parties:
        transport.send(p.on_shares_complete())
    for p in parties:
        for msg in transport.receive(p.agent_id, n - 1):
            p.deliver(msg)
    return [p.close_round() for p in parties]


def run_summation_threaded(transport: Transport, parties, m_vectors, rngs, round_id):
    """Same protocol with every party on its own thread (for socket transports).

    Partial sums from fast agents may arrive before slow agents finish the
    share phase; parties buffer them.
    """
    n = len(parties)
    results = [None] * n
    errors = []

    def agent(i):
        try:
            p = parties[i]
            for msg in p.open_round(round_id, m_vectors[i], rngs[i]):
                transport.send(msg)
            early = []
            while len(p.received_shares) < n - 1:
                (msg,) = transport.receive(i, 1)
                if msg.kind == Kind.PARTIAL_SUM:
                    early.append(msg)
                else:
                    p.deliver(msg)
            transport.send(p.on_shares_complete())
            for msg in early:
                p.deliver(msg)
            while len(p.partials) < n - 1:
                (msg,) = transport.receive(i, 1)
                p.deliver(msg)
            results[i] = p.close_round()
        except Exception as exc:  # surfaced on the calling thread
            errors.append(exc)

    threads = [threading.Thread(target=agent, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def broadcast_indices(transport: Transport, round_id: int, sender: int, indices) -> np.ndarray:
    """Send the minibatch indices from ``sender`` to everyone and collect them back.

    Returns the indices every receiver decoded (asserted identical).
    """
    payload = np.asarray(indices, dtype=np.uint64)
    transport.send(ProtocolMessage(round_id, sender, BROADCAST, Kind.INDICES, payload))
    for j in range(transport.n):
        if j == sender:
            continue
        (msg,) = transport.receive(j, 1)
        if msg.kind != Kind.INDICES or not np.array_equal(msg.payload, payload):
            raise ProtocolError(f"agent {j} received a corrupted index broadcast")
    return payload.astype(np.int64)


def exchange_plain(transport: Transport, round_id: int, m_vectors) -> list[list[np.ndarray]]:
    """Plaintext all-to-all exchange of float64 message vectors.

    Returns, for each agent, the full list of vectors indexed by sender.
    """
    n = transport.n
    for i, m in enumerate(m_vectors):
        bits = np.ascontiguousarray(m, dtype=np.float64).view(np.uint64)
        transport.send(ProtocolMessage(round_id, i, BROADCAST, Kind.PLAIN, bits))
    views = []
    for i in range(n):
        got = [None] * n
        got[i] = np.asarray(m_vectors[i], dtype=np.float64)
        for msg in transport.receive(i, n - 1):
            got[msg.sender] = msg.floats()
        views.append(got)
    return views
