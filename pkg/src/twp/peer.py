"""Participant state machine for the Three-Way Ping mesh.

The peer is transport-agnostic: ``on_tick`` and ``on_message`` return
lists of :class:`Send` actions and append events to the peer's
:class:`RotatingLog`. Callers own the clock and the socket.
"""

from __future__ import annotations

import logging
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

from .wire import LogRecord, MessageType, TwpMessage, encode_log, seq_next

log = logging.getLogger(__name__)

DEFAULT_PROBE_INTERVAL_MS = 10_000
DEFAULT_PENDING_EXPIRY_MS = 60_000
DEFAULT_ROTATION_S = 3600
MAX_ROSTER = 256

# Remembered expired/seen keys; bounds memory on long runs.
_HISTORY = 4096


class SameNode(ValueError):
    pass


def rotation_length(n: int) -> int:
    """Ticks needed for every unordered pair to meet once."""
    return n - 1 if n % 2 == 0 else n


def partner_at_tick(self_id: int, n: int, tick: int) -> Optional[int]:
    """Circle-method round-robin partner of ``self_id`` at ``tick``.

    For even ``n`` node ``n - 1`` is the fixed hub and nodes ``0..n-2``
    rotate; node ``i`` meets ``j`` when ``i + j = 2 * tick (mod n - 1)``,
    and the node with ``2i = 2 * tick`` meets the hub. For odd ``n`` the
    hub is a dummy slot, so that node sits the tick out (returns None).
    """
    if n < 2:
        raise ValueError("roster needs at least two nodes")
    if not 0 <= self_id < n:
        raise ValueError(f"node {self_id} outside roster of {n}")
    ring = n - 1 if n % 2 == 0 else n
    hub = n - 1 if n % 2 == 0 else None
    t = tick % ring
    if self_id == hub:
        return t
    j = (2 * t - self_id) % ring
    if j == self_id:
        return hub
    return j


def matching_at_tick(n: int, tick: int) -> list[tuple[int, int]]:
    pairs = []
    for i in range(n):
        j = partner_at_tick(i, n, tick)
        if j is not None and i < j:
            pairs.append((i, j))
    return pairs


def initiator_of(i: int, j: int, n: int) -> int:
    """The node of the pair {i, j} that sends PINGs.

    Each node initiates towards the next floor((n-1)/2) nodes clockwise;
    with even n the diametrically opposite pair goes to the lower id.
    """
    if i == j:
        raise SameNode(f"initiator_of({i}, {j}) needs two distinct nodes")
    d = (j - i) % n
    if 1 <= d <= (n - 1) // 2:
        return i
    if n % 2 == 0 and d == n // 2 and i < j:
        return i
    return j


@dataclass
class PeerConfig:
    self_id: int
    roster_size: int
    probe_interval_ms: int = DEFAULT_PROBE_INTERVAL_MS
    pending_expiry_ms: int = DEFAULT_PENDING_EXPIRY_MS
    rotation_interval_s: float = DEFAULT_ROTATION_S
    initial_seq: int = 0

    def __post_init__(self):
        if not 2 <= self.roster_size <= MAX_ROSTER:
            raise ValueError(f"roster size {self.roster_size} not in [2, {MAX_ROSTER}]")
        if not 0 <= self.self_id < self.roster_size:
            raise ValueError(f"self_id {self.self_id} outside roster")
        if self.probe_interval_ms <= 0:
            raise ValueError("probe interval must be positive")
        if self.pending_expiry_ms <= 0:
            raise ValueError("pending expiry must be positive")


@dataclass(frozen=True)
class Send:
    dst: int
    msg: TwpMessage


@dataclass
class Segment:
    index: int
    records: list[LogRecord]
    opened_ms: int
    sealed_ms: int

    def to_bytes(self) -> bytes:
        return encode_log(self.records)


class RotatingLog:
    """Active segment plus sealed segments waiting for upload."""

    def __init__(self, rotation_interval_s: float = DEFAULT_ROTATION_S, now_ms: int = 0):
        self.rotation_interval_ms = rotation_interval_s * 1000.0
        self.active: list[LogRecord] = []
        self.opened_ms = now_ms
        self.next_index = 0
        self.upload_queue: deque[Segment] = deque()

    def append(self, rec: LogRecord) -> None:
        self.active.append(rec)

    def due(self, now_ms: int) -> bool:
        return now_ms - self.opened_ms >= self.rotation_interval_ms

    def rotate(self, now_ms: int) -> Segment:
        seg = Segment(self.next_index, self.active, self.opened_ms, now_ms)
        self.next_index += 1
        self.active = []
        self.opened_ms = now_ms
        self.upload_queue.append(seg)
        return seg


@dataclass
class PeerCounters:
    sent: int = 0
    received: int = 0
    late: int = 0
    unsolicited: int = 0
    duplicate: int = 0
    expired: int = 0


@dataclass
class _Pending:
    sent_ms: int


class Peer:
    """Serial owner of one node's protocol state."""

    def __init__(self, config: PeerConfig, now_ms: int = 0):
        self.config = config
        self.id = config.self_id
        self.n = config.roster_size
        self.tick = 0
        self.log = RotatingLog(config.rotation_interval_s, now_ms)
        # (peer, seq, expected kind) -> pending entry
        self.pending: dict[tuple[int, int, MessageType], _Pending] = {}
        self._expired: OrderedDict = OrderedDict()
        self._seen_pings: dict[int, OrderedDict] = {}
        self._next_seq: dict[int, int] = {}
        self.counters = PeerCounters()
        self.running = True

    # -- helpers ---------------------------------------------------------

    def _record(self, now_ms: int, seq: int, kind: MessageType, received: bool, other: int):
        src, dst = (other, self.id) if received else (self.id, other)
        self.log.append(LogRecord(max(0, int(now_ms)), seq, kind, received, src, dst))

    def _send(self, now_ms: int, dst: int, kind: MessageType, seq: int) -> Send:
        self._record(now_ms, seq, kind, False, dst)
        self.counters.sent += 1
        return Send(dst, TwpMessage(kind, seq))

    def expire(self, now_ms: int) -> None:
        limit = self.config.pending_expiry_ms
        stale = [k for k, p in self.pending.items() if now_ms - p.sent_ms > limit]
        for key in stale:
            del self.pending[key]
            self._expired[key] = None
            self.counters.expired += 1
        while len(self._expired) > _HISTORY:
            self._expired.popitem(last=False)

    def _take_pending(self, key, now_ms: int) -> bool:
        self.expire(now_ms)
        if key in self.pending:
            del self.pending[key]
            return True
        if key in self._expired:
            self.counters.late += 1
        else:
            self.counters.unsolicited += 1
        return False

    def next_seq(self, peer: int) -> int:
        seq = self._next_seq.get(peer, self.config.initial_seq)
        self._next_seq[peer] = seq_next(seq)
        return seq

    # -- protocol --------------------------------------------------------

    def partner(self, tick: Optional[int] = None) -> Optional[int]:
        return partner_at_tick(self.id, self.n, self.tick if tick is None else tick)

    def on_tick(self, now_ms: int, tick: Optional[int] = None) -> list[Send]:
        """Start a round towards this tick's partner if we initiate the pair."""
        if not self.running:
            return []
        if tick is not None:
            self.tick = tick
        self.expire(now_ms)
        j = self.partner()
        self.tick += 1
        if j is None or initiator_of(self.id, j, self.n) != self.id:
            return []
        seq = self.next_seq(j)
        self.pending[(j, seq, MessageType.PING_ACK)] = _Pending(now_ms)
        return [self._send(now_ms, j, MessageType.PING, seq)]

    def on_message(self, msg: TwpMessage, sender: int, now_ms: int) -> list[Send]:
        if not 0 <= sender < self.n or sender == self.id:
            self.counters.unsolicited += 1
            return []
        seq = msg.seq
        if msg.kind == MessageType.PING:
            if initiator_of(self.id, sender, self.n) != sender:
                self.counters.unsolicited += 1
                return []
            seen = self._seen_pings.setdefault(sender, OrderedDict())
            if seq in seen:
                self.counters.duplicate += 1
                return []
            seen[seq] = None
            if len(seen) > _HISTORY:
                seen.popitem(last=False)
            self.counters.received += 1
            self._record(now_ms, seq, MessageType.PING, True, sender)
            self.expire(now_ms)
            self.pending[(sender, seq, MessageType.ACK)] = _Pending(now_ms)
            return [self._send(now_ms, sender, MessageType.PING_ACK, seq)]

        if msg.kind == MessageType.PING_ACK:
            if not self._take_pending((sender, seq, MessageType.PING_ACK), now_ms):
                return []
            self.counters.received += 1
            self._record(now_ms, seq, MessageType.PING_ACK, True, sender)
            return [self._send(now_ms, sender, MessageType.ACK, seq)]

        if not self._take_pending((sender, seq, MessageType.ACK), now_ms):
            return []
        self.counters.received += 1
        self._record(now_ms, seq, MessageType.ACK, True, sender)
        return []

    def rotate_log(self, now_ms: int) -> Segment:
        return self.log.rotate(now_ms)

    def maybe_rotate(self, now_ms: int) -> Optional[Segment]:
        if self.log.due(now_ms):
            return self.rotate_log(now_ms)
        return None

    def stop(self) -> None:
        self.running = False
