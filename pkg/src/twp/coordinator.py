"""Coordinator state: registration, roster distribution, upload slots.

Network sessions live in :mod:`twp.net`; this module holds the serial
state transitions and the line-oriented control protocol. Every control
message is one line of space-separated fields::

    REGISTER <addr>
    REGISTERED <addr>
    ROSTER <interval_ms> <id>=<addr> ...
    START <start_epoch_ms>
    UPLOAD-REQ <id>
    UPLOAD-GRANT <id>
    SEGMENT <id> <index> <nbytes>      (followed by nbytes of raw log)
    UPLOAD-DONE <id>
    STOP
    FINISHED <id>
    ERROR <reason>
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

from .peer import DEFAULT_PROBE_INTERVAL_MS, MAX_ROSTER

DEFAULT_MAX_UPLOADS = 4


class CoordinatorError(RuntimeError):
    pass


class RegistrationClosed(CoordinatorError):
    pass


class NotClosed(CoordinatorError):
    pass


class UnknownNode(CoordinatorError):
    pass


class ProtocolError(CoordinatorError):
    pass


class State(enum.Enum):
    REGISTERING = "registering"
    RUNNING = "running"
    FINALIZING = "finalizing"


@dataclass(frozen=True)
class Roster:
    interval_ms: int
    addresses: tuple[str, ...]

    def __len__(self):
        return len(self.addresses)

    def id_of(self, addr: str) -> int:
        return self.addresses.index(addr)

    def encode(self) -> str:
        entries = " ".join(f"{i}={a}" for i, a in enumerate(self.addresses))
        return f"ROSTER {self.interval_ms} {entries}"

    @classmethod
    def decode(cls, line: str) -> "Roster":
        fields = line.split()
        if len(fields) < 2 or fields[0] != "ROSTER":
            raise ProtocolError(f"not a roster line: {line!r}")
        interval = int(fields[1])
        addrs = []
        for expected, entry in enumerate(fields[2:]):
            ident, sep, addr = entry.partition("=")
            if not sep or int(ident) != expected:
                raise ProtocolError(f"roster entry {entry!r} out of order")
            addrs.append(addr)
        return cls(interval, tuple(addrs))


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {addr!r} is not host:port")
    return host.strip("[]"), int(port)


class UploadSlots:
    """At most ``max_concurrent`` grants; the rest wait in FIFO order."""

    def __init__(self, max_concurrent: int = DEFAULT_MAX_UPLOADS):
        if max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        self.max_concurrent = max_concurrent
        self.active: set[int] = set()
        self.waiting: deque[int] = deque()

    def request(self, node: int) -> bool:
        if node in self.active:
            return True
        if node in self.waiting:
            return False
        if len(self.active) < self.max_concurrent:
            self.active.add(node)
            return True
        self.waiting.append(node)
        return False

    def release(self, node: int) -> list[int]:
        """Free ``node``'s slot; returns the nodes granted as a result."""
        self.active.discard(node)
        try:
            self.waiting.remove(node)
        except ValueError:
            pass
        granted = []
        while self.waiting and len(self.active) < self.max_concurrent:
            nxt = self.waiting.popleft()
            self.active.add(nxt)
            granted.append(nxt)
        return granted


class Coordinator:
    def __init__(self, interval_ms: int = DEFAULT_PROBE_INTERVAL_MS,
                 max_uploads: int = DEFAULT_MAX_UPLOADS):
        self.interval_ms = interval_ms
        self.state = State.REGISTERING
        self._addresses: set[str] = set()
        self._roster: Roster | None = None
        self.slots = UploadSlots(max_uploads)
        self.finished: set[int] = set()
        self.start_ms: int | None = None

    def register(self, addr: str) -> int:
        """Register ``addr``; returns its provisional id in sorted order.

        Ids are final once registration closes, because a later address
        may sort before earlier ones.
        """
        if self.state is not State.REGISTERING:
            if self._roster is not None and addr in self._roster.addresses:
                return self._roster.id_of(addr)
            raise RegistrationClosed(f"registration closed; {addr} is not in the roster")
        if addr not in self._addresses and len(self._addresses) >= MAX_ROSTER:
            raise CoordinatorError(f"roster full ({MAX_ROSTER} nodes)")
        self._addresses.add(addr)
        return sorted(self._addresses).index(addr)

    @property
    def registered(self) -> int:
        return len(self._addresses)

    def start(self, start_ms: int = 0) -> Roster:
        if self.state is State.REGISTERING:
            if len(self._addresses) < 2:
                raise NotClosed(f"need at least 2 nodes, have {len(self._addresses)}")
            self._roster = Roster(self.interval_ms, tuple(sorted(self._addresses)))
            self.state = State.RUNNING
            self.start_ms = start_ms
        return self._roster

    def build_roster(self) -> Roster:
        if self._roster is None:
            raise NotClosed("registration still open" if self._addresses else "registry is empty")
        return self._roster

    def _check_node(self, node: int) -> None:
        if self._roster is None or not 0 <= node < len(self._roster):
            raise UnknownNode(f"node {node} is not in the roster")

    def grant_upload(self, node: int) -> bool:
        """True when granted now, False when queued."""
        self._check_node(node)
        if self.state is State.REGISTERING:
            raise NotClosed("uploads are accepted only after start")
        return self.slots.request(node)

    def release_upload(self, node: int) -> list[int]:
        self._check_node(node)
        return self.slots.release(node)

    def finalize(self) -> list[int]:
        """Enter finalizing; returns the nodes that must receive STOP."""
        if self.state is not State.RUNNING:
            return []
        self.state = State.FINALIZING
        return list(range(len(self._roster)))

    def mark_finished(self, node: int) -> bool:
        """Record a peer's FINISHED; true once every peer is done."""
        self._check_node(node)
        self.finished.add(node)
        return self.done

    @property
    def done(self) -> bool:
        return (self.state is State.FINALIZING
                and len(self.finished) == len(self._roster))
