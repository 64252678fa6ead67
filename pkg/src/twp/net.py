"""asyncio transports for the coordinator (TCP) and peers (UDP probes + TCP control)."""

from __future__ import annotations

import asyncio
import logging
import os
import socket
import time
from pathlib import Path
from typing import Optional

from .coordinator import (
    Coordinator,
    CoordinatorError,
    ProtocolError,
    Roster,
    parse_addr,
)
from .peer import DEFAULT_PENDING_EXPIRY_MS, DEFAULT_ROTATION_S, Peer, PeerConfig, Segment
from .wire import CodecError, decode_message, encode_message

log = logging.getLogger(__name__)

MAX_SEGMENT_BYTES = 1 << 31


def now_ms() -> int:
    return int(time.time() * 1000)


def _resolve(addr: str) -> tuple[str, int]:
    host, port = parse_addr(addr)
    try:
        host = socket.gethostbyname(host)
    except OSError:
        pass
    return host, port


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def segment_path(root, node: int, index: int) -> Path:
    return Path(root) / str(node) / f"{index}.twplog"


class _Session:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self.node: Optional[int] = None
        self.addr: Optional[str] = None
        self.started = asyncio.Event()

    def send(self, line: str) -> None:
        if not self.writer.is_closing():
            self.writer.write(line.encode() + b"\n")


class CoordinatorServer:
    """Serves the control protocol; all state changes go through one Coordinator."""

    def __init__(self, out_dir, interval_ms: int, max_uploads: int = 4,
                 expected_nodes: Optional[int] = None, register_s: float = 10.0):
        self.out_dir = Path(out_dir)
        self.core = Coordinator(interval_ms, max_uploads)
        self.expected = expected_nodes
        self.register_s = register_s
        self.sessions: list[_Session] = []
        self.by_node: dict[int, _Session] = {}
        self.server: Optional[asyncio.base_events.Server] = None
        self.roster: Optional[Roster] = None
        self._started = asyncio.Event()
        self._finished = asyncio.Event()

    @property
    def port(self) -> int:
        return self.server.sockets[0].getsockname()[1]

    async def listen(self, addr: str) -> None:
        host, port = parse_addr(addr)
        self.server = await asyncio.start_server(self._handle, host, port)

    def _start(self) -> None:
        if self._started.is_set():
            return
        self.roster = self.core.start(now_ms())
        (self.out_dir).mkdir(parents=True, exist_ok=True)
        (self.out_dir / "roster.txt").write_text(self.roster.encode() + "\n")
        for s in self.sessions:
            self._welcome(s)
        self._started.set()

    def _welcome(self, s: _Session) -> None:
        if s.addr is None or s.started.is_set():
            return
        s.node = self.roster.id_of(s.addr)
        self.by_node[s.node] = s
        s.send(self.roster.encode())
        s.send(f"START {self.core.start_ms}")
        s.started.set()

    async def run(self, duration_s: float, finish_timeout_s: float = 60.0) -> Roster:
        """Registration window, measurement for ``duration_s``, then STOP and drain."""
        deadline = time.monotonic() + self.register_s
        while not self._started.is_set():
            enough = self.expected is not None and self.core.registered >= self.expected
            if enough or time.monotonic() >= deadline:
                if self.core.registered >= 2:
                    self._start()
                    break
                if time.monotonic() >= deadline:
                    raise CoordinatorError(f"only {self.core.registered} node(s) registered")
            await asyncio.sleep(0.02)
        await asyncio.sleep(duration_s)
        for node in self.core.finalize():
            s = self.by_node.get(node)
            if s is not None:
                s.send("STOP")
        try:
            await asyncio.wait_for(self._finished.wait(), finish_timeout_s)
        except asyncio.TimeoutError:
            missing = set(range(len(self.roster))) - self.core.finished
            log.warning("peers %s did not finish", sorted(missing))
        self.server.close()
        for s in self.sessions:
            s.writer.close()
        await self.server.wait_closed()
        return self.roster

    async def _handle(self, reader, writer) -> None:
        s = _Session(reader, writer)
        self.sessions.append(s)
        try:
            while True:
                raw = await reader.readline()
                if not raw:
                    break
                fields = raw.decode(errors="replace").split()
                if not fields:
                    continue
                try:
                    await self._dispatch(s, fields)
                except (CoordinatorError, ValueError) as exc:
                    s.send(f"ERROR {exc}".replace("\n", " "))
            await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            if s.node is not None and self.by_node.get(s.node) is s:
                del self.by_node[s.node]
                for g in self.core.release_upload(s.node):
                    self._grant(g)

    def _grant(self, node: int) -> None:
        s = self.by_node.get(node)
        if s is not None:
            s.send(f"UPLOAD-GRANT {node}")

    async def _dispatch(self, s: _Session, f: list[str]) -> None:
        verb = f[0]
        if verb == "REGISTER" and len(f) == 2:
            self.core.register(f[1])
            s.addr = f[1]
            s.send(f"REGISTERED {f[1]}")
            if self._started.is_set():  # rejoin after a restart
                self._welcome(s)
            return
        if s.node is None:
            raise ProtocolError(f"{verb} before START")
        node = int(f[1]) if len(f) > 1 and verb != "SEGMENT" else s.node
        if verb in ("UPLOAD-REQ", "UPLOAD-DONE", "FINISHED") and node != s.node:
            raise ProtocolError(f"session belongs to node {s.node}, not {node}")
        if verb == "UPLOAD-REQ":
            if self.core.grant_upload(node):
                self._grant(node)
        elif verb == "SEGMENT" and len(f) == 4:
            node, index, nbytes = int(f[1]), int(f[2]), int(f[3])
            if not 0 <= nbytes < MAX_SEGMENT_BYTES:
                raise ProtocolError("bad SEGMENT length")
            # consume the payload first so a rejected segment keeps the stream in sync
            data = await s.reader.readexactly(nbytes)
            if node != s.node:
                raise ProtocolError(f"session belongs to node {s.node}, not {node}")
            if node not in self.core.slots.active:
                raise ProtocolError("SEGMENT without an upload grant")
            _atomic_write(segment_path(self.out_dir, node, index), data)
        elif verb == "UPLOAD-DONE":
            for g in self.core.release_upload(node):
                self._grant(g)
        elif verb == "FINISHED":
            if self.core.mark_finished(node):
                self._finished.set()
        else:
            raise ProtocolError(f"unknown or malformed message {' '.join(f)!r}")
        await s.writer.drain()


class _Udp(asyncio.DatagramProtocol):
    def __init__(self, runtime: "PeerRuntime"):
        self.rt = runtime

    def datagram_received(self, data, addr):
        self.rt.on_datagram(data, addr)


class PeerRuntime:
    """One measurement node: registers, probes on schedule, uploads segments."""

    def __init__(self, coordinator: str, listen: str, log_dir,
                 rotate_s: float = DEFAULT_ROTATION_S,
                 pending_expiry_ms: int = DEFAULT_PENDING_EXPIRY_MS,
                 stop_grace_ms: Optional[int] = None):
        self.coordinator = coordinator
        self.listen = listen
        self.log_dir = Path(log_dir)
        self.rotate_s = rotate_s
        self.pending_expiry_ms = pending_expiry_ms
        self.stop_grace_ms = stop_grace_ms
        self.peer: Optional[Peer] = None
        self.roster: Optional[Roster] = None
        self.transport = None
        self._addr_to_id: dict[tuple[str, int], int] = {}
        self._id_to_addr: list[tuple[str, int]] = []
        self.bad_datagrams = 0

    def on_datagram(self, data: bytes, addr) -> None:
        if self.peer is None:
            return
        sender = self._addr_to_id.get((addr[0], addr[1]))
        try:
            msg = decode_message(data)
        except CodecError:
            self.bad_datagrams += 1
            return
        if sender is None:
            self.peer.counters.unsolicited += 1
            return
        self._emit(self.peer.on_message(msg, sender, now_ms()))

    def _emit(self, sends) -> None:
        for s in sends:
            self.transport.sendto(encode_message(s.msg), self._id_to_addr[s.dst])

    def _resume_index(self) -> int:
        existing = [int(p.stem) for p in self.log_dir.glob("*.twplog") if p.stem.isdigit()]
        return max(existing) + 1 if existing else 0

    async def run(self) -> None:
        loop = asyncio.get_running_loop()
        host, port = parse_addr(self.listen)
        self.transport, _ = await loop.create_datagram_endpoint(
            lambda: _Udp(self), local_addr=(host, port))
        bound = self.transport.get_extra_info("sockname")
        self.listen = f"{host}:{bound[1]}"
        chost, cport = parse_addr(self.coordinator)
        reader, writer = await asyncio.open_connection(chost, cport)
        writer.write(f"REGISTER {self.listen}\n".encode())
        start_ms = None
        while start_ms is None:
            line = (await reader.readline()).decode()
            if not line:
                raise ConnectionError("coordinator closed the control connection")
            f = line.split()
            if f[0] == "ROSTER":
                self.roster = Roster.decode(line)
            elif f[0] == "START":
                start_ms = int(f[1])
            elif f[0] == "ERROR":
                raise CoordinatorError(line[6:].strip())

        me = self.roster.id_of(self.listen)
        self._id_to_addr = [_resolve(a) for a in self.roster.addresses]
        self._addr_to_id = {a: i for i, a in enumerate(self._id_to_addr)}
        self.log_dir.mkdir(parents=True, exist_ok=True)
        cfg = PeerConfig(me, len(self.roster), self.roster.interval_ms,
                         self.pending_expiry_ms, self.rotate_s)
        self.peer = Peer(cfg, now_ms())
        self.peer.log.next_index = self._resume_index()

        stop = asyncio.Event()
        granted = asyncio.Event()
        ticker = asyncio.create_task(self._tick_loop(start_ms, stop))
        control = asyncio.create_task(self._control_loop(reader, stop, granted))
        try:
            while not stop.is_set():
                await asyncio.sleep(0.05)
                seg = self.peer.maybe_rotate(now_ms())
                if seg is not None:
                    await self._upload(writer, granted)
            grace = self.stop_grace_ms
            if grace is None:
                grace = min(self.pending_expiry_ms, 2 * self.roster.interval_ms)
            await asyncio.sleep(grace / 1000.0)
            self.peer.rotate_log(now_ms())
            await self._upload(writer, granted)
            writer.write(f"FINISHED {me}\n".encode())
            await writer.drain()
        finally:
            ticker.cancel()
            control.cancel()
            self.transport.close()
            writer.close()

    async def _tick_loop(self, start_ms: int, stop: asyncio.Event) -> None:
        interval = self.roster.interval_ms
        while not stop.is_set():
            t = now_ms()
            tick = max(0, (t - start_ms) // interval)
            self._emit(self.peer.on_tick(t, tick))
            nxt = start_ms + (tick + 1) * interval
            await asyncio.sleep(max(0.0, (nxt - now_ms()) / 1000.0))

    async def _control_loop(self, reader, stop: asyncio.Event, granted: asyncio.Event) -> None:
        while True:
            line = (await reader.readline()).decode()
            if not line:
                stop.set()
                granted.set()
                return
            f = line.split()
            if not f:
                continue
            if f[0] == "STOP":
                self.peer.stop()
                stop.set()
            elif f[0] == "UPLOAD-GRANT":
                granted.set()
            elif f[0] == "ERROR":
                log.warning("coordinator: %s", line.strip())

    async def _upload(self, writer, granted: asyncio.Event) -> None:
        """Keep a local copy, then ship every queued segment under one grant."""
        q = self.peer.log.upload_queue
        if not q:
            return
        for seg in q:
            _atomic_write(self.log_dir / f"{seg.index}.twplog", seg.to_bytes())
        granted.clear()
        writer.write(f"UPLOAD-REQ {self.peer.id}\n".encode())
        await writer.drain()
        await granted.wait()
        while q:
            seg: Segment = q.popleft()
            data = seg.to_bytes()
            writer.write(f"SEGMENT {self.peer.id} {seg.index} {len(data)}\n".encode() + data)
        writer.write(f"UPLOAD-DONE {self.peer.id}\n".encode())
        await writer.drain()
