"""Wire datagrams, 15-byte log records and serial-number comparison.

Datagram layout (6 bytes, little-endian)::

    version:u8  kind:u8  seq:u32

Log record layout (15 bytes, little-endian)::

    timestamp_ms:u64  seq:u32  kind:u8  src:u8  dst:u8

The record kind byte carries the direction in bit 7 (0 = send,
1 = receive) and the message type in bits 0-2. Bits 3-6 are reserved
and must be zero.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterator

VERSION = 1
MESSAGE_SIZE = 6
RECORD_SIZE = 15
SEQ_MOD = 1 << 32
SEQ_HALF = 1 << 31

_MESSAGE = struct.Struct("<BBI")
_RECORD = struct.Struct("<QIBBB")
_RECV_BIT = 0x80
_TYPE_MASK = 0x07

assert _MESSAGE.size == MESSAGE_SIZE
assert _RECORD.size == RECORD_SIZE


class CodecError(ValueError):
    """Base class for datagram and record decoding failures."""


class WrongLength(CodecError):
    pass


class BadVersion(CodecError):
    pass


class BadType(CodecError):
    pass


class SrcEqualsDst(CodecError):
    pass


class CorruptLog(CodecError):
    """A `.twplog` stream failed to decode; ``offset`` is the byte position."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt log at byte offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class MessageType(enum.IntEnum):
    PING = 0
    PING_ACK = 1
    ACK = 2


@dataclass(frozen=True)
class TwpMessage:
    kind: MessageType
    seq: int
    version: int = VERSION


@dataclass(frozen=True)
class LogRecord:
    """One send or receive event as stored in a node's log.

    ``src`` and ``dst`` are the message's origin and destination, so a
    receive event at node 3 for a PING from node 1 has ``src=1, dst=3``.
    """

    timestamp_ms: int
    seq: int
    kind: MessageType
    received: bool
    src: int
    dst: int

    @property
    def owner(self) -> int:
        """Node whose log holds this event."""
        return self.dst if self.received else self.src


def _message_type(value: int, what: str) -> MessageType:
    try:
        return MessageType(value)
    except ValueError:
        raise BadType(f"{what} 0x{value:02x} is not a message type") from None


def encode_message(msg: TwpMessage) -> bytes:
    return _MESSAGE.pack(msg.version, int(msg.kind), msg.seq % SEQ_MOD)


def decode_message(data: bytes) -> TwpMessage:
    if len(data) != MESSAGE_SIZE:
        raise WrongLength(f"datagram is {len(data)} bytes, expected {MESSAGE_SIZE}")
    version, kind, seq = _MESSAGE.unpack(data)
    if version != VERSION:
        raise BadVersion(f"byte 0 (version) is 0x{version:02x}, expected 0x{VERSION:02x}")
    return TwpMessage(_message_type(kind, "byte 1 (kind)"), seq, version)


def kind_byte(kind: MessageType, received: bool) -> int:
    return (_RECV_BIT if received else 0) | int(kind)


def encode_record(rec: LogRecord) -> bytes:
    if rec.src == rec.dst:
        raise SrcEqualsDst(f"src and dst are both {rec.src}")
    return _RECORD.pack(
        rec.timestamp_ms,
        rec.seq % SEQ_MOD,
        kind_byte(rec.kind, rec.received),
        rec.src,
        rec.dst,
    )


def decode_record(data: bytes) -> LogRecord:
    if len(data) != RECORD_SIZE:
        raise WrongLength(f"record is {len(data)} bytes, expected {RECORD_SIZE}")
    ts, seq, kb, src, dst = _RECORD.unpack(data)
    if kb & ~(_RECV_BIT | _TYPE_MASK):
        raise BadType(f"byte 12 (kind) 0x{kb:02x} has reserved bits set")
    kind = _message_type(kb & _TYPE_MASK, "byte 12 (kind)")
    if src == dst:
        raise SrcEqualsDst(f"bytes 13-14 (src, dst) are both {src}")
    return LogRecord(ts, seq, kind, bool(kb & _RECV_BIT), src, dst)


def encode_log(records) -> bytes:
    return b"".join(encode_record(r) for r in records)


def iter_log(data: bytes, base_offset: int = 0) -> Iterator[LogRecord]:
    """Decode a concatenation of records, raising CorruptLog with the offset."""
    view = memoryview(data)
    full = len(data) - len(data) % RECORD_SIZE
    for off in range(0, full, RECORD_SIZE):
        try:
            yield decode_record(bytes(view[off:off + RECORD_SIZE]))
        except CodecError as exc:
            raise CorruptLog(base_offset + off, str(exc)) from exc
    if full != len(data):
        raise CorruptLog(
            base_offset + full,
            f"truncated record: {len(data) - full} trailing bytes",
        )


def decode_log(data: bytes) -> list[LogRecord]:
    return list(iter_log(data))


def seq_less_than(a: int, b: int) -> bool:
    """Serial-number ordering: true iff (b - a) mod 2**32 is in [1, 2**31 - 1]."""
    d = (b - a) % SEQ_MOD
    return 0 < d < SEQ_HALF


def seq_next(a: int) -> int:
    return (a + 1) % SEQ_MOD
