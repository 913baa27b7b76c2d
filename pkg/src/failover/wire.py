"""Controller wire protocol.

Every control message is a 12-byte header followed by a body::

    offset  size  field
    0       2     magic  b"FC"
    2       1     version (currently 1)
    3       1     kind    (see :class:`Kind`)
    4       2     flags   (bit 0: body is binary, otherwise UTF-8 JSON)
    6       2     reserved, zero
    8       4     body length in bytes

All integers are big-endian.  JSON bodies use sorted keys and no whitespace so
encodings are byte-identical across backends.  HEARTBEAT uses a fixed binary
body (pod id u32, iteration i64, timestamp f64) because it is the only message
sent at a high rate.  The layout of each JSON body is documented in
``docs/wire_protocol.md``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Any

from .errors import ProtocolError

MAGIC = b"FC"
VERSION = 1
HEADER = struct.Struct("!2sBBH2xI")
HEARTBEAT_BODY = struct.Struct("!Iqd")
FLAG_BINARY = 1


class Kind(enum.IntEnum):
    REGISTER = 1
    HEARTBEAT = 2
    INDEX_ASSIGN = 3
    CKPT_RECORD = 4
    FAILURE_NOTICE = 5
    BACKUP_ORDER = 6
    STATE_FORWARD = 7
    EPOCH_OPEN = 8
    # replies and rendezvous traffic
    REGISTER_REPLY = 16
    RDV_WRITE = 17
    RDV_READ = 18
    RDV_REPLY = 19
    ACK = 20
    ERROR = 21
    BACKUP_DONE = 22


@dataclass(frozen=True)
class Frame:
    kind: Kind
    body: Any


def encode(kind: Kind, body: Any = None) -> bytes:
    kind = Kind(kind)
    if kind == Kind.HEARTBEAT:
        pod, iteration, ts = body
        raw = HEARTBEAT_BODY.pack(int(pod), int(iteration), float(ts))
        flags = FLAG_BINARY
    else:
        raw = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        flags = 0
    return HEADER.pack(MAGIC, VERSION, kind, flags, len(raw)) + raw


def decode(data: bytes) -> Frame:
    if len(data) < HEADER.size:
        raise ProtocolError("truncated header")
    magic, version, kind, flags, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    raw = bytes(data[HEADER.size:])
    if len(raw) != length:
        raise ProtocolError(f"body length {len(raw)} != declared {length}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    if flags & FLAG_BINARY:
        if kind != Kind.HEARTBEAT or length != HEARTBEAT_BODY.size:
            raise ProtocolError("binary body only valid for HEARTBEAT")
        return Frame(kind, HEARTBEAT_BODY.unpack(raw))
    return Frame(kind, json.loads(raw.decode()))
