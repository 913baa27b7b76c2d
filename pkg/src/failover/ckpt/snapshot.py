"""Checkpoint razor and host-side snapshots.

Every blob this package persists or ships starts with a fixed 32-byte
little-endian header::

    offset  size  field
    0       4     magic b"FVSN"
    4       1     header version (1 = little-endian layout below)
    5       1     kind (see BlobKind)
    6       2     reserved, zero
    8       8     iteration
    16      2     dp index
    18      2     pp index
    20      2     tp index
    22      2     reserved, zero
    24      4     payload length
    28      4     CRC-32 of bytes 0-27 followed by the payload

The checksum covers the header too, so a flipped bit anywhere is caught.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

from ..domain import ClusterSpec, Role, StateBundle
from ..errors import ChecksumError, ConfigError

HEADER = struct.Struct("<4sBBHQHHHHII")
MAGIC = b"FVSN"
HEADER_VERSION = 1
CRC_OFFSET = 28
assert HEADER.size == 32


class BlobKind(enum.IntEnum):
    UNIQUE = 1  # plan-unique optimizer bytes, the per-iteration backup payload
    WEIGHTS = 2
    OPTIMIZER = 3
    FULL = 4  # complete bundle, used by fallback checkpoints

    @property
    def suffix(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class BlobHeader:
    kind: BlobKind
    iteration: int
    role: Role
    length: int
    checksum: int


def encode_blob(kind: BlobKind, role: Role, iteration: int, payload: bytes) -> bytes:
    payload = bytes(payload)
    head = HEADER.pack(MAGIC, HEADER_VERSION, int(kind), 0, iteration, role.dp_index,
                       role.pp_index, role.tp_index, 0, len(payload), 0)[:CRC_OFFSET]
    crc = zlib.crc32(payload, zlib.crc32(head))
    return head + crc.to_bytes(4, "little") + payload


def read_header(blob: bytes) -> BlobHeader:
    if len(blob) < HEADER.size:
        raise ChecksumError("blob shorter than its header")
    magic, version, kind, _, it, dp, pp, tp, _, length, crc = HEADER.unpack_from(blob)
    if magic != MAGIC or version != HEADER_VERSION:
        raise ChecksumError(f"bad blob header (magic {magic!r}, version {version})")
    if kind not in BlobKind.__members__.values():
        raise ChecksumError(f"unknown blob kind {kind}")
    return BlobHeader(BlobKind(kind), it, Role(dp, pp, tp), length, crc)


def decode_blob(blob: bytes) -> tuple[BlobHeader, bytes]:
    """Split and verify a blob; raises ChecksumError on any mismatch."""
    head = read_header(blob)
    payload = bytes(blob[HEADER.size:])
    if len(payload) != head.length:
        raise ChecksumError(f"payload is {len(payload)} bytes, header says {head.length}")
    if zlib.crc32(payload, zlib.crc32(bytes(blob[:CRC_OFFSET]))) != head.checksum:
        raise ChecksumError(f"checksum mismatch for {head.role} at iteration {head.iteration}")
    return head, payload


def pack_full(weights: bytes, optimizer: bytes) -> bytes:
    return struct.pack("<I", len(weights)) + weights + optimizer


def unpack_full(payload: bytes) -> tuple[bytes, bytes]:
    (n,) = struct.unpack_from("<I", payload)
    return payload[4:4 + n], payload[4 + n:]


@dataclass(frozen=True)
class UniquenessPlan:
    weights_redundant: bool
    optimizer_redundant: bool
    unique_bytes_per_device: float  # modeled bytes streamed to the neighbour each iteration
    full_bytes_per_device: float

    @property
    def backup_payload(self) -> float:
        return self.unique_bytes_per_device if self.weights_redundant else 0.0

    @property
    def optimizer_unique(self) -> bool:
        return not self.optimizer_redundant


def razor(spec: ClusterSpec) -> UniquenessPlan:
    """Strip state replicated across DP peers; what is left must be backed up."""
    phi = spec.params_per_device
    weights_redundant = spec.d > 1
    optimizer_redundant = spec.d > 1 and not spec.distributed_optimizer
    if spec.d == 1:
        unique = 12 * phi
    elif optimizer_redundant:
        unique = 0.0
    else:
        unique = 12 * phi / spec.d
    return UniquenessPlan(weights_redundant, optimizer_redundant, unique, 16 * phi)


@dataclass(frozen=True)
class HostSnapshot:
    role: Role
    iteration: int
    blob: bytes  # header + unique payload

    @property
    def payload(self) -> bytes:
        return decode_blob(self.blob)[1]

    def verify(self) -> None:
        decode_blob(self.blob)


class SnapshotBuffer:
    """Pre-allocated host memory holding the two most recent snapshots of one worker."""

    def __init__(self, role: Role, capacity: int):
        self.role = role
        self.capacity = capacity
        self._slots = [bytearray(HEADER.size + capacity), bytearray(HEADER.size + capacity)]
        self._meta: list[tuple[int, int] | None] = [None, None]  # (iteration, length)
        self._next = 0

    def store(self, iteration: int, payload: bytes) -> HostSnapshot:
        if len(payload) > self.capacity:
            raise ConfigError(f"snapshot of {len(payload)} bytes exceeds the "
                              f"{self.capacity}-byte host buffer")
        blob = encode_blob(BlobKind.UNIQUE, self.role, iteration, payload)
        slot = self._slots[self._next]
        slot[:len(blob)] = blob
        self._meta[self._next] = (iteration, len(blob))
        self._next ^= 1
        return HostSnapshot(self.role, iteration, bytes(blob))

    def iterations(self) -> list[int]:
        return sorted(m[0] for m in self._meta if m is not None)

    def get(self, iteration: int) -> HostSnapshot | None:
        for slot, meta in zip(self._slots, self._meta):
            if meta is not None and meta[0] == iteration:
                return HostSnapshot(self.role, iteration, bytes(slot[:meta[1]]))
        return None


def snapshot(state: StateBundle, plan: UniquenessPlan, buffer: SnapshotBuffer) -> HostSnapshot:
    """Copy the plan-unique part of ``state`` into the host buffer.

    With a redundant optimizer nothing is unique and the snapshot is header-only.
    """
    payload = state.optimizer_current.blob if plan.optimizer_unique else b""
    return buffer.store(state.iteration, payload)


def unique_capacity(plan: UniquenessPlan, real_optimizer_bytes: int) -> int:
    """Host buffer size for the real (stand-in) blobs a worker will snapshot."""
    return real_optimizer_bytes if plan.optimizer_unique else 0
