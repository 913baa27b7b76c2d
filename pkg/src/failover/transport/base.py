from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

from ..domain import TID

CTRL_MAX_PAYLOAD = 64 * 1024
DEFAULT_CHUNK = 1 << 20


class Priority(enum.IntEnum):
    """Traffic classes; lower value is served first on a shared link."""

    TRAIN = 0
    STATE = 1
    CTRL = 2


class Direction(str, enum.Enum):
    UP = "up"  # egress from the endpoint's node
    DOWN = "down"  # ingress to the endpoint's node


@dataclass
class Message:
    """One application message.

    ``nbytes`` is the size charged to the link model; it defaults to the real
    payload length.  The simulated harness uses it to ship small synthetic
    blobs while accounting for realistic state sizes.
    """

    priority: Priority
    source: str
    dest: str
    tag: int
    payload: Any = b""
    tid: TID | None = None
    nbytes: int | None = None

    @property
    def size(self) -> int:
        if self.nbytes is not None:
            return int(self.nbytes)
        return len(self.payload) if isinstance(self.payload, (bytes, bytearray, memoryview)) else 0

    def check(self) -> None:
        if self.priority == Priority.CTRL and self.size > CTRL_MAX_PAYLOAD:
            raise ValueError(f"CTRL payload of {self.size} bytes exceeds 64 KiB")
        if not 0 <= self.tag < 1 << 64:
            raise ValueError("tag must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class LinkModel:
    bandwidth: float = 25e9
    latency: float = 5e-6
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.bandwidth <= 0 or self.chunk_size <= 0 or self.latency < 0:
            raise ValueError("bandwidth and chunk_size must be positive, latency non-negative")

    @property
    def chunk_time(self) -> float:
        return self.chunk_size / self.bandwidth


@dataclass
class LinkStats:
    busy_time: float = 0.0
    idle_time: float = 0.0
    bytes_by_priority: dict[Priority, int] = field(
        default_factory=lambda: {p: 0 for p in Priority})

    @property
    def utilization(self) -> float:
        elapsed = self.busy_time + self.idle_time
        return self.busy_time / elapsed if elapsed > 0 else 0.0
