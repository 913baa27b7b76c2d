"""Preload buffer and data-server stub (backend independent)."""

from __future__ import annotations

import collections
import hashlib
import os
import struct

from ..domain import TID
from ..errors import AddressingError, ConfigError, ProtocolError

RECORD_HEADER = struct.Struct("<4sHHII")  # magic, version, reserved, record size, count
RECORD_MAGIC = b"FVDR"
SYNTHETIC_ITEM_BYTES = 16


def item_bytes(seq_len: int, batch_size: int) -> int:
    """Bytes one worker consumes per iteration: 4 bytes per token of the local batch."""
    return 4 * seq_len * batch_size


class PreloadBuffer:
    """TID-ordered store of fetched but not yet consumed data, bounded in bytes.

    ``nbytes`` per entry is the size charged against ``capacity``; the stored
    blob itself may be a small stand-in.
    """

    def __init__(self, capacity: float):
        if capacity < 0:
            raise ConfigError("buffer capacity must be non-negative")
        self.capacity = capacity
        self.used = 0.0
        self.high_water = 0.0
        self._entries: collections.OrderedDict[TID, tuple[bytes, float]] = \
            collections.OrderedDict()

    @property
    def free(self) -> float:
        return self.capacity - self.used

    def __contains__(self, tid: TID) -> bool:
        return tid in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def tids(self) -> list[TID]:
        return list(self._entries)

    def put(self, tid: TID, blob: bytes, nbytes: float) -> None:
        if tid in self._entries:
            raise ProtocolError(f"{tid} is already buffered")
        if nbytes > self.free:
            raise ConfigError(f"{nbytes} bytes do not fit ({self.free} free of {self.capacity})")
        if self._entries and tid < next(reversed(self._entries)):
            raise ProtocolError(f"{tid} arrived out of TID order")
        self._entries[tid] = (blob, nbytes)
        self.used += nbytes
        self.high_water = max(self.high_water, self.used)

    def pop(self, tid: TID) -> bytes:
        try:
            blob, nbytes = self._entries.pop(tid)
        except KeyError:
            raise AddressingError(f"{tid} is not buffered") from None
        self.used -= nbytes
        return blob

    def clear(self) -> None:
        self._entries.clear()
        self.used = 0.0


class DataServerStub:
    """Source of training items.

    Synthetic mode derives item ``i`` from ``(seed, i)`` alone, so every
    fetcher sees the same bytes.  File-backed mode reads fixed-size records
    from a flat file with a 16-byte header (see :func:`write_record_file`).
    """

    def __init__(self, mode: str = "synthetic", seed: int = 0, path: str | None = None,
                 item_size: int = SYNTHETIC_ITEM_BYTES):
        if mode not in ("synthetic", "file"):
            raise ConfigError(f"unknown data server mode {mode!r}")
        self.mode = mode
        self.seed = seed
        self.item_size = item_size
        self.path = path
        self.count: int | None = None
        if mode == "file":
            if path is None:
                raise ConfigError("file-backed mode needs a path")
            with open(path, "rb") as fh:
                magic, version, _, size, count = RECORD_HEADER.unpack(fh.read(RECORD_HEADER.size))
            if magic != RECORD_MAGIC or version != 1:
                raise ConfigError(f"{path} is not a version-1 record file")
            self.item_size, self.count = size, count

    def item(self, index: int) -> bytes:
        if self.mode == "synthetic":
            seed = struct.pack("<qq", self.seed, index)
            return hashlib.shake_256(b"item" + seed).digest(self.item_size)
        if not 0 <= index < self.count:
            index %= self.count  # epochs wrap around the file
        with open(self.path, "rb") as fh:
            fh.seek(RECORD_HEADER.size + index * self.item_size)
            return fh.read(self.item_size)

    def batch(self, indices) -> bytes:
        return b"".join(self.item(int(i)) for i in indices)


def write_record_file(path: str | os.PathLike, records: list[bytes]) -> None:
    size = len(records[0]) if records else 0
    if any(len(r) != size for r in records):
        raise ConfigError("records must all have the same length")
    with open(path, "wb") as fh:
        fh.write(RECORD_HEADER.pack(RECORD_MAGIC, 1, 0, size, len(records)))
        for r in records:
            fh.write(r)
