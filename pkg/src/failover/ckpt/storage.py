"""Storage stub for lazy backups and fallback checkpoints.

Layout under ``root``::

    <job>/<iteration>/<role>.<kind>     one blob per (worker, kind, iteration)
    <job>/FALLBACK                      JSON pointer to the last complete fallback

Every object is written to a temporary name and renamed into place, so a
reader never sees a torn blob.  A fallback becomes visible only when the
pointer is replaced after all of its blobs are on disk.
"""

from __future__ import annotations

import abc
import json
import os
import shutil
from pathlib import Path

from ..domain import Role
from ..errors import RestoreError
from .snapshot import BlobKind, decode_blob

POINTER = "FALLBACK"


class Storage(abc.ABC):
    """Interface a remote object store would implement."""

    @abc.abstractmethod
    def put(self, role: Role, kind: BlobKind, iteration: int, blob: bytes) -> None: ...

    @abc.abstractmethod
    def get(self, role: Role, kind: BlobKind, iteration: int) -> bytes: ...

    @abc.abstractmethod
    def exists(self, role: Role, kind: BlobKind, iteration: int) -> bool: ...

    @abc.abstractmethod
    def commit_fallback(self, iteration: int, roles) -> None: ...

    @abc.abstractmethod
    def latest_fallback(self) -> int | None: ...


class LocalStorage(Storage):
    def __init__(self, root: str | os.PathLike, job: str = "job"):
        self.root = Path(root)
        self.job = job
        self.base = self.root / job
        self.base.mkdir(parents=True, exist_ok=True)
        self.writes = 0
        self.failed_writes = 0

    def path(self, role: Role, kind: BlobKind, iteration: int) -> Path:
        return self.base / str(iteration) / f"{role}.{kind.suffix}"

    def _atomic_write(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def put(self, role: Role, kind: BlobKind, iteration: int, blob: bytes) -> None:
        try:
            self._atomic_write(self.path(role, kind, iteration), blob)
        except OSError:
            self.failed_writes += 1
            raise
        self.writes += 1

    def get(self, role: Role, kind: BlobKind, iteration: int) -> bytes:
        path = self.path(role, kind, iteration)
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            raise RestoreError(f"no {kind.suffix} object for {role} at iteration {iteration}") \
                from None
        head, _ = decode_blob(blob)
        if head.role != role or head.iteration != iteration or head.kind != kind:
            raise RestoreError(f"{path} holds {head}, not what its name says")
        return blob

    def exists(self, role: Role, kind: BlobKind, iteration: int) -> bool:
        return self.path(role, kind, iteration).exists()

    def commit_fallback(self, iteration: int, roles) -> None:
        missing = [r for r in roles if not self.exists(r, BlobKind.FULL, iteration)]
        if missing:
            raise RestoreError(f"fallback {iteration} incomplete: {len(missing)} blobs missing")
        previous = self.latest_fallback()
        self._atomic_write(self.base / POINTER, json.dumps({"iteration": iteration}).encode())
        if previous is not None and previous != iteration:
            self._drop_full(previous)

    def _drop_full(self, iteration: int) -> None:
        d = self.base / str(iteration)
        for f in d.glob(f"*.{BlobKind.FULL.suffix}"):
            f.unlink()
        if d.exists() and not any(d.iterdir()):
            shutil.rmtree(d)

    def latest_fallback(self) -> int | None:
        try:
            return int(json.loads((self.base / POINTER).read_text())["iteration"])
        except FileNotFoundError:
            return None


class MemoryStorage(Storage):
    """Dict-backed storage; holds blobs already fetched from elsewhere."""

    def __init__(self):
        self.blobs: dict[tuple, bytes] = {}
        self.fallback: int | None = None

    def put(self, role: Role, kind: BlobKind, iteration: int, blob: bytes) -> None:
        self.blobs[(role, kind, iteration)] = bytes(blob)

    def get(self, role: Role, kind: BlobKind, iteration: int) -> bytes:
        try:
            blob = self.blobs[(role, kind, iteration)]
        except KeyError:
            raise RestoreError(f"no {kind.suffix} object for {role} at iteration {iteration}") \
                from None
        decode_blob(blob)
        return blob

    def exists(self, role: Role, kind: BlobKind, iteration: int) -> bool:
        return (role, kind, iteration) in self.blobs

    def commit_fallback(self, iteration: int, roles) -> None:
        if not all(self.exists(r, BlobKind.FULL, iteration) for r in roles):
            raise RestoreError(f"fallback {iteration} incomplete")
        self.fallback = iteration

    def latest_fallback(self) -> int | None:
        return self.fallback
