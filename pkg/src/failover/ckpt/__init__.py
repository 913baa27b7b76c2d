"""Checkpoint engine: razor, snapshots, neighbour redundancy, lazy backup, fallback, restore."""

from .engine import (DEFAULT_FALLBACK_INTERVAL, NeighborBuffer, RestoreSources, fallback_checkpoint,
                     fallback_due, full_blob, lazy_backup, restore, rolled_back, state_at)
from .sim import HolderStore, backup_tag, neighbor_backup, receive_forward
from .snapshot import (HEADER, BlobHeader, BlobKind, HostSnapshot, SnapshotBuffer, UniquenessPlan,
                       decode_blob, encode_blob, razor, read_header, snapshot, unique_capacity)
from .storage import LocalStorage, MemoryStorage, Storage

__all__ = [
    "DEFAULT_FALLBACK_INTERVAL", "HEADER", "BlobHeader", "BlobKind", "HolderStore",
    "HostSnapshot", "LocalStorage", "MemoryStorage", "NeighborBuffer", "RestoreSources", "SnapshotBuffer",
    "Storage", "UniquenessPlan", "backup_tag", "decode_blob", "encode_blob",
    "fallback_checkpoint", "fallback_due", "full_blob", "lazy_backup", "neighbor_backup",
    "razor", "read_header", "receive_forward", "restore", "rolled_back", "snapshot",
    "state_at", "unique_capacity",
]
