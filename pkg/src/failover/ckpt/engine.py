"""Neighbour buffers, lazy backup, fallback checkpoints and restore."""

from __future__ import annotations

import collections
from dataclasses import dataclass

from ..domain import ClusterSpec, OptimizerVersion, Role, StateBundle, dp_neighbor
from ..errors import ProtocolError, RestoreError, UnrecoverableVersion
from .snapshot import BlobKind, UniquenessPlan, decode_blob, encode_blob, pack_full, unpack_full
from .storage import Storage

DEFAULT_FALLBACK_INTERVAL = 500


class NeighborBuffer:
    """Unique state of ``origin`` held in the memory of its ring successor ``holder``."""

    def __init__(self, origin: Role, spec: ClusterSpec):
        self.origin = origin
        self.holder = dp_neighbor(origin, spec)
        self._snaps: collections.deque[tuple[int, bytes]] = collections.deque(maxlen=2)

    def put(self, blob: bytes) -> int:
        head, _ = decode_blob(blob)
        if head.role != self.origin:
            raise ProtocolError(f"snapshot of {head.role} sent to the buffer of {self.origin}")
        if self._snaps and head.iteration <= self._snaps[-1][0]:
            # a replay after recovery restarts the sequence; drop what is newer
            while self._snaps and self._snaps[-1][0] >= head.iteration:
                self._snaps.pop()
        self._snaps.append((head.iteration, bytes(blob)))
        return head.iteration

    def get(self, iteration: int) -> bytes | None:
        for it, blob in self._snaps:
            if it == iteration:
                return blob
        return None

    def iterations(self) -> list[int]:
        return [it for it, _ in self._snaps]


def state_at(state: StateBundle, iteration: int) -> tuple[bytes, bytes]:
    """(weights, optimizer) of ``state`` at ``iteration`` using the two-version rule."""
    if iteration == state.iteration:
        return state.weights, state.optimizer_current.blob
    prev = state.optimizer_previous
    if iteration == state.iteration - 1 and prev is not None and state.weights_previous is not None:
        return state.weights_previous, prev.blob
    raise UnrecoverableVersion(
        f"{state.role} holds iterations {state.iteration} and {state.iteration - 1}, "
        f"not {iteration}")


def rolled_back(state: StateBundle, iteration: int) -> StateBundle:
    """The bundle as it was at ``iteration`` (same or one back)."""
    if iteration == state.iteration:
        return state
    weights, opt = state_at(state, iteration)
    return StateBundle(state.role, iteration, weights, OptimizerVersion(iteration, opt))


def lazy_backup(state: StateBundle, target_iteration: int, storage: Storage,
                plan: UniquenessPlan, *, dp_rank0: bool) -> list[BlobKind]:
    """Persist redundant state at exactly ``target_iteration``; returns the kinds written."""
    if not dp_rank0:
        raise ProtocolError(f"{state.role} is not DP rank 0 and may not perform lazy backup")
    weights, opt = state_at(state, target_iteration)
    written = []
    if plan.weights_redundant:
        storage.put(_group_key(state.role), BlobKind.WEIGHTS, target_iteration,
                    encode_blob(BlobKind.WEIGHTS, _group_key(state.role), target_iteration, weights))
        written.append(BlobKind.WEIGHTS)
    if plan.optimizer_redundant:
        storage.put(_group_key(state.role), BlobKind.OPTIMIZER, target_iteration,
                    encode_blob(BlobKind.OPTIMIZER, _group_key(state.role), target_iteration, opt))
        written.append(BlobKind.OPTIMIZER)
    return written


def _group_key(role: Role) -> Role:
    # redundant state is shared by the DP group; it is filed under dp index 0
    return Role(0, role.pp_index, role.tp_index)


def fallback_due(iteration: int, interval: int = DEFAULT_FALLBACK_INTERVAL) -> bool:
    return interval > 0 and iteration % interval == 0


def full_blob(state: StateBundle) -> bytes:
    return encode_blob(BlobKind.FULL, state.role, state.iteration,
                       pack_full(state.weights, state.optimizer_current.blob))


def fallback_checkpoint(state: StateBundle, storage: Storage,
                        interval: int = DEFAULT_FALLBACK_INTERVAL) -> bool:
    """Write the complete state if the iteration is on the fallback grid."""
    if not fallback_due(state.iteration, interval):
        return False
    storage.put(state.role, BlobKind.FULL, state.iteration, full_blob(state))
    return True


@dataclass
class RestoreSources:
    """Where a substitute gets each part of its state.

    ``unique`` is the snapshot forwarded from the neighbour buffer (None when
    the optimizer is redundant); redundant parts come from ``storage`` at
    ``iteration``.  ``fallback`` switches to the fallback checkpoint instead.
    """

    iteration: int
    storage: Storage | None = None
    unique: bytes | None = None
    fallback: bool = False


def restore(role: Role, plan: UniquenessPlan, sources: RestoreSources) -> StateBundle:
    it = sources.iteration
    if sources.fallback:
        if sources.storage is None:
            raise RestoreError("fallback restore needs storage")
        head, payload = decode_blob(sources.storage.get(role, BlobKind.FULL, it))
        weights, opt = unpack_full(payload)
        return StateBundle(role, it, weights, OptimizerVersion(it, opt))
    if not plan.weights_redundant:
        raise RestoreError(f"{role} has no replica; only a fallback checkpoint can restore it")
    if sources.storage is None:
        raise RestoreError("redundant state needs the lazy-backup storage")
    _, weights = decode_blob(sources.storage.get(_group_key(role), BlobKind.WEIGHTS, it))
    if plan.optimizer_redundant:
        _, opt = decode_blob(sources.storage.get(_group_key(role), BlobKind.OPTIMIZER, it))
    else:
        if sources.unique is None:
            raise RestoreError(f"unique state of {role} at {it} was not forwarded")
        head, opt = decode_blob(sources.unique)
        if head.role != role or head.iteration != it:
            raise RestoreError(f"forwarded snapshot is {head.role}@{head.iteration}, "
                               f"wanted {role}@{it}")
    return StateBundle(role, it, weights, OptimizerVersion(it, opt))
