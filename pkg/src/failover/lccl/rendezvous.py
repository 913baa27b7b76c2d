"""Epoch-versioned address table hosted by the controller.

Each rank writes its slot once per epoch; peers read only the slots they
care about, so one rank's readiness never waits on unrelated ranks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable

from ..errors import ProtocolError


@dataclass(frozen=True)
class RendezvousSlot:
    rank: int
    address: Any
    ready: bool = True


class RendezvousTable:
    def __init__(self, epoch: int = 0):
        self.epoch = epoch
        self._slots: dict[int, RendezvousSlot] = {}

    def open_epoch(self, epoch: int) -> None:
        if epoch <= self.epoch:
            raise ProtocolError(f"epoch {epoch} is not newer than {self.epoch}")
        self.epoch = epoch
        self._slots = {}

    def _check_epoch(self, epoch: int) -> None:
        if epoch != self.epoch:
            raise ProtocolError(f"stale epoch {epoch} (current {self.epoch})")

    def write(self, epoch: int, rank: int, address: Any) -> RendezvousSlot:
        self._check_epoch(epoch)
        if rank in self._slots:
            raise ProtocolError(f"rank {rank} already wrote its slot in epoch {epoch}")
        # the slot is built complete and then published; readers never see a partial one
        slot = RendezvousSlot(rank, address, True)
        self._slots[rank] = slot
        return slot

    def read(self, epoch: int, ranks: Iterable[int]) -> dict[int, Any]:
        """Addresses of the ready slots among ``ranks``; absent ranks are omitted."""
        self._check_epoch(epoch)
        out = {}
        for r in ranks:
            slot = self._slots.get(r)
            if slot is not None and slot.ready:
                out[r] = slot.address
        return out

    def __len__(self) -> int:
        return len(self._slots)
