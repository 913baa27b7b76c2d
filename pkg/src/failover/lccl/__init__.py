"""Lightweight collective communication: fixed peer channels, rendezvous, hierarchical ring."""

from .plan import CommPlan, FakeGroup, RingStep, comm_plan, dp_group, ring_allreduce_local, ring_schedule
from .rendezvous import RendezvousSlot, RendezvousTable
from .sim import (
    CommContext, Fabric, HostAgent, allreduce, init_two_stage, interrupt_all, p2p_recv, p2p_send,
    rendezvous,
)
from .tags import TagKind, pack_tag, unpack_tag

__all__ = [
    "CommContext", "CommPlan", "Fabric", "FakeGroup", "HostAgent", "RendezvousSlot",
    "RendezvousTable", "RingStep", "TagKind", "allreduce", "comm_plan", "dp_group",
    "init_two_stage", "interrupt_all", "p2p_recv", "p2p_send", "pack_tag", "rendezvous",
    "ring_allreduce_local", "ring_schedule", "unpack_tag",
]
