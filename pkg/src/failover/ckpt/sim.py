"""Neighbour backup and state forwarding between host agents on the simulated network.

The holder's copy lives in its host agent, never in the origin's memory, so a
crash of the origin node leaves it intact.  Backups use STATE priority and
therefore only fill gaps left by training traffic.
"""

from __future__ import annotations

from ..domain import ClusterSpec, Role, index_of
from ..errors import Aborted, AddressingError, Interrupted, ProtocolError
from ..lccl.tags import FIELD, TagKind, pack_tag
from ..transport import Message, Priority
from .engine import NeighborBuffer
from .snapshot import HostSnapshot


def backup_tag(epoch: int, role: Role, spec: ClusterSpec, forward: bool = False) -> int:
    rank = index_of(role, spec)
    return pack_tag(TagKind.STATE, epoch, rank >> 16, rank & FIELD, 1 if forward else 0)


def neighbor_backup(agent, snap: HostSnapshot, holder_node: int, nbytes: int | None = None):
    """Stream ``snap`` to the holder's agent; returns the completion handle.

    Use with ``yield from``; the handle fires once the holder has the bytes.
    """
    tag = backup_tag(agent.epoch, snap.role, agent.fabric.spec)
    handle = yield from agent.send_host(holder_node, tag, snap.blob, nbytes=nbytes,
                                        priority=Priority.STATE)
    return handle


class HolderStore:
    """Neighbour buffers kept by one host agent for the origins it backs up."""

    def __init__(self, agent):
        self.agent = agent
        self.spec = agent.fabric.spec
        self.buffers: dict[Role, NeighborBuffer] = {}
        self.received = 0

    def buffer(self, origin: Role) -> NeighborBuffer:
        buf = self.buffers.get(origin)
        if buf is None:
            buf = self.buffers[origin] = NeighborBuffer(origin, self.spec)
        return buf

    def serve(self, origin: Role, origin_node: int):
        """Receive loop for one origin for the agent's current epoch."""
        tag = backup_tag(self.agent.epoch, origin, self.spec)
        buf = self.buffer(origin)
        while True:
            try:
                msg = yield from self.agent.recv_host(origin_node, tag)
            except (Interrupted, Aborted, AddressingError):
                return
            buf.put(msg.payload)
            self.received += 1

    def forward(self, origin: Role, iteration: int, target_host: str, epoch: int,
                nbytes: int | None = None):
        """Ship the held snapshot of ``origin`` at ``iteration`` to a substitute's agent."""
        blob = self.buffer(origin).get(iteration)
        if blob is None:
            raise ProtocolError(f"no snapshot of {origin} at iteration {iteration} held here")
        agent = self.agent
        ch = yield agent.fabric.connect(agent.endpoint, target_host, epoch)
        return ch.send(Message(Priority.STATE, agent.endpoint, target_host,
                               backup_tag(epoch, origin, self.spec, forward=True), blob,
                               nbytes=nbytes))


def receive_forward(agent, holder_host: str, origin: Role, epoch: int):
    """Substitute side of :meth:`HolderStore.forward`; returns the blob."""
    ch = yield agent.wait(agent.fabric.connect(agent.endpoint, holder_host, epoch))
    msg = yield agent.wait(ch.recv(agent.endpoint,
                                   backup_tag(epoch, origin, agent.fabric.spec, forward=True)))
    return msg.payload
