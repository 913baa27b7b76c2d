"""Preloading over the simulated training network.

A :class:`Preloader` runs beside each worker.  It learns the indices of each
upcoming iteration (from the controller on TP rank 0, by fan-out elsewhere),
then fetches the data at STATE priority, but only while the node's downlink
carries no training traffic and the buffer has room.
"""

from __future__ import annotations

import simpy

from ..domain import TID, Role
from ..errors import Aborted, AddressingError, Interrupted
from ..lccl.sim import _Interruptible
from ..lccl.tags import FIELD, TagKind, pack_tag
from ..transport import Direction, Message, Priority, SimNetwork
from ..wire import Kind
from .core import DataServerStub, PreloadBuffer

REQUEST_TAG = pack_tag(TagKind.DATA, 0, 0, 0, 1)
REPLY_TAG = pack_tag(TagKind.DATA, 0, 0, 0, 2)


def index_tag(epoch: int, iteration: int) -> int:
    return pack_tag(TagKind.DATA, epoch, 1, (iteration >> 16) & FIELD, iteration & FIELD)


class DataServerService:
    """Serves fetch requests for ``stub`` from its own node."""

    def __init__(self, env: simpy.Environment, net: SimNetwork, stub: DataServerStub,
                 endpoint: str = "dataserver", node: str = "data-node"):
        self.env = env
        self.net = net
        self.stub = stub
        self.endpoint = endpoint
        net.register(endpoint, node)
        self.served = 0

    def connect(self, client_ep: str):
        ch = self.net.open_channel(client_ep, self.endpoint)
        self.env.process(self._pump(ch, client_ep))
        return ch

    def _pump(self, ch, client_ep):
        while not ch.closed:
            try:
                msg = yield ch.recv(self.endpoint, REQUEST_TAG)
            except Exception:
                return
            tid, indices, nbytes = msg.payload
            self.served += 1
            ch.send(Message(Priority.STATE, self.endpoint, client_ep, REPLY_TAG,
                            self.stub.batch(indices), tid=tid, nbytes=nbytes))


def fan_out_indices(fabric, endpoint: str, peers: list[str], epoch: int, iteration: int,
                    indices):
    """TP rank 0 hands the iteration's index list to its local TP peers.

    Generator; returns the completion handles, one per peer.
    """
    handles = []
    payload = tuple(int(i) for i in indices)
    for peer in peers:
        if fabric.net.node_of(peer) != fabric.net.node_of(endpoint):
            raise AddressingError(f"{peer} is not on the node of {endpoint}")
        ch = yield fabric.connect(endpoint, peer, epoch)
        handles.append(ch.send(Message(Priority.CTRL, endpoint, peer, index_tag(epoch, iteration),
                                       payload, nbytes=8 * len(payload))))
    return handles


class Preloader(_Interruptible):
    """Per-worker preload activity plus the consumer-side ``get_item``.

    ``index_source(iteration)`` is a generator returning the index list for
    this worker's TID at ``iteration``.
    """

    def __init__(self, env: simpy.Environment, net: SimNetwork, role: Role, endpoint: str,
                 server: DataServerService, buffer: PreloadBuffer, item_nbytes: float,
                 index_source, *, start_iteration: int = 0, on_consume=None):
        if item_nbytes > buffer.capacity:
            raise ValueError(f"one item ({item_nbytes} B) exceeds the buffer ({buffer.capacity} B)")
        self.env = env
        self.net = net
        self.role = role
        self.endpoint = endpoint
        self.buffer = buffer
        self.item_nbytes = item_nbytes
        self.index_source = index_source
        self.server = server
        self.channel = server.connect(endpoint)
        self.next_iteration = start_iteration
        self.on_consume = on_consume
        self.indices: dict[TID, tuple[int, ...]] = {}
        self.stall_time = 0.0
        self.stalls: dict[int, float] = {}
        self.fetches = 0
        self.deferred = 0  # fetches that had to wait for the downlink to go idle
        self._arrival: dict[TID, simpy.Event] = {}
        self._space = env.event()
        self._init_guard()

    def run(self):
        """The preload loop; returns when interrupted or the channel closes."""
        try:
            while True:
                it = self.next_iteration
                tid = TID(self.role, it)
                indices = yield from self.index_source(it)
                while self.buffer.free < self.item_nbytes:
                    self._space = self.env.event()
                    yield self.wait(self._space)
                if not self.net.link_idle(self.endpoint, Direction.DOWN):
                    self.deferred += 1
                    while not self.net.link_idle(self.endpoint, Direction.DOWN):
                        yield self.wait(self.net.wait_idle(self.endpoint, Direction.DOWN))
                self.channel.send(Message(Priority.CTRL, self.endpoint, self.channel.peer(
                    self.endpoint), REQUEST_TAG, (tid, tuple(indices), self.item_nbytes)))
                msg = yield self.wait(self.channel.recv(self.endpoint, REPLY_TAG))
                self.buffer.put(tid, msg.payload, self.item_nbytes)
                self.indices[tid] = tuple(indices)
                self.fetches += 1
                self.next_iteration = it + 1
                ev = self._arrival.pop(tid, None)
                if ev is not None:
                    ev.succeed()
        except (Interrupted, Aborted):
            return

    def get_item(self, tid: TID):
        """Return the blob for ``tid``, blocking until it is preloaded."""
        if tid.role != self.role:
            raise AddressingError(f"{tid} does not belong to {self.role}")
        if tid not in self.buffer:
            start = self.env.now
            ev = self._arrival.get(tid)
            if ev is None:
                ev = self._arrival[tid] = self.env.event()
            yield self.wait(ev)
            stall = self.env.now - start
            self.stall_time += stall
            self.stalls[tid.iteration] = stall
        blob = self.buffer.pop(tid)
        indices = self.indices.pop(tid)
        if not self._space.triggered:
            self._space.succeed()
        if self.on_consume is not None:
            self.on_consume(tid, indices)
        return blob

    def restart(self, iteration: int) -> None:
        """Drop everything buffered and resume fetching at ``iteration``."""
        self.channel.close()  # a reply still in flight belongs to the old epoch
        self.channel = self.server.connect(self.endpoint)
        self.buffer.clear()
        self.indices.clear()
        self._arrival.clear()
        self.next_iteration = iteration
        self._space = self.env.event()
        self._init_guard()


def controller_indices(client, pod: int, role: Role, *, wait=None, fanout=None):
    """Index source for TP rank 0: pull from the controller, then fan out.

    ``fanout(iteration, indices)`` is a generator delivering the list to the
    local TP peers.
    """
    key = str(Role(role.dp_index, role.pp_index, 0))

    def source(iteration: int):
        reply = yield from client.call(Kind.INDEX_ASSIGN, {"pod": pod, "iteration": iteration},
                                       wait=wait)
        for a in reply["assignments"]:
            if a["role"] == key and a["iteration"] == iteration:
                if fanout is not None:
                    yield from fanout(iteration, a["indices"])
                return tuple(a["indices"])
        raise AddressingError(f"controller sent no indices for {key} at {iteration}")

    return source


def fanned_indices(fabric, endpoint: str, root: str, epoch_of, *, wait):
    """Index source for TP peers: wait for the list from TP rank 0."""

    def source(iteration: int):
        ch = yield wait(fabric.connect(endpoint, root, epoch_of()))
        msg = yield wait(ch.recv(endpoint, index_tag(epoch_of(), iteration)))
        return msg.payload

    return source
