"""Deterministic simulated-time network on top of simpy.

Every node owns one NIC that serializes its egress traffic chunk by chunk.
TRAIN chunks are always served before STATE chunks, but a chunk already on
the wire is never preempted, so TRAIN waits at most one chunk time.  Within a
priority class the NIC round-robins across channels.  CTRL messages bypass the
NIC queues and cost only the channel latency.  Channels between endpoints of
the same node are loopback and free.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import simpy

from ..errors import Aborted, Interrupted, SetupError
from .base import Direction, LinkModel, LinkStats, Message, Priority


class Completion(simpy.Event):
    """Resolves with the completion time once the last chunk is acknowledged."""

    def __init__(self, env, message: Message):
        super().__init__(env)
        self.message = message
        self.submitted_at = env.now
        self.completed_at: float | None = None


@dataclass
class _Transfer:
    message: Message
    channel: "SimChannel"
    handle: Completion
    chunks_left: int
    src_node: str
    dst_node: str
    delivered: bool = False


@dataclass
class _Chunk:
    transfer: _Transfer
    nbytes: int
    last: bool


def _defuse_fail(event: simpy.Event, exc: Exception) -> None:
    if not event.triggered:
        event.defused = True
        event.fail(exc)


class Nic:
    def __init__(self, net: "SimNetwork", name: str, link: LinkModel):
        self.net = net
        self.env = net.env
        self.name = name
        self.link = link
        self.alive = True
        self.created_at = self.env.now
        self.busy_time = 0.0
        self._chunk_started = 0.0
        self.bytes_by_priority = {p: 0 for p in Priority}
        self._queues = {
            Priority.TRAIN: collections.OrderedDict(),
            Priority.STATE: collections.OrderedDict(),
        }
        self._current: _Chunk | None = None
        self._wakeup: simpy.Event | None = None
        self.inbound_train = 0
        self._idle_waiters: dict[Direction, list[simpy.Event]] = {d: [] for d in Direction}
        self._proc = self.env.process(self._run())

    # scheduling -------------------------------------------------------
    def enqueue(self, key, chunks: list[_Chunk], priority: Priority) -> None:
        queue = self._queues[priority]
        queue.setdefault(key, collections.deque()).extend(chunks)
        if self._wakeup is not None and not self._wakeup.triggered:
            self._wakeup.succeed()

    def _next_chunk(self) -> _Chunk | None:
        for priority in (Priority.TRAIN, Priority.STATE):
            queue = self._queues[priority]
            while queue:
                key, chunks = next(iter(queue.items()))
                chunk = chunks.popleft()
                del queue[key]
                if chunks:
                    queue[key] = chunks  # back of the round-robin order
                return chunk
        return None

    def _run(self):
        while self.alive:
            chunk = self._next_chunk()
            if chunk is None:
                self._notify_idle(Direction.UP)
                self._wakeup = self.env.event()
                yield self._wakeup
                self._wakeup = None
                continue
            self._current = chunk
            self._chunk_started = self.env.now
            dt = chunk.nbytes / self.link.bandwidth
            if dt > 0:
                yield self.env.timeout(dt)
            self._current = None
            if not self.alive:
                return
            self.busy_time += dt
            prio = chunk.transfer.message.priority
            self.bytes_by_priority[prio] += chunk.nbytes
            self.net._chunk_sent(chunk)
            self._notify_idle(Direction.UP)

    def drop(self, predicate) -> list[_Transfer]:
        dropped = []
        for queue in self._queues.values():
            for key in list(queue):
                keep = collections.deque()
                for chunk in queue[key]:
                    if predicate(chunk.transfer):
                        if chunk.transfer not in dropped:
                            dropped.append(chunk.transfer)
                    else:
                        keep.append(chunk)
                if keep:
                    queue[key] = keep
                else:
                    del queue[key]
        return dropped

    # idleness ---------------------------------------------------------
    def train_idle(self, direction: Direction) -> bool:
        if direction == Direction.DOWN:
            return self.inbound_train == 0
        current = self._current
        busy = current is not None and current.transfer.message.priority == Priority.TRAIN
        return not busy and not self._queues[Priority.TRAIN]

    def _notify_idle(self, direction: Direction) -> None:
        if self.train_idle(direction):
            waiters, self._idle_waiters[direction] = self._idle_waiters[direction], []
            for ev in waiters:
                if not ev.triggered:
                    ev.succeed()

    def wait_idle(self, direction: Direction) -> simpy.Event:
        ev = self.env.event()
        if self.train_idle(direction):
            ev.succeed()
        else:
            self._idle_waiters[direction].append(ev)
        return ev

    def stats(self) -> LinkStats:
        elapsed = self.env.now - self.created_at
        busy = self.busy_time
        if self._current is not None:
            busy += self.env.now - self._chunk_started
        return LinkStats(busy, max(0.0, elapsed - busy), dict(self.bytes_by_priority))


class SimChannel:
    """Reliable ordered duplex channel between two endpoints."""

    def __init__(self, net: "SimNetwork", a: str, b: str, link: LinkModel):
        self.net = net
        self.env = net.env
        self.ends = (a, b)
        self.link = link
        self.closed = False
        self._inbox = {a: collections.defaultdict(collections.deque),
                       b: collections.defaultdict(collections.deque)}
        self._waiters = {a: collections.defaultdict(collections.deque),
                         b: collections.defaultdict(collections.deque)}
        self._inflight: list[_Transfer] = []

    @property
    def loopback(self) -> bool:
        return self.net.node_of(self.ends[0]) == self.net.node_of(self.ends[1])

    def peer(self, endpoint: str) -> str:
        a, b = self.ends
        if endpoint == a:
            return b
        if endpoint == b:
            return a
        raise SetupError(f"{endpoint} is not an end of channel {self.ends}")

    def send(self, message: Message) -> Completion:
        message.check()
        handle = Completion(self.env, message)
        if message.dest != self.peer(message.source):
            raise SetupError(f"message {message.source}->{message.dest} does not match channel")
        if self.closed:
            _defuse_fail(handle, Aborted("channel closed"))
            return handle
        self.net._submit(self, message, handle)
        return handle

    def recv(self, endpoint: str, tag: int) -> simpy.Event:
        """Event yielding the next message for ``endpoint`` carrying ``tag``."""
        self.peer(endpoint)
        ev = self.env.event()
        if self.closed:
            _defuse_fail(ev, Aborted("channel closed"))
            return ev
        box = self._inbox[endpoint][tag]
        if box:
            ev.succeed(box.popleft())
        else:
            self._waiters[endpoint][tag].append(ev)
            self.net._pending_recvs[endpoint][ev] = None
        return ev

    def pending(self, endpoint: str, tag: int) -> int:
        return len(self._inbox[endpoint][tag])

    def _deliver(self, message: Message) -> None:
        waiters = self._waiters[message.dest][message.tag]
        while waiters:
            ev = waiters.popleft()
            self.net._pending_recvs[message.dest].pop(ev, None)
            if not ev.triggered:
                ev.succeed(message)
                return
        self._inbox[message.dest][message.tag].append(message)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.net._close_channel(self)
        for end in self.ends:
            for queue in self._waiters[end].values():
                for ev in queue:
                    self.net._pending_recvs[end].pop(ev, None)
                    _defuse_fail(ev, Aborted("channel closed"))
            self._waiters[end].clear()
            self._inbox[end].clear()


class SimNetwork:
    def __init__(self, env: simpy.Environment, link: LinkModel | None = None):
        self.env = env
        self.default_link = link or LinkModel()
        self.nics: dict[str, Nic] = {}
        self._endpoint_node: dict[str, str] = {}
        self._dead: set[str] = set()
        self.channels: list[SimChannel] = []
        # insertion-ordered so wake-ups happen in a reproducible order
        self._pending_recvs: dict[str, dict] = collections.defaultdict(dict)
        self.trace: list[tuple] = []
        self.record_trace = False

    # topology -----------------------------------------------------------
    def add_node(self, node: str, link: LinkModel | None = None) -> Nic:
        if node in self.nics and self.nics[node].alive:
            raise SetupError(f"node {node} already exists")
        nic = Nic(self, node, link or self.default_link)
        self.nics[node] = nic
        self._dead.discard(node)
        return nic

    def register(self, endpoint: str, node: str) -> None:
        if node not in self.nics:
            self.add_node(node)
        self._endpoint_node[endpoint] = node

    def node_of(self, endpoint: str) -> str:
        try:
            return self._endpoint_node[endpoint]
        except KeyError:
            raise SetupError(f"unknown endpoint {endpoint}") from None

    def alive(self, endpoint: str) -> bool:
        return self.node_of(endpoint) not in self._dead

    def open_channel(self, a: str, b: str, link: LinkModel | None = None) -> SimChannel:
        for end in (a, b):
            if end not in self._endpoint_node:
                raise SetupError(f"unknown endpoint {end}")
        ch = SimChannel(self, a, b, link or self.default_link)
        self.channels.append(ch)
        return ch

    # data path ----------------------------------------------------------
    def _submit(self, ch: SimChannel, message: Message, handle: Completion) -> None:
        src_node = self.node_of(message.source)
        dst_node = self.node_of(message.dest)
        if src_node in self._dead:
            return  # fail-stop: a dead node emits nothing
        if self.record_trace:
            self.trace.append((self.env.now, "submit", message.source, message.dest,
                               int(message.priority), message.tag, message.size))
        if message.priority == Priority.CTRL or src_node == dst_node:
            self.nics[src_node].bytes_by_priority[message.priority] += message.size
            delay = 0.0 if src_node == dst_node else ch.link.latency
            transfer = _Transfer(message, ch, handle, 0, src_node, dst_node)
            ch._inflight.append(transfer)
            self._after(delay, lambda: self._arrive(transfer, delay))
            return
        size = message.size
        chunk = ch.link.chunk_size
        n = max(1, -(-size // chunk))
        chunks = []
        transfer = _Transfer(message, ch, handle, n, src_node, dst_node)
        for i in range(n):
            nbytes = min(chunk, size - i * chunk) if size else 0
            chunks.append(_Chunk(transfer, nbytes, i == n - 1))
        ch._inflight.append(transfer)
        if message.priority == Priority.TRAIN:
            self.nics[dst_node].inbound_train += 1
        key = (id(ch), message.source)
        self.nics[src_node].enqueue(key, chunks, message.priority)

    def _after(self, delay: float, fn) -> None:
        ev = self.env.timeout(delay)
        ev.callbacks.append(lambda _ev: fn())

    def _chunk_sent(self, chunk: _Chunk) -> None:
        if not chunk.last:
            return
        transfer = chunk.transfer
        latency = transfer.channel.link.latency
        self._after(latency, lambda: self._arrive(transfer, latency))

    def _arrive(self, transfer: _Transfer, ack_delay: float) -> None:
        ch = transfer.channel
        message = transfer.message
        if transfer.delivered or ch.closed:
            return
        transfer.delivered = True
        if message.priority == Priority.TRAIN and transfer.chunks_left:
            nic = self.nics.get(transfer.dst_node)
            if nic is not None:
                nic.inbound_train -= 1
                nic._notify_idle(Direction.DOWN)
        if transfer.dst_node in self._dead or transfer.src_node in self._dead:
            return  # lost with the crashed node; sender's handle never resolves
        if self.record_trace:
            self.trace.append((self.env.now, "deliver", message.source, message.dest,
                               int(message.priority), message.tag, message.size))
        ch._deliver(message)

        def ack():
            if transfer in ch._inflight:
                ch._inflight.remove(transfer)
            if not transfer.handle.triggered and transfer.src_node not in self._dead:
                transfer.handle.completed_at = self.env.now
                transfer.handle.succeed(self.env.now)

        self._after(ack_delay, ack)

    def _close_channel(self, ch: SimChannel) -> None:
        for nic in self.nics.values():
            nic.drop(lambda tr: tr.channel is ch)
        for transfer in ch._inflight:
            if transfer.message.priority == Priority.TRAIN and transfer.chunks_left \
                    and not transfer.delivered:
                nic = self.nics.get(transfer.dst_node)
                if nic is not None:
                    nic.inbound_train -= 1
                    nic._notify_idle(Direction.DOWN)
            transfer.delivered = True
            _defuse_fail(transfer.handle, Aborted("channel closed mid-transfer"))
        ch._inflight.clear()
        if ch in self.channels:
            self.channels.remove(ch)

    # control ------------------------------------------------------------
    def interrupt(self, endpoint: str, notice: object = None) -> int:
        """Wake every recv blocked on ``endpoint`` with :class:`Interrupted`."""
        pending = self._pending_recvs.pop(endpoint, {})
        woken = 0
        for ev in pending:
            if not ev.triggered:
                _defuse_fail(ev, Interrupted(notice))
                woken += 1
        for ch in self.channels:
            if endpoint in ch.ends:
                for queue in ch._waiters[endpoint].values():
                    queue.clear()
        return woken

    def fail_node(self, node: str) -> None:
        """Fail-stop a node: its NIC halts and everything addressed to it is lost."""
        if node in self._dead:
            return
        self._dead.add(node)
        nic = self.nics.get(node)
        if nic is not None:
            nic.alive = False
            lost = nic.drop(lambda tr: True)
            if nic._current is not None and nic._current.transfer not in lost:
                lost.append(nic._current.transfer)
            for tr in lost:
                if tr.delivered:
                    continue
                tr.delivered = True
                if tr.message.priority == Priority.TRAIN:
                    peer = self.nics.get(tr.dst_node)
                    if peer is not None and tr.dst_node != node:
                        peer.inbound_train -= 1
                        peer._notify_idle(Direction.DOWN)
            if nic._wakeup is not None and not nic._wakeup.triggered:
                nic._wakeup.succeed()
        for ch in list(self.channels):
            if any(self._endpoint_node.get(e) == node for e in ch.ends):
                for end in ch.ends:
                    if self._endpoint_node.get(end) == node:
                        for queue in ch._waiters[end].values():
                            queue.clear()
                        self._pending_recvs.pop(end, None)

    def link_idle(self, endpoint: str, direction: Direction | str) -> bool:
        return self.nics[self.node_of(endpoint)].train_idle(Direction(direction))

    def wait_idle(self, endpoint: str, direction: Direction | str) -> simpy.Event:
        return self.nics[self.node_of(endpoint)].wait_idle(Direction(direction))

    def stats(self, node: str) -> LinkStats:
        return self.nics[node].stats()
