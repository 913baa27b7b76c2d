"""LCCL runtime over the simulated network.

Workers never talk to a communicator object shared across the cluster.  Each
worker owns a :class:`CommContext` bound to fixed channels toward its
:class:`~failover.lccl.plan.CommPlan` peers; collectives are handed to the
node's :class:`HostAgent`, which reduces local contributions for free (the
intra-node path is out of scope) and runs the inter-node ring with the other
host agents.  All blocking goes through interruptible waits, so a failure
notice unwinds every caller instead of leaving it hung on a dead peer.

Generator functions in this module are meant to be driven with ``yield from``
inside a simpy process.
"""

from __future__ import annotations

import collections
from typing import Any

import numpy as np
import simpy

from ..domain import ClusterSpec, Role, index_of, role_of
from ..errors import (AddressingError, Aborted, InitError, Interrupted, PlanViolation,
                      ProtocolError, RendezvousTimeout)
from ..transport import Message, Priority, SimNetwork
from ..transport.sim import _defuse_fail
from ..wire import Kind
from .plan import FakeGroup, comm_plan, ring_schedule
from .tags import FIELD, TagKind, pack_tag


class Fabric:
    """The simulated comm world shared by agents: network, channel pairing, timing knobs.

    ``setup_delay`` is the cost of establishing one cross-node connection; the
    first end to ask opens the channel and both ends receive the same object.
    """

    def __init__(self, env: simpy.Environment, net: SimNetwork, spec: ClusterSpec,
                 *, setup_delay: float = 0.0, poll_interval: float = 0.01):
        self.env = env
        self.net = net
        self.spec = spec
        self.setup_delay = setup_delay
        self.poll_interval = poll_interval
        self._conns: dict[tuple, simpy.Event] = {}

    def connect(self, a: str, b: str, epoch: int) -> simpy.Event:
        key = (epoch,) + tuple(sorted((a, b)))
        ev = self._conns.get(key)
        if ev is not None and not (ev.triggered and ev.value.closed):
            return ev
        ev = self.env.event()
        self._conns[key] = ev
        same = self.net.node_of(a) == self.net.node_of(b)
        delay = 0.0 if same else self.setup_delay

        def open_(_):
            if not ev.triggered:
                ev.succeed(self.net.open_channel(a, b))

        self.env.timeout(delay).callbacks.append(open_)
        return ev

    def close_epochs_before(self, epoch: int) -> None:
        for key in [k for k in self._conns if k[0] < epoch]:
            ev = self._conns.pop(key)
            if ev.triggered:
                ev.value.close()


class _Interruptible:
    """Interruptible waiting: every blocking event is wrapped so a notice can fail it."""

    env: simpy.Environment

    def _init_guard(self) -> None:
        self.notice: Any = None
        self.poisoned = False
        self._waiting: dict[simpy.Event, None] = {}  # ordered: reproducible wake-ups

    def check(self) -> None:
        if self.poisoned:
            raise Interrupted(self.notice)

    def wait(self, ev: simpy.Event) -> simpy.Event:
        self.check()
        w = self.env.event()
        self._waiting[w] = None

        def relay(e):
            self._waiting.pop(w, None)
            if not e.ok:
                e.defused = True
            if w.triggered:
                return
            if e.ok:
                w.succeed(e.value)
            else:
                _defuse_fail(w, e.value)

        if ev.callbacks is None:
            relay(ev)
        else:
            ev.callbacks.append(relay)
        return w

    def _poison(self, notice: Any) -> None:
        self.poisoned = True
        self.notice = notice
        waiting, self._waiting = self._waiting, {}
        for w in waiting:
            _defuse_fail(w, Interrupted(notice))


class _Op:
    def __init__(self, env, expected: int):
        self.parts: dict[int, np.ndarray] = {}
        self.expected = expected
        self.done = env.event()


class HostAgent(_Interruptible):
    """Per-node communication agent.  ``node_id`` is the logical node."""

    def __init__(self, fabric: Fabric, node_id: int, endpoint: str, epoch: int = 0):
        self.fabric = fabric
        self.env = fabric.env
        self.node_id = node_id
        self.endpoint = endpoint
        self.epoch = epoch
        self.directory: dict[int, str] = {}
        self.contexts: list[CommContext] = []
        self.client = None
        self.assignment: dict | None = None
        self._registration: simpy.Event | None = None
        self._ops: dict[tuple, _Op] = {}
        self.ring_bytes = 0
        self._init_guard()

    def reset(self, epoch: int) -> None:
        """Start a new epoch: fresh connections, contexts and registration."""
        self.epoch = epoch
        self.contexts = []
        self._ops.clear()
        self._registration = None
        self.assignment = None
        self.directory = {}
        self._init_guard()

    def interrupt(self, notice: Any) -> None:
        """Wake the agent's own waits and every local context."""
        self._poison(notice)
        for ctx in self.contexts:
            interrupt_all(ctx, notice)
        for op in self._ops.values():
            _defuse_fail(op.done, Interrupted(notice))

    # registration -------------------------------------------------------
    def registration(self, info: dict | None = None) -> simpy.Event:
        """Register this node once per epoch; the event yields the controller's reply."""
        if self._registration is None:
            self._registration = self.env.event()
            self.env.process(self._register(dict(info or {})))
        return self._registration

    def _register(self, info):
        ev = self._registration
        body = {"host": self.endpoint, "epoch": self.epoch, **info}
        try:
            reply = yield from self.client.call(Kind.REGISTER, body, wait=self.wait)
        except (InitError, ProtocolError, Interrupted) as exc:
            _defuse_fail(ev, exc)
            return
        self.node_id = reply["node"]
        self.assignment = reply
        ev.succeed(reply)

    # host-to-host channels ----------------------------------------------
    def resolve(self, node: int) -> str:
        try:
            return self.directory[node]
        except KeyError:
            raise AddressingError(f"no address known for node {node}") from None

    def channel_to(self, node: int) -> simpy.Event:
        return self.fabric.connect(self.endpoint, self.resolve(node), self.epoch)

    def send_host(self, node: int, tag: int, payload, nbytes: int | None = None,
                  priority: Priority = Priority.TRAIN):
        ch = yield self.wait(self.channel_to(node))
        return ch.send(Message(priority, self.endpoint, ch.peer(self.endpoint), tag, payload,
                               nbytes=nbytes))

    def recv_host(self, node: int, tag: int):
        ch = yield self.wait(self.channel_to(node))
        msg = yield self.wait(ch.recv(self.endpoint, tag))
        return msg

    # collectives --------------------------------------------------------
    def contribute(self, group: FakeGroup, seq: int, rank: int, buffer: np.ndarray,
                   nbytes: int | None) -> simpy.Event:
        self.check()
        segment = group.segment_of(self.node_id)
        key = (group.members, seq)
        op = self._ops.get(key)
        if op is None:
            op = self._ops[key] = _Op(self.env, len(segment))
        if rank in op.parts:
            raise ProtocolError(f"rank {rank} contributed twice to collective {seq}")
        if op.parts:
            first = next(iter(op.parts.values()))
            if first.shape != buffer.shape or first.dtype != buffer.dtype:
                raise ValueError("allreduce buffers differ in shape or dtype across members")
        op.parts[rank] = buffer
        if len(op.parts) == op.expected:
            # fixed summation order keeps float results identical on every member
            total = np.array(op.parts[segment[0]], copy=True)
            for r in segment[1:]:
                total += op.parts[r]
            if len(group.nodes) == 1:
                op.done.succeed(total)
                del self._ops[key]
            else:
                self.env.process(self._ring(group, seq, total, nbytes, op, key))
        return op.done

    def _ring(self, group: FakeGroup, seq: int, total: np.ndarray, nbytes, op: _Op, key):
        n = len(group.nodes)
        pos = group.nodes.index(self.node_id)
        nxt, prv = group.nodes[(pos + 1) % n], group.nodes[(pos - 1) % n]
        chunks = np.array_split(total, n)
        per_step = None if nbytes is None else int(nbytes) // n
        try:
            for i, step in enumerate(ring_schedule(n, pos)):
                tag = pack_tag(TagKind.COLL, self.epoch, group.gid, seq & FIELD, i)
                out = chunks[step.send_chunk].copy()
                size = out.nbytes if per_step is None else per_step
                self.ring_bytes += size
                yield from self.send_host(nxt, tag, out, nbytes=size)
                msg = yield from self.recv_host(prv, tag)
                if step.phase == "reduce":
                    chunks[step.recv_chunk] += msg.payload
                else:
                    chunks[step.recv_chunk][...] = msg.payload
        except (Interrupted, Aborted, AddressingError) as exc:
            _defuse_fail(op.done, exc)
            return
        finally:
            self._ops.pop(key, None)
        if not op.done.triggered:
            op.done.succeed(total)


class CommContext(_Interruptible):
    """One worker's view of LCCL for one epoch."""

    def __init__(self, agent: HostAgent, local_rank: int, endpoint: str):
        self.agent = agent
        self.fabric = agent.fabric
        self.env = agent.env
        self.spec = agent.fabric.spec
        self.local_rank = local_rank
        self.endpoint = endpoint
        self.epoch = agent.epoch
        self.role: Role | None = None
        self.rank: int | None = None
        self.plan = None
        self.ready = self.env.event()
        self.started_at = self.env.now
        self.stage1_at: float | None = None
        self.ready_at: float | None = None
        self.channels: dict[Role, Any] = {}
        self.addresses: dict[int, dict] = {}
        self.trace: list[tuple[float, str]] = []
        self._seq: dict[tuple, int] = collections.defaultdict(int)
        self._init_guard()

    def wait_ready(self):
        if not (self.ready.processed and self.ready.ok):
            yield self.wait(self.ready)


def init_two_stage(agent: HostAgent, local_rank: int, endpoint: str, client, *,
                   rendezvous_timeout: float | None = None, node_info: dict | None = None):
    """Stage 1 in the caller, stage 2 in the background; returns the context.

    Stage 1 registers the node (once) and yields the worker's role, so state
    loading can start right away.  Stage 2 exchanges addresses with the plan
    peers and opens the channels; ``ctx.ready`` fires when it finishes.
    """
    ctx = CommContext(agent, local_rank, endpoint)
    agent.contexts.append(ctx)
    reply = yield ctx.wait(agent.registration(node_info))
    roles = reply["roles"]
    if local_rank >= len(roles):
        raise InitError(f"node {agent.node_id} has no role for local rank {local_rank}")
    ctx.role = Role.parse(roles[local_rank])
    ctx.rank = index_of(ctx.role, ctx.spec)
    ctx.plan = comm_plan(ctx.role, ctx.spec)
    ctx.stage1_at = ctx.env.now
    ctx.trace.append((ctx.env.now, "stage1"))
    if not ctx.plan.peers:
        _mark_ready(ctx)
    else:
        ctx.env.process(_stage2(ctx, client, rendezvous_timeout))
    return ctx


def _mark_ready(ctx: CommContext) -> None:
    ctx.ready_at = ctx.env.now
    ctx.trace.append((ctx.env.now, "ready"))
    ctx.ready.succeed(ctx.env.now)


def _stage2(ctx: CommContext, client, timeout):
    agent = ctx.agent
    try:
        address = {"worker": ctx.endpoint, "host": agent.endpoint, "node": agent.node_id}
        peer_ranks = [index_of(r, ctx.spec) for r in ctx.plan.peers]
        got = yield from rendezvous(client, ctx.epoch, ctx.rank, address, peer_ranks,
                                    poll_interval=ctx.fabric.poll_interval, timeout=timeout,
                                    wait=ctx.wait)
        ctx.addresses = got
        waits = []
        for rank in peer_ranks:
            addr = got[rank]
            agent.directory[addr["node"]] = addr["host"]
            waits.append(ctx.wait(ctx.fabric.connect(ctx.endpoint, addr["worker"], ctx.epoch)))
        remote = sorted({got[r]["node"] for r in peer_ranks} - {agent.node_id})
        for node in remote:
            waits.append(ctx.wait(agent.channel_to(node)))
        opened = yield ctx.env.all_of(waits)
        for rank, w in zip(peer_ranks, waits):
            ctx.channels[role_of(rank, ctx.spec)] = opened[w]
    except Exception as exc:  # surfaced to every caller waiting on ctx.ready
        _defuse_fail(ctx.ready, exc)
        return
    _mark_ready(ctx)


def rendezvous(client, epoch: int, rank: int, address: dict, peers, *,
               poll_interval: float, timeout: float | None = None, wait=None):
    """Publish our slot, then poll only the peers' slots until all are ready."""
    env = client.env
    yield from client.call(Kind.RDV_WRITE, {"epoch": epoch, "rank": rank, "address": address},
                           wait=wait)
    start = env.now
    found: dict[int, dict] = {}
    missing = [int(p) for p in peers]
    while True:
        if missing:
            reply = yield from client.call(Kind.RDV_READ, {"epoch": epoch, "ranks": missing},
                                           wait=wait)
            for k, v in reply["slots"].items():
                found[int(k)] = v
            missing = [p for p in missing if p not in found]
        if not missing:
            return found
        if timeout is not None and env.now - start >= timeout:
            raise RendezvousTimeout(f"rank {rank}: peers {missing} not ready after {timeout}s")
        tick = env.timeout(poll_interval)
        yield wait(tick) if wait else tick


# worker-facing operations ---------------------------------------------------

def allreduce(ctx: CommContext, group: FakeGroup, buffer, op: str = "sum",
              nbytes: int | None = None):
    """Sum ``buffer`` across ``group``; returns the reduced vector.

    ``nbytes`` overrides the size charged to the links for the whole vector
    (the real array may be a small stand-in).
    """
    if op != "sum":
        raise ValueError(f"unsupported reduction {op!r}")
    ctx.check()
    yield from ctx.wait_ready()
    if ctx.rank not in group.members:
        raise ValueError(f"rank {ctx.rank} is not a member of the group")
    ctx.trace.append((ctx.env.now, "collective"))
    key = group.members
    seq = ctx._seq[key]
    ctx._seq[key] += 1
    buf = np.array(buffer, copy=True)
    done = ctx.agent.contribute(group, seq, ctx.rank, buf, nbytes)
    result = yield ctx.wait(done)
    return result.copy()


def _p2p_tag(ctx: CommContext, tag: int) -> int:
    if not 0 <= tag < 1 << 48:
        raise ValueError("p2p tag must fit in 48 bits")
    return pack_tag(TagKind.P2P, ctx.epoch, (tag >> 32) & FIELD, (tag >> 16) & FIELD, tag & FIELD)


def _peer_channel(ctx: CommContext, peer: Role):
    if ctx.plan is None or peer not in ctx.plan.peers:
        raise PlanViolation(f"{peer} is not a planned peer of {ctx.role}")
    return ctx.channels[peer]


def p2p_send(ctx: CommContext, peer: Role, tag: int, payload, *, nbytes: int | None = None,
             priority: Priority = Priority.TRAIN):
    """Send on the fixed channel to ``peer``; returns the completion handle."""
    if ctx.plan is not None and peer not in ctx.plan.peers:
        raise PlanViolation(f"{peer} is not a planned peer of {ctx.role}")
    ctx.check()
    yield from ctx.wait_ready()
    ch = _peer_channel(ctx, peer)
    return ch.send(Message(priority, ctx.endpoint, ch.peer(ctx.endpoint), _p2p_tag(ctx, tag),
                           payload, nbytes=nbytes))


def p2p_recv(ctx: CommContext, peer: Role, tag: int):
    if ctx.plan is not None and peer not in ctx.plan.peers:
        raise PlanViolation(f"{peer} is not a planned peer of {ctx.role}")
    ctx.check()
    yield from ctx.wait_ready()
    ch = _peer_channel(ctx, peer)
    msg = yield ctx.wait(ch.recv(ctx.endpoint, _p2p_tag(ctx, tag)))
    return msg.payload


def interrupt_all(ctx: CommContext, notice: Any) -> None:
    """Fail every blocked call on ``ctx`` with the notice and poison the context."""
    ctx._poison(notice)
    ctx.trace.append((ctx.env.now, "interrupted"))
