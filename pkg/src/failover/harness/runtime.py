"""Simulated cluster runtime: node agents, workers, storage and the operator.

Everything runs on one simpy clock.  Agents talk to the controller, storage
and data server only through transport messages; host-side memory (the
worker states an agent keeps for lazy backup, the neighbour buffers) is
owned by one node agent and never read by another.
"""

from __future__ import annotations

import collections
import itertools
import tempfile

import numpy as np
import simpy

from .. import analytics
from ..ckpt import (BlobKind, HolderStore, LocalStorage, MemoryStorage, RestoreSources,
                    SnapshotBuffer, decode_blob, fallback_due, full_blob, lazy_backup,
                    neighbor_backup, razor, receive_forward, restore, rolled_back, snapshot)
from ..controller import ControllerService, StateController
from ..dataloader import (DataServerService, DataServerStub, PreloadBuffer, Preloader,
                          controller_indices, fan_out_indices, fanned_indices, item_bytes)
from ..domain import (TID, Role, StateBundle, dp_neighbor, dp_predecessor, index_of, node_of,
                      roles_on_node)
from ..errors import (Aborted, AddressingError, FailoverError, Interrupted, PlanViolation,
                      RestoreError)
from ..lccl import FakeGroup, Fabric, HostAgent, allreduce, dp_group, init_two_stage
from ..lccl.sim import p2p_recv, p2p_send
from ..lccl.tags import FIELD, TagKind, pack_tag
from ..transport import Direction, LinkModel, Message, Priority, SimNetwork
from ..transport.sim import _defuse_fail
from ..wire import Kind, decode
from .evolution import (ReplicaOracle, backward, evolution_rule, forward, initial_state,
                        local_gradient, loss_signal, same_state)
from .scenario import Scenario

STORAGE_EP = "storage"
WRITE_TAG = pack_tag(TagKind.STATE, 0, FIELD, 0, 1)
READ_TAG = pack_tag(TagKind.STATE, 0, FIELD, 0, 2)
_STOP = (Interrupted, Aborted, AddressingError)


def _read_reply_tag(rid: int) -> int:
    return pack_tag(TagKind.STATE, 0, FIELD, 1, rid & FIELD)


class StorageService:
    """The storage stub as a network endpoint; its NIC bandwidth is the disk bandwidth I."""

    def __init__(self, rt: "SimRuntime", root: str, link: LinkModel):
        self.rt = rt
        self.env = rt.env
        self.store = LocalStorage(root, job=rt.scenario.run.name)
        rt.net.add_node("storage-node", link)
        rt.net.register(STORAGE_EP, "storage-node")
        self.client = rt.service.connect(STORAGE_EP)
        self._channels: dict[str, object] = {}
        self._full: dict[int, set[Role]] = collections.defaultdict(set)
        self._rid = itertools.count(1)
        self.commits: list[tuple[float, int]] = []

    def channel(self, endpoint: str):
        ch = self._channels.get(endpoint)
        if ch is None or ch.closed:
            ch = self._channels[endpoint] = self.rt.net.open_channel(endpoint, STORAGE_EP)
            self.env.process(self._writes(ch))
            self.env.process(self._reads(ch, endpoint))
        return ch

    def _writes(self, ch):
        while not ch.closed:
            try:
                msg = yield ch.recv(STORAGE_EP, WRITE_TAG)
            except Exception:
                return
            role, kind, iteration, blob = msg.payload
            self.store.put(role, kind, iteration, blob)
            if kind == BlobKind.FULL:
                self._full[iteration].add(role)
                if len(self._full[iteration]) == self.rt.spec.world_size:
                    self.store.commit_fallback(iteration, list(self.rt.spec.roles()))
                    self.commits.append((self.env.now, iteration))
                    self.client.notify(Kind.CKPT_RECORD, {"kind": "fallback",
                                                          "iteration": iteration})

    def _reads(self, ch, endpoint):
        while not ch.closed:
            try:
                msg = yield ch.recv(STORAGE_EP, READ_TAG)
            except Exception:
                return
            rid, role, kind, iteration, nbytes = msg.payload
            try:
                out = self.store.get(role, kind, iteration)
            except RestoreError as exc:
                out, nbytes = exc, 0
            ch.send(Message(Priority.STATE, STORAGE_EP, endpoint, _read_reply_tag(rid), out,
                            nbytes=nbytes))

    # client side --------------------------------------------------------
    def write(self, endpoint: str, role: Role, kind: BlobKind, iteration: int, blob: bytes,
              nbytes: float):
        ch = self.channel(endpoint)
        return ch.send(Message(Priority.STATE, endpoint, STORAGE_EP, WRITE_TAG,
                               (role, kind, iteration, blob), nbytes=int(nbytes)))

    def read(self, endpoint: str, role: Role, kind: BlobKind, iteration: int, nbytes: float,
             wait):
        """Generator: fetch one blob; raises RestoreError if it is missing."""
        ch = self.channel(endpoint)
        rid = next(self._rid)
        ch.send(Message(Priority.CTRL, endpoint, STORAGE_EP, READ_TAG,
                        (rid, role, kind, iteration, int(nbytes))))
        msg = yield wait(ch.recv(endpoint, _read_reply_tag(rid)))
        if isinstance(msg.payload, Exception):
            raise msg.payload
        return msg.payload


class Sizes:
    """Modeled byte counts, already multiplied by the time-compression factor."""

    def __init__(self, sc: Scenario):
        spec, s = sc.cluster, sc.run.time_scale
        phi = spec.params_per_device
        self.plan = razor(spec)
        self.unique = self.plan.backup_payload * s
        self.weights = 4 * phi * s
        self.optimizer = (12 * phi / spec.d if spec.distributed_optimizer else 12 * phi) * s
        self.full = self.weights + self.optimizer
        self.gradient = 2 * phi * s
        self.item = item_bytes(spec.seq_len, spec.batch_size) * s
        self.buffer = analytics.preload_buffer_size(spec) * s
        act = sc.links.activation_bytes
        self.activation = (act if act is not None else 4 * spec.seq_len * spec.batch_size) * s
        self.compute = analytics.compute_time(spec).total * s


class Operator:
    """Creates pods.  Software failures and planned restarts reuse the pod in place."""

    def __init__(self, rt: "SimRuntime"):
        self.rt = rt
        self._pods = itertools.count(rt.spec.num_nodes)

    def __call__(self, plan) -> None:
        rt = self.rt
        for node in plan.substitutes:
            na = rt.by_node.get(node)
            if na is not None and na.alive:
                rt.env.process(self._restart_in_place(na, plan))
            else:
                rt.env.process(self._new_pod(node, plan))

    def _restart_in_place(self, na: "NodeAgent", plan):
        rt = self.rt
        rt.timeline[plan.epoch].setdefault("pod_up", rt.env.now)
        na.rejoin(plan.epoch)
        yield rt.env.timeout(0)

    def _new_pod(self, node: int, plan):
        rt, mode = self.rt, self.rt.scenario.mode
        yield rt.env.timeout(mode.pod_creation)
        tl = rt.timeline[plan.epoch]
        tl["pod_up"] = max(tl.get("pod_up", 0.0), rt.env.now)
        yield rt.env.timeout(mode.dependency_install)
        na = NodeAgent(rt, f"pod{next(self._pods)}", None, epoch=plan.epoch)
        na.join()


class NodeAgent:
    """One pod: host agent, worker agent and its workers."""

    def __init__(self, rt: "SimRuntime", phys: str, node: int | None, epoch: int = 0):
        self.rt = rt
        self.env = rt.env
        self.phys = phys
        self.host_ep = f"{phys}.host"
        rt.net.register(self.host_ep, phys)
        self.agent = HostAgent(rt.fabric, -1 if node is None else node, self.host_ep, epoch)
        self.agent.client = rt.service.connect(self.host_ep)
        self.explicit_node = node
        self.holder = HolderStore(self.agent)
        self.states: dict[int, StateBundle] = {}
        self.roles: dict[int, Role] = {}
        self.clients = {}
        self.preloaders: dict[int, Preloader] = {}
        self.contexts = {}
        self.alive = True
        self.software_failed = False
        self.serving: set[tuple[int, Role]] = set()
        self._acks: collections.Counter = collections.Counter()
        self.env.process(self._heartbeats())
        self.env.process(self._pushes())
        rt.agents.append(self)

    @property
    def node(self) -> int:
        return self.agent.node_id

    def endpoint(self, lr: int) -> str:
        ep = f"{self.phys}.w{lr}"
        if ep not in self.clients:
            self.rt.net.register(ep, self.phys)
            self.clients[ep] = self.rt.service.connect(ep)
        return ep

    # lifecycle ----------------------------------------------------------
    def join(self) -> None:
        """Register with the controller (fresh pod) and wait for EPOCH_OPEN."""
        info = {} if self.explicit_node is None else {"node": self.explicit_node}
        reg = self.agent.registration(info)
        reg.callbacks.append(self._registered)

    def _registered(self, ev) -> None:
        if ev.ok:
            self.rt.by_node[self.node] = self
            self.rt.timeline[self.agent.epoch].setdefault("registered", self.env.now)
        else:
            ev.defused = True

    def rejoin(self, epoch: int) -> None:
        """Restart workers in place after a software failure or a planned restart."""
        self.stop({"restart": epoch})
        self.software_failed = False
        self.explicit_node = self.node
        self.agent.reset(epoch)
        self.join()

    def stop(self, notice) -> None:
        self.agent.interrupt(notice)
        for pre in self.preloaders.values():
            pre._poison(notice)

    def crash(self) -> None:
        self.alive = False
        self.stop("crashed")
        self.rt.net.fail_node(self.phys)

    def crash_worker(self, lr: int) -> None:
        """A worker process dies; the pod and its host memory stay up."""
        self.software_failed = True
        ctx = self.contexts.get(lr)
        if ctx is not None:
            ctx._poison("process died")
        self.states.pop(lr, None)

    def launch(self, epoch: int, resume: int, restore_from: str, forwards=()) -> None:
        """Start one worker per local rank for ``epoch``.

        ``restore_from`` is "init" (fresh job), "memory" (survivor, roll back in
        place), "neighbor" (substitute, pull from holders and storage) or
        "fallback" (load the full checkpoint).
        """
        fw = {Role.parse(f["origin"]): f["holder_host"] for f in forwards}
        for lr in range(self.rt.spec.gpus_per_node):
            w = Worker(self, lr, epoch, resume, restore_from, fw)
            self.env.process(w.run())

    def _heartbeats(self):
        interval = self.rt.scenario.mode.heartbeat_interval
        yield self.env.timeout(self.rt.heartbeat_phase)
        while self.alive:
            if self.node >= 0 and not self.software_failed and self.agent.client is not None:
                its = [s.iteration for s in self.states.values()]
                self.agent.client.notify(Kind.HEARTBEAT,
                                         (self.node, min(its) if its else -1, self.env.now))
            yield self.env.timeout(interval)

    def _pushes(self):
        client = self.agent.client
        while self.alive:
            try:
                msg = yield client.next_push()
            except Exception:
                return
            if not self.alive:
                return
            frame = decode(msg.payload)
            body = frame.body
            if frame.kind == Kind.FAILURE_NOTICE:
                self.stop(body)
            elif frame.kind == Kind.BACKUP_ORDER:
                self.env.process(self._lazy_backup(body))
            elif frame.kind == Kind.STATE_FORWARD:
                self.env.process(self._forward(body))
            elif frame.kind == Kind.EPOCH_OPEN:
                self.env.process(self._epoch_open(body))

    def _lazy_backup(self, body):
        rt = self.rt
        role = Role.parse(body["role"])
        it = body["iteration"]
        lr = next(lr for lr, r in self.roles.items() if r == role)
        staged = MemoryStorage()
        reply = {"role": body["role"], "iteration": it}
        try:
            # the controller addresses the lowest surviving DP index of the group
            kinds = lazy_backup(self.states[lr], it, staged, rt.sizes.plan, dp_rank0=True)
            handles = []
            for (r, kind, i), blob in staged.blobs.items():
                n = rt.sizes.weights if kind == BlobKind.WEIGHTS else rt.sizes.optimizer
                handles.append(rt.storage.write(self.host_ep, r, kind, i, blob, n))
            yield self.env.all_of(handles)
            reply["kinds"] = [k.suffix for k in kinds]
        except (FailoverError, KeyError, StopIteration) as exc:
            reply["error"] = f"{type(exc).__name__}: {exc}"
        self.agent.client.notify(Kind.BACKUP_DONE, reply)

    def _forward(self, body):
        origin = Role.parse(body["origin"])
        try:
            handle = yield from self.holder.forward(origin, body["iteration"], body["target_host"],
                                                    body["epoch"], nbytes=int(self.rt.sizes.unique))
            yield handle
        except (FailoverError, simpy.exceptions.SimPyException) as exc:
            self.rt.notes.append(f"forward of {origin} failed: {exc}")

    def _epoch_open(self, body):
        rt = self.rt
        epoch = body["epoch"]
        reg = self.agent._registration
        if reg is not None and not reg.processed and self.agent.epoch == epoch:
            # the push can overtake the reply to our own registration
            yield reg
        tl = rt.timeline[epoch]
        tl.setdefault("epoch_open", self.env.now)
        substitute = self.node in body["failed"]
        if not substitute:
            self.stop({"epoch_open": epoch})
            self.agent.reset(epoch)
            self.explicit_node = self.node
        if body["mode"] == "fallback":
            how = "fallback"
        else:
            how = "neighbor" if substitute else "memory"
        self.launch(epoch, body["resume_iteration"], how, body.get("forwards", ()))

    # checkpoint bookkeeping --------------------------------------------
    def backup_acked(self, role: Role, iteration: int, epoch: int) -> None:
        if epoch != self.agent.epoch or not self.alive:
            return
        key = (role.pp_index, role.tp_index, iteration)
        self._acks[key] += 1
        local = sum(1 for r in self.roles.values()
                    if (r.pp_index, r.tp_index) == key[:2])
        if self._acks[key] == local:
            del self._acks[key]
            self.agent.client.notify(Kind.CKPT_RECORD, {
                "pod": self.node, "groups": [[role.pp_index, role.tp_index]],
                "iteration": iteration, "epoch": epoch})

    def serve_origin(self, origin: Role) -> None:
        key = (self.agent.epoch, origin)
        if key in self.serving:
            return
        self.serving.add(key)
        self.env.process(self.holder.serve(origin, node_of(origin, self.rt.spec)))


class Worker:
    def __init__(self, na: NodeAgent, lr: int, epoch: int, resume: int, restore_from: str,
                 forwards: dict):
        self.na = na
        self.rt = na.rt
        self.env = na.env
        self.lr = lr
        self.epoch = epoch
        self.resume = resume
        self.restore_from = restore_from
        self.forwards = forwards
        self.endpoint = na.endpoint(lr)
        self.client = na.clients[self.endpoint]

    def run(self):
        try:
            yield from self._run()
        except _STOP:
            return
        except PlanViolation:
            raise

    def _run(self):
        rt, na, env = self.rt, self.na, self.env
        spec, sizes, mode = rt.spec, rt.sizes, rt.scenario.mode
        info = {} if na.explicit_node is None else {"node": na.explicit_node}
        ctx = yield from init_two_stage(na.agent, self.lr, self.endpoint, self.client,
                                        node_info=info)
        na.contexts[self.lr] = ctx
        role = ctx.role
        na.roles[self.lr] = role
        tl = rt.timeline[self.epoch]

        if mode.init == "serial":
            yield from ctx.wait_ready()
        state = yield from self._load(ctx, role)
        na.states[self.lr] = state
        rt.loaded(self.epoch, role, state, env.now)
        yield from ctx.wait_ready()
        tl["ready"] = max(tl.get("ready", 0.0), ctx.ready_at)
        tl["loaded_all"] = max(tl.get("loaded_all", 0.0), tl["loaded"][role])

        pre = self._preloader(ctx, role)
        env.process(pre.run())
        plan_peers = ctx.plan
        if sizes.unique > 0 and spec.d > 1 and rt.scenario.run.checkpointing:
            na.serve_origin(dp_predecessor(role, spec))
        dp_grp = dp_group(role, spec) if spec.d > 1 else None
        tp_grp = FakeGroup.of([Role(role.dp_index, role.pp_index, x) for x in range(spec.t)],
                              spec) if spec.t > 1 else None
        buf = SnapshotBuffer(role, len(state.optimizer_current.blob))
        holder_node = node_of(dp_neighbor(role, spec), spec)

        pending = self._checkpoint(ctx, role, state, buf, holder_node)
        if self.resume == 0 and self.restore_from == "init" \
                and fallback_due(0, rt.scenario.run.fallback_interval):
            rt.storage.write(self.endpoint, role, BlobKind.FULL, 0, full_blob(state), sizes.full)

        for it in range(self.resume, rt.scenario.run.iterations):
            rt.started(self.epoch, role, it)
            ctx.check()
            data = yield from pre.get_item(TID(role, it))
            t_compute = 0.0
            # forward pass
            if plan_peers.pp_prev is not None:
                act_in = yield from p2p_recv(ctx, plan_peers.pp_prev, self._tag(0, it))
            else:
                act_in = data
            t0 = env.now
            yield ctx.wait(env.timeout(sizes.compute / 3))
            t_compute += env.now - t0
            act_out = forward(act_in, state.weights)
            if plan_peers.pp_next is not None:
                yield from p2p_send(ctx, plan_peers.pp_next, self._tag(0, it), act_out,
                                    nbytes=int(sizes.activation))
                grad_in = yield from p2p_recv(ctx, plan_peers.pp_next, self._tag(1, it))
            else:
                grad_in = loss_signal(act_out, data)
            # backward pass
            t0 = env.now
            yield ctx.wait(env.timeout(2 * sizes.compute / 3))
            t_compute += env.now - t0
            if plan_peers.pp_prev is not None:
                yield from p2p_send(ctx, plan_peers.pp_prev, self._tag(1, it),
                                    backward(grad_in, state.weights), nbytes=int(sizes.activation))
            grad = local_gradient(act_in, grad_in, state.weights)
            if dp_grp is not None:
                grad = yield from allreduce(ctx, dp_grp, grad, nbytes=int(sizes.gradient))
            if tp_grp is not None:
                yield from allreduce(ctx, tp_grp, np.zeros(1, dtype=np.int64))
            # the previous snapshot must be held by the neighbour before it is overwritten
            t0 = env.now
            if pending is not None and not pending.processed:
                yield ctx.wait(pending)
            overhead = env.now - t0
            state = evolution_rule(state, grad, it, spec)
            na.states[self.lr] = state
            pending = self._checkpoint(ctx, role, state, buf, holder_node)
            if fallback_due(state.iteration, rt.scenario.run.fallback_interval):
                rt.storage.write(self.endpoint, role, BlobKind.FULL, state.iteration,
                                 full_blob(state), sizes.full)
            if mode.checkpointing == "sync" and state.iteration % mode.ckpt_interval == 0:
                t0 = env.now
                h = rt.storage.write(self.endpoint, role, BlobKind.FULL, state.iteration,
                                     full_blob(state), sizes.full)
                yield ctx.wait(h)
                overhead += env.now - t0
            rt.finished(self.epoch, role, it, env.now, t_compute, overhead)
            rt.weights_at[(self.epoch, state.iteration)][role] = state.weights
        rt.worker_done(self.epoch, role, state)

    def _tag(self, direction: int, it: int) -> int:
        return (direction << 32) | (it & 0xFFFFFFFF)

    def _checkpoint(self, ctx, role, state, buf, holder_node):
        """Snapshot ``state`` and stream it to the ring neighbour; returns the ack event."""
        rt, na = self.rt, self.na
        if not rt.scenario.run.checkpointing or rt.scenario.mode.checkpointing == "sync":
            return None
        epoch = self.epoch
        if rt.sizes.unique <= 0 or rt.spec.d == 1:
            # nothing unique to ship: the state is already redundant (or fallback-only)
            na.backup_acked(role, state.iteration, epoch)
            return None
        snap = snapshot(state, rt.sizes.plan, buf)
        done = self.env.event()

        def ship():
            try:
                handle = yield from neighbor_backup(na.agent, snap, holder_node,
                                                    nbytes=int(rt.sizes.unique))
                yield handle
            except (Interrupted, Aborted, AddressingError) as exc:
                _defuse_fail(done, exc)
                return
            rt.backup_bytes[state.iteration] += int(rt.sizes.unique)
            na.backup_acked(role, state.iteration, epoch)
            done.succeed(self.env.now)

        self.env.process(ship())
        return done

    def _load(self, ctx, role: Role):
        rt, how, it = self.rt, self.restore_from, self.resume
        spec, sizes = rt.spec, rt.sizes
        wait = ctx.wait
        if how == "init":
            return initial_state(role, spec, rt.scenario.run.seed)
        if how == "memory":
            return rolled_back(self.na.states[self.lr], it)
        staged = MemoryStorage()
        if how == "fallback":
            blob = yield from rt.storage.read(self.endpoint, role, BlobKind.FULL, it, sizes.full,
                                              wait)
            staged.put(role, BlobKind.FULL, it, blob)
            got = restore(role, sizes.plan, RestoreSources(it, staged, fallback=True))
        else:
            group = Role(0, role.pp_index, role.tp_index)
            reads = [(BlobKind.WEIGHTS, sizes.weights)]
            if sizes.plan.optimizer_redundant:
                reads.append((BlobKind.OPTIMIZER, sizes.optimizer))
            # the forwarded snapshot and the storage reads come from different sources
            procs = [self.env.process(rt.storage.read(self.endpoint, group, kind, it, n, wait))
                     for kind, n in reads]
            fwd = None
            if sizes.plan.optimizer_unique:
                fwd = self.env.process(receive_forward(self.na.agent, self.forwards[role], role,
                                                       self.epoch))
            yield wait(self.env.all_of(procs + ([fwd] if fwd is not None else [])))
            for (kind, _), proc in zip(reads, procs):
                staged.put(group, kind, it, proc.value)
            unique = fwd.value if fwd is not None else None
            got = restore(role, sizes.plan, RestoreSources(it, staged, unique))
        rt.check_restored(self.epoch, got, how)
        return got

    def _preloader(self, ctx, role: Role) -> Preloader:
        rt, na = self.rt, self.na
        spec = rt.spec
        pre = na.preloaders.get(self.lr)
        root_lr = self.lr - role.tp_index
        if role.tp_index == 0:
            peers = [na.endpoint(root_lr + x) for x in range(1, spec.t)]

            def fanout(iteration, indices):
                yield from fan_out_indices(rt.fabric, self.endpoint, peers, na.agent.epoch,
                                           iteration, indices)

            source = controller_indices(self.client, na.node, role, wait=None, fanout=fanout)
        else:
            source = fanned_indices(rt.fabric, self.endpoint, na.endpoint(root_lr),
                                    lambda: na.agent.epoch, wait=lambda e: e)
        if pre is None:
            pre = Preloader(self.env, rt.net, role, self.endpoint, rt.dataserver,
                            PreloadBuffer(max(rt.sizes.buffer, rt.sizes.item)), rt.sizes.item,
                            source, start_iteration=self.resume, on_consume=rt.consumed)
            na.preloaders[self.lr] = pre
        else:
            pre.role = role
            pre.index_source = source
            pre.restart(self.resume)
        return pre


class SimRuntime:
    """Build the simulated cluster for a scenario; :meth:`run` returns RunMetrics."""

    def __init__(self, scenario: Scenario, storage_root: str | None = None):
        self.scenario = sc = scenario
        self.spec = spec = sc.cluster
        self.env = env = simpy.Environment()
        self.sizes = Sizes(sc)
        links = sc.links
        scale = sc.run.time_scale
        link = LinkModel(bandwidth=links.bandwidth or spec.nic_bandwidth, latency=links.latency,
                         chunk_size=links.chunk_size)
        self.link = link
        self.net = SimNetwork(env, link)
        self.core = StateController(spec, heartbeat_interval=sc.mode.heartbeat_interval,
                                    miss_threshold=sc.mode.threshold, seed=sc.run.seed,
                                    neighbor_checkpointing=sc.mode.checkpointing == "neighbor"
                                    and sc.run.checkpointing)
        self.operator = Operator(self)
        self.service = ControllerService(env, self.net, self.core, provisioner=self.operator)
        self.service.on_plan = self._on_plan
        self.fabric = Fabric(env, self.net, spec, setup_delay=links.setup_delay * 1.0,
                             poll_interval=0.01)
        self._tmp = None
        if storage_root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="failover-")
            storage_root = self._tmp.name
        self.storage = StorageService(self, storage_root, LinkModel(
            bandwidth=links.storage_bandwidth or spec.disk_bandwidth, latency=links.latency,
            chunk_size=links.chunk_size))
        self.net.add_node("data-node", LinkModel(
            bandwidth=links.data_bandwidth or link.bandwidth, latency=links.latency,
            chunk_size=links.chunk_size))
        self.dataserver = DataServerService(env, self.net, DataServerStub(seed=sc.run.seed))
        self.oracle = ReplicaOracle(spec, sc.run.seed)
        self.heartbeat_phase = 0.5 * sc.mode.heartbeat_interval
        self.time_scale = scale

        self.agents: list[NodeAgent] = []
        self.by_node: dict[int, NodeAgent] = {}
        self.timeline: dict[int, dict] = collections.defaultdict(
            lambda: {"loaded": {}, "started": collections.Counter()})
        self.iter_end: dict[tuple, float] = {}  # (epoch, iteration) -> last worker finished
        self.iter_count: collections.Counter = collections.Counter()
        self.weights_at: dict[tuple, dict[Role, bytes]] = collections.defaultdict(dict)
        self.iter_compute: dict[tuple, float] = {}
        self.iter_overhead: dict[tuple, float] = {}
        self.backup_bytes: dict[int, int] = collections.defaultdict(int)
        self.consumption: dict[tuple, list] = collections.defaultdict(list)
        self.restore_checks: list[dict] = []
        self.final_states: dict[Role, StateBundle] = {}
        self.notes: list[str] = []
        self.crashes: list[dict] = []
        self.done_workers: dict[int, int] = collections.Counter()
        self.done = env.event()
        self.current_epoch = 0
        self._started_it: dict[tuple, int] = collections.Counter()

    # hooks used by agents and workers ----------------------------------
    def started(self, epoch: int, role: Role, it: int) -> None:
        tl = self.timeline[epoch]
        if it == tl.setdefault("resume", it):
            tl["started"][it] += 1
            if tl["started"][it] == self.spec.world_size:
                tl["resumed"] = self.env.now
        self._started_it[(epoch, it)] += 1

    def all_started(self, it: int) -> bool:
        return self._started_it[(self.current_epoch, it)] >= self.spec.world_size

    def finished(self, epoch, role, it, now, compute, overhead) -> None:
        key = (epoch, it)
        self.iter_end[key] = max(self.iter_end.get(key, 0.0), now)
        self.iter_count[key] += 1
        self.iter_compute[key] = max(self.iter_compute.get(key, 0.0), compute)
        self.iter_overhead[key] = max(self.iter_overhead.get(key, 0.0), overhead)

    def loaded(self, epoch, role, state, now) -> None:
        self.timeline[epoch]["loaded"][role] = now

    def consumed(self, tid: TID, indices) -> None:
        if tid.role.pp_index == 0 and tid.role.tp_index == 0:
            self.consumption[(self.current_epoch, tid.iteration)].append(
                (tid.role.dp_index, tuple(indices)))

    def check_restored(self, epoch: int, got: StateBundle, source: str) -> None:
        want = self.oracle.state(got.role, got.iteration)
        self.restore_checks.append({
            "epoch": epoch, "role": str(got.role), "iteration": got.iteration, "source": source,
            "match": same_state(got, want),
            "checksum": full_blob(got)[28:32].hex(), "oracle_checksum": full_blob(want)[28:32].hex(),
        })

    def worker_done(self, epoch: int, role: Role, state: StateBundle) -> None:
        if epoch != self.current_epoch:
            return
        self.final_states[role] = state
        self.done_workers[epoch] += 1
        if self.done_workers[epoch] == self.spec.world_size and not self.done.triggered:
            self.done.succeed("completed")

    def _on_plan(self, plan) -> None:
        self.current_epoch = plan.epoch
        tl = self.timeline[plan.epoch]
        tl["plan"] = plan
        if plan.resume_iteration < 0 and not self.done.triggered:
            self.done.succeed("unrecoverable")

    # failure injection --------------------------------------------------
    def _inject(self, ev):
        sc, env = self.scenario, self.env
        if ev.at_time is not None:
            yield env.timeout(max(0.0, ev.at_time - env.now))
        else:
            poll = max(self.sizes.compute / 50, 1e-6)
            need_ckpt = sc.run.checkpointing and sc.mode.checkpointing == "neighbor"
            while not (self.all_started(ev.at_iteration) and
                       (not need_ckpt or self.core.global_consistent_iteration()
                        >= ev.at_iteration)):
                if self.done.triggered:
                    return
                yield env.timeout(poll)
            yield env.timeout(ev.offset * self.sizes.compute)
        record = {"kind": ev.kind, "targets": list(ev.targets), "time": env.now,
                  "iteration": ev.at_iteration}
        if ev.kind in ("node_crash", "node_pair_crash"):
            for n in ev.targets:
                na = self.by_node[n]
                self.service.mark_failed_at(n, env.now)
                na.crash()
        elif ev.kind == "worker_crash":
            node, lr = ev.targets
            self.service.mark_failed_at(node, env.now)
            self.by_node[node].crash_worker(lr)
        elif ev.kind == "healthy_restart":
            for n in ev.targets:
                self.service.mark_failed_at(n, env.now)
            na = self.by_node[ev.targets[0]]
            env.process(na.agent.client.call(Kind.FAILURE_NOTICE,
                                             {"nodes": list(ev.targets), "reason": "restart"}))
        self.crashes.append(record)

    # driving ------------------------------------------------------------
    def run(self):
        from .metrics import collect
        sc, env = self.scenario, self.env
        for n in range(self.spec.num_nodes):
            na = NodeAgent(self, f"p{n}", n)
            self.by_node[n] = na
            na.join()
            na.launch(0, 0, "init")
        for ev in sc.events:
            env.process(self._inject(ev))
        env.run(until=env.any_of([self.done, env.timeout(sc.run.max_time)]))
        outcome = self.done.value if self.done.triggered else "timeout"
        metrics = collect(self, outcome)
        if self._tmp is not None:
            self._tmp.cleanup()
        return metrics


def run_scenario(scenario: Scenario, storage_root: str | None = None):
    return SimRuntime(scenario, storage_root).run()
