"""The controller as one simulated event-loop activity.

Each client gets its own control channel; a pump per channel hands decoded
requests to :meth:`ControllerService.handle`, which runs to completion without
yielding, so controller state is only ever touched by one activity at a time.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import simpy

from ..control import PUSH_TAG, REPLY_TAG, REQUEST_TAG, SimControlClient, frame_message
from ..domain import Role, node_of, roles_on_node
from ..errors import ProtocolError
from ..transport import SimNetwork
from ..wire import Kind, decode, encode
from .core import RecoveryPlan, StateController

CONTROLLER_NODE = "controller-node"


@dataclass
class RecoveryRecord:
    plan: RecoveryPlan
    failed_at: float | None
    detected_at: float
    provisioned_at: float | None = None
    backups_done_at: float | None = None
    epoch_opened_at: float | None = None
    notes: list[str] = field(default_factory=list)


class ControllerService:
    """Serves the wire protocol for ``core`` on the simulated network.

    ``provisioner(plan)`` is called once per recovery to bring up the
    substitute nodes; the harness supplies it because pod creation is outside
    the controller.  Recovery continues once every substitute has registered
    in the plan's epoch.
    """

    def __init__(self, env: simpy.Environment, net: SimNetwork, core: StateController,
                 endpoint: str = "controller", *, detect: bool = True, provisioner=None):
        self.env = env
        self.net = net
        self.core = core
        self.endpoint = endpoint
        self.provisioner = provisioner
        net.register(endpoint, CONTROLLER_NODE)
        self.channels: dict[str, object] = {}
        self.node_endpoint: dict[int, str] = {}
        self.recoveries: list[RecoveryRecord] = []
        self.on_plan = None  # optional hook(plan) for observers
        self.messages_in = collections.Counter()
        self.max_message_bytes = 0
        self.failure_times: dict[int, float] = {}
        self._backups_pending: set[tuple] = set()
        self._backup_errors: list[str] = []
        self._backups_event: simpy.Event | None = None
        self._recovering = False
        self._provisioned: simpy.Event | None = None
        self._awaiting: set[int] = set()
        self._queued: list[int] = []
        self.halted = False
        self.unrecoverable: str | None = None
        if detect:
            env.process(self._detector())

    # plumbing -----------------------------------------------------------
    def connect(self, endpoint: str, timeout: float | None = None) -> SimControlClient:
        client = SimControlClient(self.env, self.net, endpoint, self.endpoint, timeout=timeout)
        self.channels[endpoint] = client.channel
        self.env.process(self._pump(client.channel, endpoint))
        return client

    def _pump(self, channel, client_ep):
        while not channel.closed:
            try:
                msg = yield channel.recv(self.endpoint, REQUEST_TAG)
            except Exception:
                return
            if not self.net.alive(self.endpoint):
                return
            self.max_message_bytes = max(self.max_message_bytes, len(msg.payload))
            frame = decode(msg.payload)
            self.messages_in[frame.kind.name] += 1
            try:
                reply = self.handle(client_ep, frame.kind, frame.body)
            except ProtocolError as exc:
                reply = (Kind.ERROR, {"error": str(exc)})
            if reply is not None:
                kind, body = reply
                if isinstance(frame.body, dict) and "rid" in frame.body:
                    body["rid"] = frame.body["rid"]
                channel.send(frame_message(self.endpoint, client_ep, REPLY_TAG, encode(kind, body)))

    def push(self, node: int, kind: Kind, body: dict) -> None:
        ep = self.node_endpoint.get(node)
        if ep is None:
            return
        data = encode(kind, body)
        self.max_message_bytes = max(self.max_message_bytes, len(data))
        self.channels[ep].send(frame_message(self.endpoint, ep, PUSH_TAG, data))

    # request handling ---------------------------------------------------
    def handle(self, client_ep: str, kind: Kind, body):
        core = self.core
        now = self.env.now
        if kind == Kind.HEARTBEAT:
            pod, iteration, ts = body
            core.heartbeat(pod, iteration, ts)
            return None
        if kind == Kind.REGISTER:
            reply = core.register(body, body["epoch"], now)
            self.node_endpoint[reply["node"]] = client_ep
            self._check_provisioned()
            return Kind.REGISTER_REPLY, reply
        if kind == Kind.RDV_WRITE:
            core.rendezvous.write(body["epoch"], body["rank"], body["address"])
            return Kind.ACK, {}
        if kind == Kind.RDV_READ:
            slots = core.rendezvous.read(body["epoch"], body["ranks"])
            return Kind.RDV_REPLY, {"slots": {str(k): v for k, v in slots.items()}}
        if kind == Kind.CKPT_RECORD:
            if body.get("kind") == "fallback":
                core.record_fallback(body["iteration"])
            elif body.get("epoch", core.epoch) == core.epoch and not self._recovering:
                for group in body["groups"]:
                    core.record_checkpoint(body["pod"], tuple(group), body["iteration"])
            return None
        if kind == Kind.INDEX_ASSIGN:
            pod = body["pod"]
            lists = []
            for a in core.assign_indices(body["iteration"]):
                if node_of(a.tid.role, core.spec) == pod:
                    lists.append({"role": str(a.tid.role), "iteration": a.tid.iteration,
                                  "indices": list(a.indices)})
            return Kind.INDEX_ASSIGN, {"assignments": lists}
        if kind == Kind.FAILURE_NOTICE:
            # an agent reporting its own node (software failure, planned restart)
            nodes = [int(n) for n in body["nodes"]]
            for n in nodes:
                if 0 <= n < len(core.heartbeats):
                    core.heartbeats.failed[n] = True
                self.failure_times.setdefault(n, now)
            self.report_failures(nodes)
            return Kind.ACK, {}
        if kind == Kind.BACKUP_DONE:
            if body.get("error"):
                self._backup_errors.append(f'{body["role"]}: {body["error"]}')
            key = (body["role"], body["iteration"])
            self._backups_pending.discard(key)
            if not self._backups_pending and self._backups_event is not None \
                    and not self._backups_event.triggered:
                self._backups_event.succeed(now)
            return None
        raise ProtocolError(f"unexpected request {kind.name}")

    # detection and recovery ---------------------------------------------
    def _detector(self):
        interval = self.core.heartbeat_interval
        while not self.halted:
            yield self.env.timeout(interval)
            failed = self.core.detect_failures(self.env.now)
            if failed:
                self.report_failures(failed)

    def report_failures(self, failed) -> None:
        if self._recovering:
            self._queued.extend(failed)
            return
        self._recovering = True
        self.env.process(self._recover(list(failed), self.env.now))

    def _recover(self, failed, detected_at):
        core = self.core
        old_hosts = dict(core.hosts)
        plan = core.orchestrate_recovery(failed)
        failed_at = min((self.failure_times.get(n, detected_at) for n in failed), default=None)
        rec = RecoveryRecord(plan, failed_at, detected_at)
        self.recoveries.append(rec)
        if self.on_plan is not None:
            self.on_plan(plan)
        notice = {"failed": list(plan.failed_nodes), "epoch": plan.epoch,
                  "global_iteration": plan.global_iteration,
                  "resume_iteration": plan.resume_iteration, "mode": plan.mode}
        # (1) wake everyone blocked on the dead peers
        for node in plan.survivors:
            self.push(node, Kind.FAILURE_NOTICE, notice)
        if plan.resume_iteration < 0:
            self.unrecoverable = plan.reason or "no fallback checkpoint"
            self.halted = True
            rec.notes.append("unrecoverable: " + self.unrecoverable)
            return
        # (3) lazy backup and (4) provisioning run side by side
        for node in plan.failed_nodes:
            self.node_endpoint.pop(node, None)
        self._backup_errors = []
        self._backups_pending = {(str(o.role), o.iteration) for o in plan.backup_orders}
        self._backups_event = self.env.event()
        if not self._backups_pending:
            self._backups_event.succeed(self.env.now)
        for order in plan.backup_orders:
            self.push(order.node, Kind.BACKUP_ORDER,
                      {"role": str(order.role), "iteration": order.iteration, "epoch": plan.epoch})
        self._provisioned = self.env.event()
        self._awaiting = set(plan.substitutes)
        if self.provisioner is not None:
            self.provisioner(plan)
        else:
            rec.notes.append("no provisioner: substitutes must register on their own")
        self._check_provisioned()
        backups = self._backups_event
        yield self._provisioned
        rec.provisioned_at = self.env.now
        yield backups
        rec.backups_done_at = backups.value
        if self._backup_errors:
            # a survivor could not produce the target version: fall back
            plan = core.escalate(plan, "lazy backup failed: " + "; ".join(self._backup_errors))
            rec.plan = plan
            rec.notes.append(plan.reason)
            notice.update(resume_iteration=plan.resume_iteration, mode=plan.mode)
            if plan.resume_iteration < 0:
                self.unrecoverable = plan.reason
                self.halted = True
                if self.on_plan is not None:
                    self.on_plan(plan)
                return
        # (5) holders stream the lost unique state straight to the substitutes
        for fw in plan.forwards:
            self.push(fw.holder_node, Kind.STATE_FORWARD, {
                "origin": str(fw.origin), "holder": str(fw.holder), "iteration": fw.iteration,
                "target_node": fw.target_node, "target_host": core.hosts[fw.target_node],
                "epoch": plan.epoch})
        # (6) new epoch for everyone, (7) resume at the consistent iteration
        open_body = dict(notice, resume_iteration=plan.resume_iteration)
        for node in sorted(set(plan.survivors) | set(plan.substitutes)):
            body = dict(open_body)
            if node in plan.substitutes:
                # where to pull each forwarded snapshot from
                body["forwards"] = [{"origin": str(fw.origin),
                                     "holder_host": old_hosts[fw.holder_node],
                                     "iteration": fw.iteration}
                                    for fw in plan.forwards if fw.target_node == node]
            self.push(node, Kind.EPOCH_OPEN, body)
        rec.epoch_opened_at = self.env.now
        self._recovering = False
        if self._queued:
            queued, self._queued = self._queued, []
            self.report_failures(queued)

    def _check_provisioned(self) -> None:
        ev = self._provisioned
        if ev is None or ev.triggered:
            return
        if all(n in self.core.hosts for n in self._awaiting):
            ev.succeed(self.env.now)

    def mark_failed_at(self, node: int, when: float) -> None:
        """Harness hook: true crash time, used only for reporting detection latency."""
        self.failure_times[node] = when

    def roles_of(self, node: int) -> list[Role]:
        return roles_on_node(node, self.core.spec)
