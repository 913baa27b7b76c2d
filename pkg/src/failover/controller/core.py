"""Controller state and decisions, free of any transport or clock.

The sim service (``controller.service``) feeds messages in and executes the
returned plans; tests drive this class directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..domain import TID, ClusterSpec, Role, dp_neighbor, node_of, roles_on_node
from ..errors import ProtocolError
from ..lccl.plan import comm_plan
from ..lccl.rendezvous import RendezvousTable


class HeartbeatTable:
    """One slot per pod.  Each slot has a single writer: that pod's local rank 0."""

    def __init__(self, num_pods: int):
        self.last_seen = np.full(num_pods, -np.inf)
        self.last_iteration = np.full(num_pods, -1, dtype=np.int64)
        self.registered = np.zeros(num_pods, dtype=bool)
        self.failed = np.zeros(num_pods, dtype=bool)
        self.unknown = 0
        self.regressions = 0
        self.ignored_after_failure = 0

    def __len__(self) -> int:
        return len(self.last_seen)

    def register(self, pod: int, now: float) -> None:
        self.registered[pod] = True
        self.failed[pod] = False
        self.last_seen[pod] = now
        self.last_iteration[pod] = -1

    def update(self, pod: int, iteration: int, timestamp: float) -> None:
        if not 0 <= pod < len(self.last_seen) or not self.registered[pod]:
            self.unknown += 1
            return
        if self.failed[pod]:
            self.ignored_after_failure += 1
            return
        if iteration < self.last_iteration[pod]:
            self.regressions += 1
        self.last_iteration[pod] = iteration
        self.last_seen[pod] = timestamp

    def update_batch(self, pods: np.ndarray, iterations: np.ndarray,
                     timestamps: np.ndarray) -> None:
        """Apply many heartbeats at once; entries are applied in array order."""
        pods = np.asarray(pods, dtype=np.int64)
        iterations = np.asarray(iterations, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=float)
        in_range = (pods >= 0) & (pods < len(self.last_seen))
        ok = in_range.copy()
        ok[in_range] = self.registered[pods[in_range]]
        self.unknown += int((~ok).sum())
        dead = np.zeros_like(ok)
        dead[ok] = self.failed[pods[ok]]
        self.ignored_after_failure += int(dead.sum())
        live = ok & ~dead
        p, it, ts = pods[live], iterations[live], timestamps[live]
        self.regressions += int((it < self.last_iteration[p]).sum())
        # fancy assignment keeps the last write per pod, matching in-order semantics
        self.last_iteration[p] = it
        self.last_seen[p] = ts

    def stale(self, now: float, deadline: float) -> np.ndarray:
        late = (now - self.last_seen) > deadline
        return np.flatnonzero(self.registered & ~self.failed & late)


class IterationLedger:
    """Checkpoint progress per DP group, keyed by group (pp, tp).

    A pod reports a group once every member of that group it hosts has its
    state for the iteration safely held by the ring neighbour.  A group's
    latest iteration is the minimum over the pods hosting its members; groups
    without any report sit at 0, the initial state everyone can rebuild.
    """

    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        self.reporters: dict[tuple[int, int], frozenset[int]] = {}
        for pp in range(spec.p):
            for tp in range(spec.t):
                pods = {node_of(Role(dp, pp, tp), spec) for dp in range(spec.d)}
                self.reporters[(pp, tp)] = frozenset(pods)
        self._latest: dict[tuple[int, int], dict[int, int]] = {g: {} for g in self.reporters}
        self.base = 0
        self.worker_iteration: dict[int, int] = {}

    def record(self, pod: int, group: tuple[int, int], iteration: int) -> None:
        group = tuple(group)
        if group not in self._latest:
            raise ProtocolError(f"unknown DP group {group}")
        if pod not in self.reporters[group]:
            raise ProtocolError(f"pod {pod} hosts no member of DP group {group}")
        slot = self._latest[group]
        slot[pod] = max(slot.get(pod, self.base), iteration)

    def group_latest(self, group: tuple[int, int]) -> int:
        slot = self._latest[tuple(group)]
        return min(slot.get(p, self.base) for p in self.reporters[tuple(group)])

    def global_consistent_iteration(self) -> int:
        return min(self.group_latest(g) for g in self._latest)

    def rebase(self, iteration: int) -> None:
        """Forget progress past a recovery point; everyone restarts from ``iteration``."""
        self.base = iteration
        for slot in self._latest.values():
            slot.clear()


@dataclass(frozen=True)
class IndexAssignment:
    """Index list for one (dp, pp) group, addressed to its TP rank 0."""

    tid: TID
    indices: tuple[int, ...]


class DataIndexMap:
    """Deterministic split of each iteration's global batch across DP replicas.

    Item ids of iteration n are n*G .. (n+1)*G-1, shuffled by (seed, n).
    Pipeline stages of one replica consume the same samples, so they share
    the replica's list.
    """

    def __init__(self, spec: ClusterSpec, seed: int = 0, global_batch: int | None = None):
        self.spec = spec
        self.seed = seed
        self.global_batch = global_batch or spec.batch_size * spec.d
        self.active: tuple[int, ...] = tuple(range(spec.d))

    def set_active(self, dp_indices) -> None:
        active = tuple(sorted(set(int(i) for i in dp_indices)))
        if not active:
            raise ValueError("at least one DP replica must be active")
        self.active = active

    def per_replica(self, iteration: int) -> dict[int, tuple[int, ...]]:
        rng = np.random.default_rng([self.seed, iteration])
        items = rng.permutation(self.global_batch) + iteration * self.global_batch
        parts = np.array_split(items, len(self.active))
        return {dp: tuple(int(x) for x in part) for dp, part in zip(self.active, parts)}

    def assign(self, iteration: int) -> list[IndexAssignment]:
        out = []
        for dp, indices in self.per_replica(iteration).items():
            for pp in range(self.spec.p):
                out.append(IndexAssignment(TID(Role(dp, pp, 0), iteration), indices))
        return out


@dataclass(frozen=True)
class BackupOrder:
    role: Role
    node: int
    iteration: int


@dataclass(frozen=True)
class StateForward:
    origin: Role
    holder: Role
    holder_node: int
    target_node: int
    iteration: int


RECOVERY_STEPS = ("interrupt", "consistent_iteration", "lazy_backup", "provision",
                  "forward_state", "open_epoch", "resume")


@dataclass(frozen=True)
class RecoveryPlan:
    failed_nodes: tuple[int, ...]
    failed_roles: tuple[Role, ...]
    survivors: tuple[int, ...]
    epoch: int
    global_iteration: int
    resume_iteration: int
    mode: str  # "neighbor" or "fallback"
    backup_orders: tuple[BackupOrder, ...] = ()
    forwards: tuple[StateForward, ...] = ()
    substitutes: tuple[int, ...] = ()
    reason: str = ""
    steps: tuple[str, ...] = field(default=RECOVERY_STEPS)


class StateController:
    def __init__(self, spec: ClusterSpec, *, heartbeat_interval: float = 1.0,
                 miss_threshold: float = 3, seed: int = 0, neighbor_checkpointing: bool = True):
        self.spec = spec.check()
        self.neighbor_checkpointing = neighbor_checkpointing
        self.heartbeat_interval = heartbeat_interval
        self.miss_threshold = miss_threshold
        self.epoch = 0
        self.rendezvous = RendezvousTable(0)
        self.heartbeats = HeartbeatTable(spec.num_nodes)
        self.ledger = IterationLedger(spec)
        self.indices = DataIndexMap(spec, seed)
        self.hosts: dict[int, str] = {}  # node -> host endpoint, current epoch
        self.vacant: set[int] = set()  # failed nodes awaiting a substitute
        self._registered_ever: set[int] = set()
        self.fallback_iteration: int | None = None
        self.resume_iteration = 0
        self.failures_seen: list[int] = []

    # registration -------------------------------------------------------
    def register(self, node_info: dict, epoch: int, now: float = 0.0) -> dict:
        if epoch != self.epoch:
            raise ProtocolError(f"registration in stale epoch {epoch} (current {self.epoch})")
        host = node_info["host"]
        if host in self.hosts.values():
            raise ProtocolError(f"{host} already registered in epoch {epoch}")
        node = node_info.get("node")
        if node is None:
            free = [n for n in range(self.spec.num_nodes) if n not in self.hosts]
            vacant = sorted(self.vacant & set(free))
            pool = vacant or [n for n in free if n not in self._registered_ever]
            if not pool:
                raise ProtocolError("no vacant node slot")
            node = pool[0]
        node = int(node)
        if not 0 <= node < self.spec.num_nodes:
            raise ProtocolError(f"node {node} outside the cluster")
        if node in self.hosts:
            raise ProtocolError(f"node {node} already registered in epoch {epoch}")
        self.hosts[node] = host
        self.vacant.discard(node)
        self._registered_ever.add(node)
        self.heartbeats.register(node, now)
        roles = roles_on_node(node, self.spec)
        return {
            "node": node,
            "epoch": self.epoch,
            "roles": [str(r) for r in roles],
            "peers": {str(r): [str(x) for x in comm_plan(r, self.spec).peers] for r in roles},
            "global_iteration": self.resume_iteration,
        }

    # liveness -----------------------------------------------------------
    def heartbeat(self, pod: int, iteration: int, timestamp: float) -> None:
        self.heartbeats.update(pod, iteration, timestamp)
        if 0 <= pod < len(self.heartbeats) and not self.heartbeats.failed[pod]:
            self.ledger.worker_iteration[pod] = iteration

    def detect_failures(self, now: float) -> list[int]:
        """Newly failed pods: silent for longer than miss_threshold intervals."""
        stale = self.heartbeats.stale(now, self.miss_threshold * self.heartbeat_interval)
        self.heartbeats.failed[stale] = True
        failed = [int(p) for p in stale]
        self.failures_seen.extend(failed)
        return failed

    # bookkeeping --------------------------------------------------------
    def record_checkpoint(self, pod: int, dp_group: tuple[int, int], iteration: int) -> None:
        self.ledger.record(pod, dp_group, iteration)

    def record_fallback(self, iteration: int) -> None:
        if self.fallback_iteration is None or iteration > self.fallback_iteration:
            self.fallback_iteration = iteration

    def global_consistent_iteration(self) -> int:
        return self.ledger.global_consistent_iteration()

    def assign_indices(self, iteration: int) -> list[IndexAssignment]:
        return self.indices.assign(iteration)

    # recovery -----------------------------------------------------------
    def orchestrate_recovery(self, failed_pods) -> RecoveryPlan:
        """Decide how to restore the job after ``failed_pods`` stopped.

        Unique state comes from each failed role's ring successor; redundant
        state from the lowest surviving DP rank of the group via lazy backup.
        When either source is gone the plan falls back to the last complete
        fallback checkpoint.
        """
        failed = tuple(sorted(set(int(p) for p in failed_pods)))
        if not failed:
            raise ProtocolError("recovery needs at least one failed pod")
        spec = self.spec
        dead = set(failed)
        failed_roles = tuple(r for n in failed for r in roles_on_node(n, spec))
        survivors = tuple(n for n in sorted(self.hosts) if n not in dead)
        g = self.global_consistent_iteration()
        unique_optimizer = spec.distributed_optimizer and spec.d > 1

        reason = ""
        if not self.neighbor_checkpointing:
            reason = "in-memory checkpointing is disabled"
        elif spec.d == 1:
            reason = "no data-parallel replica holds any copy"
        forwards, orders = [], []
        if not reason and unique_optimizer:
            for r in failed_roles:
                holder = dp_neighbor(r, spec)
                if node_of(holder, spec) in dead:
                    reason = f"neighbour buffer of {r} lost with {holder}"
                    break
                forwards.append(StateForward(r, holder, node_of(holder, spec),
                                             node_of(r, spec), g))
        if not reason:
            groups = sorted({(r.pp_index, r.tp_index) for r in failed_roles})
            for pp, tp in groups:
                alive = [Role(dp, pp, tp) for dp in range(spec.d)
                         if node_of(Role(dp, pp, tp), spec) not in dead]
                if not alive:
                    reason = f"every replica of DP group ({pp},{tp}) failed"
                    break
                orders.append(BackupOrder(alive[0], node_of(alive[0], spec), g))

        self.epoch += 1
        self.rendezvous.open_epoch(self.epoch)
        self.hosts = {}
        self.vacant |= dead
        if reason:
            if self.fallback_iteration is None:
                resume = -1  # nothing to restore from
            else:
                resume = self.fallback_iteration
            plan = RecoveryPlan(failed, failed_roles, survivors, self.epoch, g, resume,
                                "fallback", substitutes=failed, reason=reason)
        else:
            plan = RecoveryPlan(failed, failed_roles, survivors, self.epoch, g, g, "neighbor",
                                tuple(orders), tuple(forwards), failed)
        if plan.resume_iteration >= 0:
            self.resume_iteration = plan.resume_iteration
            self.ledger.rebase(plan.resume_iteration)
        return plan

    def escalate(self, plan: RecoveryPlan, reason: str) -> RecoveryPlan:
        """Turn a neighbour plan into a fallback plan after a source turned out missing."""
        resume = -1 if self.fallback_iteration is None else self.fallback_iteration
        out = RecoveryPlan(plan.failed_nodes, plan.failed_roles, plan.survivors, plan.epoch,
                           plan.global_iteration, resume, "fallback",
                           substitutes=plan.substitutes, reason=reason)
        if resume >= 0:
            self.resume_iteration = resume
            self.ledger.rebase(resume)
        return out
