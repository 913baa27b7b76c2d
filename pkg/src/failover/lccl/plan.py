"""Static communication structure: per-worker peer plans, faked groups, ring schedules."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..domain import ClusterSpec, Role, index_of, node_of, role_of


@dataclass(frozen=True)
class CommPlan:
    """Fixed peers of one worker.  Pipelines do not wrap; the DP ring does."""

    role: Role
    dp_prev: Role | None
    dp_next: Role | None
    pp_prev: Role | None
    pp_next: Role | None

    @property
    def peers(self) -> tuple[Role, ...]:
        seen = []
        for r in (self.dp_prev, self.dp_next, self.pp_prev, self.pp_next):
            if r is not None and r != self.role and r not in seen:
                seen.append(r)
        return tuple(seen)

    def inter_node_peers(self, spec: ClusterSpec) -> tuple[Role, ...]:
        home = node_of(self.role, spec)
        return tuple(r for r in self.peers if node_of(r, spec) != home)


def comm_plan(role: Role, spec: ClusterSpec) -> CommPlan:
    dp_prev = dp_next = pp_prev = pp_next = None
    if spec.d > 1:
        dp_prev = Role((role.dp_index - 1) % spec.d, role.pp_index, role.tp_index)
        dp_next = Role((role.dp_index + 1) % spec.d, role.pp_index, role.tp_index)
    if role.pp_index > 0:
        pp_prev = Role(role.dp_index, role.pp_index - 1, role.tp_index)
    if role.pp_index < spec.p - 1:
        pp_next = Role(role.dp_index, role.pp_index + 1, role.tp_index)
    return CommPlan(role, dp_prev, dp_next, pp_prev, pp_next)


@dataclass(frozen=True)
class FakeGroup:
    """A user-visible group realized as per-node segments.

    ``members`` are global ranks in caller order; ``segments`` partition them by
    node, ordered by each node's first appearance, member order kept inside a
    segment.  ``nodes[i]`` is the node of ``segments[i]``.
    """

    members: tuple[int, ...]
    segments: tuple[tuple[int, ...], ...]
    nodes: tuple[int, ...]

    @classmethod
    def of(cls, members: Iterable[int | Role], spec: ClusterSpec) -> "FakeGroup":
        ranks = tuple(index_of(m, spec) if isinstance(m, Role) else int(m) for m in members)
        if len(set(ranks)) != len(ranks):
            raise ValueError("group members must be distinct")
        by_node: dict[int, list[int]] = {}
        for r in ranks:
            role_of(r, spec)  # range check
            by_node.setdefault(r // spec.gpus_per_node, []).append(r)
        return cls(ranks, tuple(tuple(v) for v in by_node.values()), tuple(by_node))

    @property
    def gid(self) -> int:
        """16-bit group id, identical on every host that builds the same group."""
        return zlib.crc32(np.asarray(self.members, dtype="<i8").tobytes()) & 0xFFFF

    def segment_of(self, node: int) -> tuple[int, ...]:
        return self.segments[self.nodes.index(node)]

    def __len__(self) -> int:
        return len(self.members)


def dp_group(role: Role, spec: ClusterSpec) -> FakeGroup:
    return FakeGroup.of((Role(i, role.pp_index, role.tp_index) for i in range(spec.d)), spec)


@dataclass(frozen=True)
class RingStep:
    phase: str  # "reduce" or "gather"
    send_chunk: int
    recv_chunk: int


def ring_schedule(n: int, position: int) -> list[RingStep]:
    """The 2(n-1) steps host ``position`` runs in a segmented ring allreduce.

    After the reduce phase, position r owns the fully reduced chunk (r+1) mod n;
    the gather phase circulates the owned chunks.
    """
    steps = []
    for s in range(n - 1):
        steps.append(RingStep("reduce", (position - s) % n, (position - s - 1) % n))
    for s in range(n - 1):
        steps.append(RingStep("gather", (position + 1 - s) % n, (position - s) % n))
    return steps


def ring_allreduce_local(buffers: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Run the ring schedule over in-memory buffers, step by step.

    Serves as a schedule check independent of any transport.
    """
    n = len(buffers)
    work = [np.array(b, copy=True) for b in buffers]
    if n == 1:
        return work
    chunks = [np.array_split(w, n) for w in work]
    schedules = [ring_schedule(n, r) for r in range(n)]
    for step in range(2 * (n - 1)):
        outgoing = [chunks[r][schedules[r][step].send_chunk].copy() for r in range(n)]
        for r in range(n):
            st = schedules[r][step]
            incoming = outgoing[(r - 1) % n]
            if st.phase == "reduce":
                chunks[r][st.recv_chunk] += incoming
            else:
                chunks[r][st.recv_chunk][...] = incoming
    return work
