"""Identity and configuration types shared by every other module.

Workers are addressed by a logical :class:`Role` in (data, pipeline, tensor)
parallel space.  The role is decoupled from the network rank: a global index
only fixes *where* a role lives (which node, which local GPU), and the layout
is tensor-parallel fastest, then pipeline, then data parallel.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

from .errors import ConfigError


@dataclass(frozen=True, order=True)
class Role:
    dp_index: int
    pp_index: int
    tp_index: int

    def __str__(self) -> str:
        return f"{self.dp_index}-{self.pp_index}-{self.tp_index}"

    @classmethod
    def parse(cls, text: str) -> "Role":
        dp, pp, tp = (int(x) for x in text.split("-"))
        return cls(dp, pp, tp)


@dataclass(frozen=True, order=True)
class WorkerId:
    node_id: int
    local_rank: int


@dataclass(frozen=True)
class TID:
    """Transfer identifier: names every data or state transfer."""

    role: Role
    iteration: int

    # total order is (iteration, role) so schedulers drain oldest iterations first
    def _key(self):
        return (self.iteration, self.role)

    def __lt__(self, other: "TID") -> bool:
        return self._key() < other._key()

    def __le__(self, other: "TID") -> bool:
        return self._key() <= other._key()

    def __gt__(self, other: "TID") -> bool:
        return self._key() > other._key()

    def __ge__(self, other: "TID") -> bool:
        return self._key() >= other._key()


@dataclass(frozen=True)
class ClusterSpec:
    """Cluster shape plus every quantity the cost models need.

    Units: bandwidths in bytes/s, ``gpu_flops`` in FLOP/s, MTBF and checkpoint
    interval in hours.
    """

    num_nodes: int = 1
    gpus_per_node: int = 8
    d: int = 2
    p: int = 2
    t: int = 2
    gpu_mtbf_hours: float = 80_000.0  # T_b
    nic_bandwidth: float = 25e9  # V
    disk_bandwidth: float = 2.5e9  # I
    gpu_flops: float = 82.6e12  # C
    seq_len: int = 2048  # s
    batch_size: int = 256  # b
    params_per_device: float = 1e9  # phi
    ckpt_interval_hours: float = 0.5  # T_i, baseline modes only
    preload_depth: int = 10  # k
    distributed_optimizer: bool = False

    @property
    def world_size(self) -> int:
        return self.d * self.p * self.t

    def replace(self, **changes) -> "ClusterSpec":
        return dataclasses.replace(self, **changes)

    def roles(self) -> Iterator[Role]:
        for g in range(self.world_size):
            yield role_of(g, self)

    def check(self) -> "ClusterSpec":
        problems = validate_spec(self)
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class OptimizerVersion:
    iteration: int
    blob: bytes


@dataclass
class StateBundle:
    """Synthetic training state of one worker after ``iteration`` updates."""

    role: Role
    iteration: int
    weights: bytes
    optimizer_current: OptimizerVersion
    optimizer_previous: OptimizerVersion | None = None
    weights_previous: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.optimizer_current.iteration != self.iteration:
            raise ConfigError("optimizer_current must match the bundle iteration")
        prev = self.optimizer_previous
        if prev is not None and prev.iteration != self.iteration - 1:
            raise ConfigError("optimizer_previous must be exactly one iteration older")


def role_of(global_index: int, spec: ClusterSpec) -> Role:
    n = spec.d * spec.p * spec.t
    if not 0 <= global_index < n:
        raise IndexError(f"global index {global_index} outside [0, {n})")
    tp = global_index % spec.t
    pp = (global_index // spec.t) % spec.p
    dp = global_index // (spec.t * spec.p)
    return Role(dp, pp, tp)


def index_of(role: Role, spec: ClusterSpec) -> int:
    if not (0 <= role.dp_index < spec.d and 0 <= role.pp_index < spec.p
            and 0 <= role.tp_index < spec.t):
        raise IndexError(f"role {role} outside degrees ({spec.d},{spec.p},{spec.t})")
    return (role.dp_index * spec.p + role.pp_index) * spec.t + role.tp_index


def worker_of(role: Role, spec: ClusterSpec) -> WorkerId:
    g = index_of(role, spec)
    return WorkerId(g // spec.gpus_per_node, g % spec.gpus_per_node)


def node_of(role: Role, spec: ClusterSpec) -> int:
    return index_of(role, spec) // spec.gpus_per_node


def roles_on_node(node_id: int, spec: ClusterSpec) -> list[Role]:
    lo = node_id * spec.gpus_per_node
    hi = min(lo + spec.gpus_per_node, spec.world_size)
    return [role_of(g, spec) for g in range(lo, hi)]


def dp_neighbor(role: Role, spec: ClusterSpec) -> Role:
    """Next member of the data-parallel ring (ascending dp index, wrapping)."""
    return Role((role.dp_index + 1) % spec.d, role.pp_index, role.tp_index)


def dp_predecessor(role: Role, spec: ClusterSpec) -> Role:
    return Role((role.dp_index - 1) % spec.d, role.pp_index, role.tp_index)


def validate_spec(spec: ClusterSpec) -> list[str]:
    """Return every violated invariant as a message; empty means valid."""
    problems = []
    for name in ("num_nodes", "gpus_per_node", "d", "p", "t", "preload_depth",
                 "seq_len", "batch_size"):
        value = getattr(spec, name)
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            problems.append(f"{name} must be a positive integer (got {value!r})")
    rates = ("gpu_mtbf_hours", "nic_bandwidth", "disk_bandwidth", "gpu_flops",
             "params_per_device", "ckpt_interval_hours")
    for name in rates:
        value = getattr(spec, name)
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            problems.append(f"rates strictly positive: {name}={value!r}")
    try:
        workers = spec.num_nodes * spec.gpus_per_node
        if spec.d * spec.p * spec.t != workers:
            problems.append(
                f"d*p*t != worker count ({spec.d}*{spec.p}*{spec.t} != {workers})")
    except TypeError:
        pass
    return problems
