"""Scenario files: a TOML document with [run], [cluster], [mode], [links] and [[events]].

Keys under [cluster] are ClusterSpec fields, [mode] keys are ModeConfig
fields, [links] keys are LinkConfig fields and each [[events]] table is one
ScenarioEvent.  A [stress] section turns the file into a controller stress
run with synthetic heartbeat senders and no workers.  Unknown keys are
rejected so typos do not pass silently.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from ..domain import ClusterSpec
from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENARIO_DIR_ENV = "FAILOVER_SCENARIO_DIR"
MODES = ("fftrainer", "baseline_timeout", "baseline_sync_ckpt")
EVENT_KINDS = ("worker_crash", "node_crash", "node_pair_crash", "healthy_restart")


@dataclass(frozen=True)
class ModeConfig:
    """Recovery mechanisms in force.

    Each named mode swaps exactly one mechanism relative to ``fftrainer``:
    ``baseline_timeout`` detects failures by a liveness deadline of
    ``timeout`` seconds, ``baseline_sync_ckpt`` replaces in-memory
    checkpointing by blocking full checkpoints every ``ckpt_interval``
    iterations.  Any field may still be overridden, e.g. pod delays or
    ``init = "serial"`` for a legacy-stack comparison.
    """

    mode: str = "fftrainer"
    heartbeat_interval: float = 1.0
    miss_threshold: float | None = None  # None: 3 for heartbeats, timeout/interval otherwise
    timeout: float = 600.0
    pod_creation: float = 7.0
    dependency_install: float = 0.0
    init: str = "overlapped"  # or "serial": load state only after the network is up
    ckpt_interval: int = 10  # iterations between blocking checkpoints (sync mode)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, not {self.mode!r}")
        if self.init not in ("overlapped", "serial"):
            raise ConfigError(f"init must be 'overlapped' or 'serial', not {self.init!r}")
        if self.heartbeat_interval <= 0 or self.timeout <= 0 or self.ckpt_interval <= 0:
            raise ConfigError("intervals and timeout must be positive")

    @property
    def detection(self) -> str:
        return "timeout" if self.mode == "baseline_timeout" else "heartbeat"

    @property
    def checkpointing(self) -> str:
        return "sync" if self.mode == "baseline_sync_ckpt" else "neighbor"

    @property
    def threshold(self) -> float:
        if self.miss_threshold is not None:
            return self.miss_threshold
        if self.detection == "timeout":
            return self.timeout / self.heartbeat_interval
        return 3.0


@dataclass(frozen=True)
class LinkConfig:
    """Network and storage model.  ``None`` bandwidths default to the cluster's V and I."""

    bandwidth: float | None = None
    latency: float = 5e-6
    chunk_size: int = 1 << 20
    setup_delay: float = 0.05  # per cross-node connection
    storage_bandwidth: float | None = None
    data_bandwidth: float | None = None
    activation_bytes: float | None = None  # per pipeline message; default 4*s*b


@dataclass(frozen=True)
class ScenarioEvent:
    kind: str
    targets: tuple[int, ...]
    at_iteration: int | None = None
    at_time: float | None = None
    offset: float = 0.25  # fraction of one compute window after the trigger

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"event kind must be one of {EVENT_KINDS}, not {self.kind!r}")
        if (self.at_iteration is None) == (self.at_time is None):
            raise ConfigError("an event needs exactly one of at_iteration or at_time")
        if self.kind == "node_pair_crash" and len(self.targets) != 2:
            raise ConfigError("node_pair_crash takes two targets")
        if self.kind == "worker_crash" and len(self.targets) != 2:
            raise ConfigError("worker_crash targets are [node, local_rank]")


@dataclass(frozen=True)
class RunConfig:
    name: str = "scenario"
    iterations: int = 20
    seed: int = 0
    time_scale: float = 1e-3  # compute delays and modeled byte counts are multiplied by this
    fallback_interval: int = 500
    checkpointing: bool = True  # snapshot + neighbour backup; off for overhead baselines
    max_time: float = 20_000.0  # simulated-seconds guard


@dataclass(frozen=True)
class StressConfig:
    senders: tuple[int, ...] = (1024, 8192, 32768)
    rounds: int = 5
    silent: int = 1  # senders that go quiet after the first round

    def __post_init__(self):
        if not self.senders or min(self.senders) <= 0 or self.rounds <= 0:
            raise ConfigError("stress needs positive sender counts and rounds")


@dataclass(frozen=True)
class Scenario:
    run: RunConfig = field(default_factory=RunConfig)
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    mode: ModeConfig = field(default_factory=ModeConfig)
    links: LinkConfig = field(default_factory=LinkConfig)
    events: tuple[ScenarioEvent, ...] = ()
    stress: StressConfig | None = None

    def replace(self, **sections) -> "Scenario":
        """Copy with per-section overrides, e.g. ``replace(run={"seed": 3})``."""
        changes = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                changes[name] = dataclasses.replace(getattr(self, name), **value)
            else:
                changes[name] = value
        return dataclasses.replace(self, **changes)


def _build(cls, table: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    return cls(**table)


def scenario_from_dict(doc: dict) -> Scenario:
    sections = {"run", "cluster", "mode", "links", "events", "stress"}
    unknown = sorted(set(doc) - sections)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    try:
        cluster = _build(ClusterSpec, doc.get("cluster", {}), "cluster").check()
        events = []
        for ev in doc.get("events", []):
            ev = dict(ev)
            ev["targets"] = tuple(int(t) for t in ev.get("targets", ()))
            events.append(_build(ScenarioEvent, ev, "events"))
        sc = Scenario(_build(RunConfig, doc.get("run", {}), "run"), cluster,
                      _build(ModeConfig, doc.get("mode", {}), "mode"),
                      _build(LinkConfig, doc.get("links", {}), "links"), tuple(events))
        if "stress" in doc:
            st = dict(doc["stress"])
            if "senders" in st:
                st["senders"] = tuple(int(n) for n in st["senders"])
            sc = dataclasses.replace(sc, stress=_build(StressConfig, st, "stress"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    validate_scenario(sc)
    return sc


def validate_scenario(sc: Scenario) -> None:
    spec = sc.cluster
    if spec.num_nodes * spec.gpus_per_node != spec.world_size:
        raise ConfigError("num_nodes * gpus_per_node must equal d*p*t in a scenario")
    if spec.gpus_per_node % spec.t:
        raise ConfigError("tensor-parallel groups must not span nodes")
    for ev in sc.events:
        for n in ev.targets[:1] if ev.kind == "worker_crash" else ev.targets:
            if not 0 <= n < spec.num_nodes:
                raise ConfigError(f"event target node {n} outside the cluster")
        if ev.kind == "worker_crash" and not 0 <= ev.targets[1] < spec.gpus_per_node:
            raise ConfigError(f"local rank {ev.targets[1]} outside the node")
    if sc.run.iterations <= 0:
        raise ConfigError("iterations must be positive")


def resolve_path(path: str | os.PathLike) -> Path:
    """Find a scenario file as given, or inside $FAILOVER_SCENARIO_DIR."""
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(SCENARIO_DIR_ENV)
    if base:
        for cand in (Path(base) / p, Path(base) / f"{p}.toml"):
            if cand.exists():
                return cand
    raise ConfigError(f"scenario {path} not found (searched ./ and ${SCENARIO_DIR_ENV})")


def load_scenario(path: str | os.PathLike) -> Scenario:
    with open(resolve_path(path), "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)
