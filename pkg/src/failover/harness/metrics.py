"""Run metrics: collection from a finished runtime, JSONL records and a summary.

Both outputs carry ``schema``; the layout is documented in
``docs/metrics_schema.md``.  Floats are rounded to 9 decimals and keys are
sorted so that a fixed seed gives byte-identical files.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..transport import Priority

SCHEMA_VERSION = 1
RECOVERY_ROWS = ("detection", "pod_creation", "dependency_install", "network_init",
                 "state_recovery_loading")


@dataclass
class RecoveryMetrics:
    epoch: int
    mode: str  # "neighbor" or "fallback"
    failed_nodes: list[int]
    failed_at: float | None
    global_iteration: int
    resume_iteration: int
    rollback: int
    detection: float
    pod_creation: float
    dependency_install: float
    network_init: float
    state_recovery_loading: float
    lazy_backup: float
    total: float
    serial_sum: float
    reason: str = ""


@dataclass
class RunMetrics:
    scenario: str
    mode: str
    seed: int
    time_scale: float
    outcome: str  # "completed", "unrecoverable" or "timeout"
    iterations: int
    makespan: float
    iteration_times: list[float]
    ckpt_overhead: list[float]
    compute_time: list[float]
    stall_time: float
    mfu_proxy: float
    recoveries: list[RecoveryMetrics]
    restore_checks: list[dict]
    final_match: bool
    dp_replicas_identical: bool
    backup_bytes_per_iteration: float
    links: dict[str, dict]
    controller: dict
    events: list[dict]
    diagnostics: list[str] = field(default_factory=list)
    schema: int = SCHEMA_VERSION

    @property
    def ok(self) -> bool:
        return self.outcome == "completed"

    @property
    def steady_iteration_time(self) -> float:
        return statistics.median(self.iteration_times) if self.iteration_times else 0.0

    def to_dict(self) -> dict:
        return _round(asdict(self))

    def records(self):
        """Line-delimited records: one per iteration, recovery and restore check."""
        base = {"schema": SCHEMA_VERSION, "scenario": self.scenario}
        for i, (t, o, c) in enumerate(zip(self.iteration_times, self.ckpt_overhead,
                                          self.compute_time)):
            yield dict(base, record="iteration", iteration=i, duration=t, ckpt_overhead=o,
                       compute=c)
        for r in self.recoveries:
            yield dict(base, record="recovery", **asdict(r))
        for c in self.restore_checks:
            yield dict(base, record="restore", **c)
        for e in self.events:
            yield dict(base, record="event", **e)

    def summary(self) -> dict:
        d = self.to_dict()
        d.pop("restore_checks")
        d["iteration_time_median"] = _round(self.steady_iteration_time)
        d["restores_matched"] = sum(c["match"] for c in self.restore_checks)
        d["restores_total"] = len(self.restore_checks)
        return d

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        records = out / "metrics.jsonl"
        summary = out / "summary.json"
        with open(records, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(_round(rec), sort_keys=True) + "\n")
        summary.write_text(json.dumps(self.summary(), sort_keys=True, indent=2) + "\n")
        return records, summary


def _round(x):
    if isinstance(x, float):
        return round(x, 9)
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    return x


def load_summary(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    doc = json.loads(path.read_text())
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{path}: schema {doc.get('schema')}, expected {SCHEMA_VERSION}")
    return doc


def _recovery(rt, rec) -> RecoveryMetrics:
    plan = rec.plan
    tl = rt.timeline[plan.epoch]
    mode = rt.scenario.mode
    failed_at = rec.failed_at if rec.failed_at is not None else rec.detected_at
    detection = rec.detected_at - failed_at
    provisioned = rec.provisioned_at if rec.provisioned_at is not None else rec.detected_at
    pod_up = tl.get("pod_up", rec.detected_at)
    registered = tl.get("registered", pod_up)
    ready = tl.get("ready", provisioned)
    loaded = max(tl["loaded"].values(), default=provisioned)
    pod_creation = max(0.0, min(pod_up, provisioned) - rec.detected_at)
    dependency_install = max(0.0, min(registered, provisioned) - pod_up)
    network_init = max(0.0, ready - provisioned)
    if mode.init == "serial":
        loading = max(0.0, loaded - ready)
    else:
        loading = max(0.0, loaded - provisioned)
    backup = (rec.backups_done_at - rec.detected_at) if rec.backups_done_at is not None else 0.0
    end = tl.get("resumed", max(ready, loaded))
    parts = (detection, pod_creation, dependency_install, network_init, loading)
    return RecoveryMetrics(
        epoch=plan.epoch, mode=plan.mode, failed_nodes=list(plan.failed_nodes),
        failed_at=rec.failed_at, global_iteration=plan.global_iteration,
        resume_iteration=plan.resume_iteration,
        rollback=max(0, _progress_before(rt, plan.epoch) - plan.resume_iteration),
        detection=detection, pod_creation=pod_creation, dependency_install=dependency_install,
        network_init=network_init, state_recovery_loading=loading, lazy_backup=backup,
        total=max(0.0, end - failed_at), serial_sum=sum(parts), reason=plan.reason)


def _progress_before(rt, epoch: int) -> int:
    """Latest state every worker had produced before ``epoch`` opened."""
    done = [it + 1 for (e, it), c in rt.iter_count.items()
            if e < epoch and c == rt.spec.world_size]
    return max(done, default=0)


def collect(rt, outcome: str) -> RunMetrics:
    sc = rt.scenario
    spec = rt.spec
    n = sc.run.iterations
    # the last epoch to finish an iteration is the one whose result the job kept
    last: dict[int, tuple] = {}
    for (epoch, it), count in sorted(rt.iter_count.items()):
        if count == spec.world_size:
            last[it] = (epoch, it)
    times, overhead, compute = [], [], []
    prev_end = 0.0
    for it in range(n):
        key = last.get(it)
        if key is None:
            break
        end = rt.iter_end[key]
        times.append(end - prev_end)
        overhead.append(rt.iter_overhead.get(key, 0.0))
        compute.append(rt.iter_compute.get(key, 0.0))
        prev_end = end
    makespan = rt.env.now if outcome != "completed" else prev_end
    useful = n * rt.sizes.compute if outcome == "completed" else len(times) * rt.sizes.compute
    final_match = bool(rt.final_states) and all(
        _same(st, rt.oracle.state(role, st.iteration)) for role, st in rt.final_states.items())
    identical = _replicas_identical(rt)
    links = {}
    for node in sorted(rt.net.nics):
        st = rt.net.stats(node)
        links[node] = {"busy": st.busy_time, "utilization": st.utilization,
                       **{f"bytes_{p.name.lower()}": st.bytes_by_priority.get(p, 0)
                          for p in Priority}}
    svc = rt.service
    controller = {"epochs": rt.core.epoch, "max_message_bytes": svc.max_message_bytes,
                  "messages": dict(sorted(svc.messages_in.items())),
                  "fallback_iteration": rt.core.fallback_iteration}
    diagnostics = list(rt.notes)
    if svc.unrecoverable:
        diagnostics.append("unrecoverable: " + svc.unrecoverable)
    backed = [v / spec.world_size for _, v in sorted(rt.backup_bytes.items())]
    return RunMetrics(
        scenario=sc.run.name, mode=sc.mode.mode, seed=sc.run.seed, time_scale=sc.run.time_scale,
        outcome=outcome, iterations=len(times), makespan=makespan, iteration_times=times,
        ckpt_overhead=overhead, compute_time=compute,
        stall_time=sum(p.stall_time for na in rt.agents for p in na.preloaders.values()),
        mfu_proxy=useful / makespan if makespan > 0 else 0.0,
        recoveries=[_recovery(rt, r) for r in svc.recoveries],
        restore_checks=list(rt.restore_checks), final_match=final_match,
        dp_replicas_identical=identical,
        backup_bytes_per_iteration=statistics.median(backed) if backed else 0.0,
        links=links, controller=controller, events=list(rt.crashes), diagnostics=diagnostics)


def _same(a, b) -> bool:
    from .evolution import same_state
    return same_state(a, b)


def _replicas_identical(rt) -> bool:
    """Weights agree across DP replicas at the end of the run."""
    groups: dict[tuple, set] = {}
    for role, st in rt.final_states.items():
        groups.setdefault((role.pp_index, role.tp_index), set()).add(st.weights)
    return all(len(w) == 1 for w in groups.values())
