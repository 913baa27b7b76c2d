"""Command line front end.

    failover run <scenario> [--seed N] [--out DIR] [--iterations N]
    failover analyze <formula> [--param value ...]
    failover validate [--trials N]
    failover sweep fcr [--s ...] [--b ...] [--V ...] [--C ...] [--out FILE]
    failover report <metrics dir or summary.json>
    failover stress [--senders N ...]

Exit codes: 0 success, 2 usage error, 3 unrecoverable scenario.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

from .. import analytics
from ..domain import ClusterSpec
from ..errors import ConfigError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNRECOVERABLE = 3


class UsageError(Exception):
    pass


def _spec(a) -> ClusterSpec:
    fields = {"s": "seq_len", "b": "batch_size", "V": "nic_bandwidth", "C": "gpu_flops",
              "phi": "params_per_device", "d": "d", "p": "p", "t": "t", "k": "preload_depth",
              "I": "disk_bandwidth"}
    changes = {}
    for short, name in fields.items():
        v = getattr(a, short, None)
        if v is not None:
            changes[name] = int(v) if name in ("seq_len", "batch_size", "d", "p", "t",
                                                "preload_depth") else v
    return ClusterSpec(**changes)


# analyze -----------------------------------------------------------------

def _fmt(x, as_json: bool):
    if isinstance(x, Fraction):
        return {"value": float(x), "exact": str(x)} if as_json else float(x)
    if isinstance(x, tuple) and hasattr(x, "_asdict"):
        return x._asdict()
    if isinstance(x, analytics.MfuLossBreakdown):
        return {"l_ckpt": x.l_ckpt, "l_recover": x.l_recover, "l_rollback": x.l_rollback,
                "total": x.total}
    return x


FORMULAS = {
    "fcr": (("s", "b", "V", "C"), lambda a: analytics.fcr(_spec(a))),
    "compute_time": (("s", "b", "phi", "C"), lambda a: analytics.compute_time(_spec(a))),
    "ckpt_full": (("phi", "V", "I"),
                  lambda a: analytics.ckpt_time_full(a.phi, a.V, a.I)),
    "ckpt_razor": (("phi", "V"), lambda a: analytics.ckpt_time_razor(a.phi, a.V)),
    "mfu_loss": (("T_ckpt", "T_i", "mttr", "mtbf"),
                 lambda a: analytics.mfu_loss(a.T_ckpt, a.T_i, a.mttr, a.mtbf)),
    "cluster_pf": (("gpus", "H", "T_b"),
                   lambda a: analytics.cluster_failure_probability(a.gpus, a.H, a.T_b)),
    "pr": (("N", "k"), lambda a: analytics.recovery_prob_pr(int(a.N), int(a.k))),
    "host_pf": (("H", "T_b"), lambda a: analytics.host_failure_probability(a.H, a.T_b)),
    "pf": (("N", "k", "H", "T_b"),
           lambda a: analytics.failure_prob_pf(int(a.N), int(a.k), a.H, a.T_b)),
    "recovery": (("N", "H", "T_b"),
                 lambda a: analytics.overall_recovery_prob(int(a.N), a.H, a.T_b).p_recover),
    "monte_carlo": (("N", "H", "T_b", "trials", "seed"),
                    lambda a: dict(zip(("estimate", "stderr"), analytics.monte_carlo_recovery(
                        int(a.N), a.H, a.T_b, int(a.trials), int(a.seed))))),
    "preload_buffer": (("s", "b", "k", "phi", "V", "C"),
                       lambda a: analytics.preload_buffer_size(_spec(a))),
    "unique_state": (("phi", "d"), lambda a: analytics.unique_state_bytes(_spec(a))),
}
DEFAULTS = {"s": 2048, "b": 256, "V": 25e9, "C": 82.6e12, "phi": 1e9, "I": 2.5e9, "k": 10,
            "d": 2, "T_b": 80_000.0, "trials": 100_000, "seed": 0, "T_ckpt": 0.0}


def cmd_analyze(a) -> int:
    needs, fn = FORMULAS[a.formula]
    for name in needs:
        if getattr(a, name) is None:
            if name not in DEFAULTS:
                raise UsageError(f"analyze {a.formula} needs --{name}")
            setattr(a, name, DEFAULTS[name])
    value = _fmt(fn(a), a.json)
    if a.json or not isinstance(value, (int, float)):
        print(json.dumps({"formula": a.formula, "result": value}, sort_keys=True))
    else:
        print(f"{value:.{a.digits}g}" if a.digits else value)
    return EXIT_OK


# validate ----------------------------------------------------------------

def _brute_pr(n: int, k: int) -> Fraction:
    good = total = 0
    for combo in itertools.combinations(range(n), k):
        total += 1
        dead = set(combo)
        if k <= 1 or not any((h + 1) % n in dead for h in dead):
            good += 1
    return Fraction(good, total)


def cmd_validate(a) -> int:
    ok = True
    bad = [(n, k) for n in range(1, a.max_n + 1) for k in range(n + 1)
           if analytics.recovery_prob_pr(n, k) != _brute_pr(n, k)]
    print(f"closed form vs ring enumeration (N<={a.max_n}): "
          f"{'PASS' if not bad else 'FAIL ' + str(bad[:5])}")
    ok &= not bad
    for n, h, tb in ((100, 3, 80_000.0), (800, 12, 80_000.0)):
        exact = analytics.overall_recovery_prob(n, h, tb).p_recover
        est, se = analytics.monte_carlo_recovery(n, h, tb, a.trials, a.seed)
        z = abs(exact - est) / se if se > 0 else 0.0
        good = z <= 3
        ok &= good
        print(f"analytic vs Monte Carlo N={n} H={h}: {exact:.6f} vs {est:.6f} "
              f"+/- {se:.2e} (z={z:.2f}) {'PASS' if good else 'FAIL'}")
    return EXIT_OK if ok else 1


# sweep -------------------------------------------------------------------

def cmd_sweep(a) -> int:
    if a.what != "fcr":
        raise UsageError(f"unknown sweep {a.what!r}; only 'fcr' is available")
    out = open(a.out, "w") if a.out else sys.stdout
    try:
        for s, b, v, c in itertools.product(a.s, a.b, a.V, a.C):
            spec = ClusterSpec(seq_len=int(s), batch_size=int(b), nic_bandwidth=v, gpu_flops=c)
            r = analytics.fcr(spec)
            out.write(json.dumps({"s": int(s), "b": int(b), "V": v, "C": c, "fcr": r,
                                  "free": r >= 1.0}, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# run / report ------------------------------------------------------------

def cmd_run(a) -> int:
    from .runtime import run_scenario
    from .scenario import load_scenario
    sc = load_scenario(a.scenario)
    run = {}
    if a.seed is not None:
        run["seed"] = a.seed
    if a.iterations is not None:
        run["iterations"] = a.iterations
    if run:
        sc = sc.replace(run=run)
    if sc.stress is not None:
        return _run_stress(sc, a.out)
    t0 = time.perf_counter()
    metrics = run_scenario(sc)
    out = Path(a.out) if a.out else Path("runs") / f"{sc.run.name}-seed{sc.run.seed}"
    records, summary = metrics.write(out)
    print(f"{sc.run.name}: {metrics.outcome} after {metrics.iterations} iterations, "
          f"{metrics.makespan:.3f} s simulated ({time.perf_counter() - t0:.2f} s wall)")
    print(f"metrics: {records}\nsummary: {summary}")
    for line in metrics.diagnostics:
        print("diagnostic:", line)
    return EXIT_OK if metrics.ok else EXIT_UNRECOVERABLE


def _run_stress(sc, out_dir) -> int:
    from .metrics import SCHEMA_VERSION
    from .stress import stress
    results = [stress(n, sc.stress.rounds, interval=sc.mode.heartbeat_interval,
                      threshold=sc.mode.threshold, silent=sc.stress.silent, seed=sc.run.seed)
               for n in sc.stress.senders]
    for r in results:
        print(f"{r.senders:>7} senders: median {r.median * 1e3:.3f} ms, "
              f"max {r.worst * 1e3:.3f} ms per batch, {r.detected} detected")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stress.json").write_text(json.dumps(
            {"scenario": sc.run.name, "schema": SCHEMA_VERSION,
             "results": [r.to_dict() for r in results]},
            sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def report_lines(doc: dict) -> list[str]:
    from .metrics import RECOVERY_ROWS
    lines = [f"scenario {doc['scenario']}  mode {doc['mode']}  seed {doc['seed']}  "
             f"outcome {doc['outcome']}",
             f"iterations {doc['iterations']}  makespan {doc['makespan']:.4f} s  "
             f"median iteration {doc['iteration_time_median']:.6f} s  "
             f"MFU proxy {doc['mfu_proxy']:.3f}  time scale {doc['time_scale']}",
             f"restores bit-identical {doc['restores_matched']}/{doc['restores_total']}  "
             f"final state matches oracle: {doc['final_match']}"]
    for rec in doc["recoveries"]:
        lines.append("")
        lines.append(f"recovery epoch {rec['epoch']} ({rec['mode']}) nodes {rec['failed_nodes']}"
                     f"  resume {rec['resume_iteration']}  rollback {rec['rollback']}")
        for row in RECOVERY_ROWS:
            lines.append(f"  {row:<24}{rec[row]:>12.4f} s")
        lines.append(f"  {'total (overlapped)':<24}{rec['total']:>12.4f} s")
        lines.append(f"  {'sum of steps':<24}{rec['serial_sum']:>12.4f} s")
        if rec.get("reason"):
            lines.append(f"  reason: {rec['reason']}")
    return lines


def cmd_report(a) -> int:
    from .metrics import load_summary
    try:
        doc = load_summary(a.metrics)
    except FileNotFoundError:
        raise UsageError(f"no metrics at {a.metrics}") from None
    print("\n".join(report_lines(doc)))
    return EXIT_OK


def cmd_stress(a) -> int:
    from .stress import stress
    for n in a.senders:
        r = stress(n, a.rounds)
        print(json.dumps(r.to_dict(), sort_keys=True))
    return EXIT_OK


# parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="failover", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario on the simulated backend")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--iterations", type=int)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    an = sub.add_parser("analyze", help="evaluate a closed-form model")
    an.add_argument("formula", choices=sorted(FORMULAS))
    names = sorted({n for needs, _ in FORMULAS.values() for n in needs})
    for name in names:
        an.add_argument(f"--{name}", type=float)
    an.add_argument("--json", action="store_true")
    an.add_argument("--digits", type=int, default=3, help="significant digits (0: raw)")
    an.set_defaults(fn=cmd_analyze)

    v = sub.add_parser("validate", help="closed forms against enumeration and Monte Carlo")
    v.add_argument("--trials", type=int, default=1_000_000)
    v.add_argument("--seed", type=int, default=12345)
    v.add_argument("--max-n", type=int, default=20)
    v.set_defaults(fn=cmd_validate)

    s = sub.add_parser("sweep", help="parameter grid, one JSON record per point")
    s.add_argument("what")
    s.add_argument("--s", type=float, nargs="+", default=[512, 1024, 2048, 4096])
    s.add_argument("--b", type=float, nargs="+", default=[32, 64, 128, 256])
    s.add_argument("--V", type=float, nargs="+", default=[12.5e9, 25e9, 50e9])
    s.add_argument("--C", type=float, nargs="+", default=[82.6e12, 312e12, 989e12])
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    rp = sub.add_parser("report", help="print the summary of a finished run")
    rp.add_argument("metrics")
    rp.set_defaults(fn=cmd_report)

    st = sub.add_parser("stress", help="controller heartbeat stress")
    st.add_argument("--senders", type=int, nargs="+", default=[1024, 8192, 32768])
    st.add_argument("--rounds", type=int, default=5)
    st.set_defaults(fn=cmd_stress)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, ConfigError, FileNotFoundError, ValueError, IndexError) as exc:
        print(f"failover: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
