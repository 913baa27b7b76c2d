"""Walk through the bundled scenarios and compare recovery breakdowns.

    python3 demos/recovery_walkthrough.py

Runs each scenario in scenarios/ on the simulated cluster (a few seconds
each) and prints one recovery breakdown per run, side by side.
"""

from pathlib import Path

from failover.harness import load_scenario, run_scenario
from failover.harness.metrics import RECOVERY_ROWS

HERE = Path(__file__).resolve().parent.parent / "scenarios"
NAMES = ["single_node_crash", "adjacent_pair_crash", "software_failure", "healthy_restart",
         "legacy_baseline"]


def main():
    runs = {}
    for name in NAMES:
        m = run_scenario(load_scenario(HERE / f"{name}.toml"))
        runs[name] = m
        rec = m.recoveries[0] if m.recoveries else None
        how = f"{rec.mode}, resume {rec.resume_iteration}, rollback {rec.rollback}" if rec else "-"
        print(f"{name:22s} {m.outcome:10s} {how:32s} restores ok "
              f"{sum(c['match'] for c in m.restore_checks)}/{len(m.restore_checks)}")

    print()
    width = 14
    print(f"{'seconds':24s}" + "".join(f"{n[:width - 1]:>{width}s}" for n in NAMES))
    for row in RECOVERY_ROWS + ("total", "serial_sum"):
        cells = []
        for name in NAMES:
            rec = runs[name].recoveries[0]
            cells.append(f"{getattr(rec, row):>{width}.3f}")
        print(f"{row:24s}" + "".join(cells))

    ff = runs["single_node_crash"].recoveries[0]
    legacy = runs["legacy_baseline"].recoveries[0]
    print(f"\nrecovery is {legacy.total / ff.total:.0f}x faster than the legacy stack; "
          f"overlapping init saves {ff.serial_sum - ff.total:.3f} s")


if __name__ == "__main__":
    main()
