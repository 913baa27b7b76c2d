"""Reliability numbers from the closed-form models.

    python3 demos/reliability_tables.py

Prints the chance that a cluster sees a failure within a few hours, the MFU
lost to recovery and rollback, and how often neighbour memory alone suffices
to recover.
"""

from failover import analytics as A

GPU_MTBF = 80_000.0  # hours


def main():
    print("P(at least one failure) by cluster size and window")
    print(f"{'GPUs':>8s}" + "".join(f"{h:>8d}h" for h in (3, 6, 9, 12)))
    for gpus in (1024, 16384, 65536):
        print(f"{gpus:>8d}" + "".join(f"{A.cluster_failure_probability(gpus, h, GPU_MTBF):9.3f}"
                                      for h in (3, 6, 9, 12)))

    print("\nMFU loss with a 30 min checkpoint interval, free checkpoints, MTTR 0.37 h")
    for mtbf in (3, 6, 9, 12):
        loss = A.mfu_loss(0.0, 0.5, 0.37, mtbf)
        print(f"  MTBF {mtbf:2d} h: recover {loss.l_recover:.3f} + rollback "
              f"{loss.l_rollback:.3f} = {loss.total:.3f}")

    print("\nP(no two adjacent hosts fail) for k simultaneous failures on a 100-host ring")
    print("  " + "  ".join(f"k={k}: {float(A.recovery_prob_pr(100, k)):.3f}" for k in (2, 4, 8)))

    print("\nOverall in-memory recovery probability")
    for hosts, hours in ((1000, 12), (10_000, 12), (10_000, 24)):
        r = A.overall_recovery_prob(hosts, hours, 100_000)
        print(f"  {hosts:>6d} hosts, {hours} h window: {r.p_recover:.5f} "
              f"({len(r.per_k_terms)} terms)")


if __name__ == "__main__":
    main()
