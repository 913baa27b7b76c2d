"""Closed-form cost and reliability models.

Units: bandwidths in bytes/s, compute in FLOP/s and the resulting times in
seconds for the compute/checkpoint models; hours everywhere for MTBF, MTTR and
the reliability models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .domain import ClusterSpec

#: bytes of Adam state per parameter (fp32 master weights, momentum, variance)
ADAM_BYTES_PER_PARAM = 12
#: bytes per parameter in a complete checkpoint (weights plus Adam state)
FULL_CKPT_BYTES_PER_PARAM = 16
#: GPUs per host in the recovery-probability model
GPUS_PER_HOST = 8
#: recovery-probability sums stop once the remaining binomial mass is below this
TAIL_CUTOFF = 1e-15


def hours_to_seconds(hours: float) -> float:
    return hours * 3600.0


def seconds_to_hours(seconds: float) -> float:
    return seconds / 3600.0


def gbps_to_bytes_per_second(gbps: float) -> float:
    return gbps * 1e9 / 8.0


class ComputeTime(NamedTuple):
    forward: float
    backward: float
    total: float


def compute_time(spec: ClusterSpec) -> ComputeTime:
    """Forward (2sbφ/C), backward (4sbφ/C) and total per-iteration compute time."""
    work = spec.seq_len * spec.batch_size * spec.params_per_device / spec.gpu_flops
    forward = 2.0 * work
    backward = 4.0 * work
    return ComputeTime(forward, backward, forward + backward)


def ckpt_time_full(params: float, nic_bandwidth: float, disk_bandwidth: float) -> float:
    """Time to ship a complete checkpoint over the NIC and persist it to disk."""
    if nic_bandwidth <= 0 or disk_bandwidth <= 0:
        raise ValueError("bandwidths must be positive")
    return FULL_CKPT_BYTES_PER_PARAM * params * (1.0 / nic_bandwidth + 1.0 / disk_bandwidth)


def ckpt_time_razor(params: float, nic_bandwidth: float) -> float:
    """Time to ship only optimizer state to a neighbour's memory (12φ/V).

    Note this carries no 1/d factor even though the sharded unique state does;
    see :func:`unique_state_bytes`.
    """
    if nic_bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return ADAM_BYTES_PER_PARAM * params / nic_bandwidth


def fcr(spec: ClusterSpec) -> float:
    """Free checkpointing ratio sbV/(2C); >= 1 means the backup hides in compute."""
    return spec.seq_len * spec.batch_size * spec.nic_bandwidth / (2.0 * spec.gpu_flops)


@dataclass(frozen=True)
class MfuLossBreakdown:
    l_ckpt: float
    l_recover: float
    l_rollback: float

    @property
    def total(self) -> float:
        return self.l_ckpt + self.l_recover + self.l_rollback


def mfu_loss(ckpt_time: float, ckpt_interval: float, mttr: float, mtbf: float) -> MfuLossBreakdown:
    """Relative MFU loss from checkpoint stalls, recovery downtime and rollback.

    All arguments share one time unit (hours by convention).
    """
    if mtbf <= 0 or ckpt_interval <= 0:
        raise ValueError("mtbf and ckpt_interval must be positive")
    return MfuLossBreakdown(
        l_ckpt=ckpt_time / (ckpt_interval + ckpt_time),
        l_recover=mttr / (mtbf + mttr),
        l_rollback=(ckpt_interval / 2.0) / (mtbf + mttr),
    )


def cluster_failure_probability(gpus: float, hours: float, gpu_mtbf: float) -> float:
    """Probability that a cluster of ``gpus`` sees at least one failure within ``hours``."""
    return -math.expm1(-gpus * hours / gpu_mtbf)


def _binom(n: int, r: int) -> int:
    if n < 0 or r < 0 or r > n:
        return 0
    return math.comb(n, r)


def recovery_prob_pr(n_hosts: int, k: int) -> Fraction:
    """Exact probability that ``k`` simultaneous host failures on an N-ring are
    recoverable from neighbour memory, i.e. no two failed hosts are adjacent.
    """
    if n_hosts < 1:
        raise ValueError("need at least one host")
    if not 0 <= k <= n_hosts:
        raise IndexError(f"k={k} outside [0, {n_hosts}]")
    if k <= 1:
        return Fraction(1)
    good = _binom(n_hosts - k, k) + _binom(n_hosts - k - 1, k - 1)
    return Fraction(good, math.comb(n_hosts, k))


def host_failure_probability(hours: float, gpu_mtbf: float) -> float:
    """Probability that an 8-GPU host fails within ``hours``: 1 - exp(-8H/T_b)."""
    return -math.expm1(-GPUS_PER_HOST * hours / gpu_mtbf)


def _log_pf(n_hosts: int, k: int, log_p: float, log_q: float) -> float:
    # exact big-integer binomial; math.log is accurate on arbitrarily large ints
    return math.log(math.comb(n_hosts, k)) + k * log_p + (n_hosts - k) * log_q


def failure_prob_pf(n_hosts: int, k: int, hours: float, gpu_mtbf: float) -> float:
    """Binomial probability that exactly ``k`` of ``n_hosts`` hosts fail within ``hours``."""
    if not 0 <= k <= n_hosts:
        raise IndexError(f"k={k} outside [0, {n_hosts}]")
    mu_h = GPUS_PER_HOST * hours / gpu_mtbf
    if mu_h == 0:
        return 1.0 if k == 0 else 0.0
    log_p = math.log(-math.expm1(-mu_h))
    return math.exp(_log_pf(n_hosts, k, log_p, -mu_h))


@dataclass
class ReliabilityResult:
    p_recover: float
    per_k_terms: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def pf_mass(self) -> float:
        return math.fsum(pf for _, _, pf in self.per_k_terms)


def overall_recovery_prob(n_hosts: int, hours: float, gpu_mtbf: float) -> ReliabilityResult:
    """Sum over k of P_r(N, k) * P_f(N, k, H).

    Terms are dropped once a geometric bound on the remaining P_f tail falls
    below :data:`TAIL_CUTOFF`, so large N with a small failure rate costs only a
    few dozen terms.
    """
    mu_h = GPUS_PER_HOST * hours / gpu_mtbf
    if mu_h == 0:
        return ReliabilityResult(1.0, [(0, 1.0, 1.0)])
    p = -math.expm1(-mu_h)
    log_p, log_q = math.log(p), -mu_h
    odds = p / math.exp(log_q)
    terms = []
    for k in range(n_hosts + 1):
        pf = math.exp(_log_pf(n_hosts, k, log_p, log_q))
        pr = float(recovery_prob_pr(n_hosts, k))
        terms.append((k, pr, pf))
        if k + 1 > n_hosts * p:
            ratio = (n_hosts - k) / (k + 1) * odds
            if ratio < 1 and pf * ratio / (1 - ratio) < TAIL_CUTOFF:
                break
    total = math.fsum(pr * pf for _, pr, pf in terms)
    return ReliabilityResult(min(1.0, max(0.0, total)), terms)


def monte_carlo_recovery(
    n_hosts: int,
    hours: float,
    gpu_mtbf: float,
    trials: int,
    seed: int,
    *,
    p_override: float | None = None,
    batch: int = 4096,
) -> tuple[float, float]:
    """Estimate the recovery probability by sampling per-host failures directly.

    Each trial draws an independent Bernoulli failure per host on an N-ring; a
    trial is recoverable when at most one host failed or no two failed hosts
    are adjacent.  Returns ``(estimate, standard_error)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p = host_failure_probability(hours, gpu_mtbf) if p_override is None else p_override
    rng = np.random.default_rng(seed)
    good = 0
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        failed = rng.random((m, n_hosts)) < p
        adjacent = (failed & np.roll(failed, 1, axis=1)).any(axis=1)
        few = failed.sum(axis=1) <= 1
        good += int(np.count_nonzero(few | ~adjacent))
        done += m
    est = good / trials
    return est, math.sqrt(max(est * (1 - est), 0.0) / trials)


def preload_buffer_size(spec: ClusterSpec) -> float:
    """Bytes of preload buffer: min(4sbk, 6sbφV/C)."""
    sb = spec.seq_len * spec.batch_size
    k_iterations = 4.0 * sb * spec.preload_depth
    one_compute_window = 6.0 * sb * spec.params_per_device * spec.nic_bandwidth / spec.gpu_flops
    return min(k_iterations, one_compute_window)


def unique_state_bytes(spec: ClusterSpec) -> float:
    """Adam state held uniquely by one device when sharded over d ranks: 12φ/d."""
    return ADAM_BYTES_PER_PARAM * spec.params_per_device / spec.d
