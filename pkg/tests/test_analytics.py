import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from failover import analytics as A
from failover.domain import ClusterSpec

from oracles import ring_enumeration, transfer_matrix_recovery


def reference_spec(**kw):
    base = dict(seq_len=2048, batch_size=256, params_per_device=1e9,
                nic_bandwidth=25e9, gpu_flops=82.6e12)
    base.update(kw)
    return ClusterSpec(**base)


class TestComputeAndCheckpointTimes:
    def test_unit_normalized(self):
        spec = ClusterSpec(seq_len=1, batch_size=1, params_per_device=1.0, gpu_flops=6.0)
        assert A.compute_time(spec).total == pytest.approx(1.0)

    def test_total_is_forward_plus_backward_and_linear_in_b(self):
        spec = reference_spec()
        ct = A.compute_time(spec)
        assert ct.total == ct.forward + ct.backward
        assert A.compute_time(spec.replace(batch_size=512)).total == pytest.approx(2 * ct.total)

    def test_large_scale_compute(self):
        # 6 * 2048 * 256 * 1e9 / 82.6e12
        assert A.compute_time(reference_spec()).total == pytest.approx(38.0839, abs=1e-3)

    def test_full_ckpt(self):
        assert A.ckpt_time_full(1e9, 25e9, 2.5e9) == pytest.approx(7.04)
        assert A.ckpt_time_full(1e9, 5e9, 5e9) == pytest.approx(32e9 / 5e9)
        assert A.ckpt_time_full(1e9, 25e9, 1e300) == pytest.approx(16e9 / 25e9)
        assert A.ckpt_time_full(3e8, 2e9, 7e9) == pytest.approx(A.ckpt_time_full(3e8, 7e9, 2e9))

    def test_razor_ckpt_and_reduction(self):
        assert A.ckpt_time_razor(1e9, 25e9) == pytest.approx(0.48)
        assert A.ckpt_time_razor(0, 25e9) == 0
        reduction = 1 - A.ckpt_time_razor(1e9, 25e9) / A.ckpt_time_full(1e9, 25e9, 2.5e9)
        assert reduction == pytest.approx(0.93182, abs=1e-4)
        assert reduction > 0.9


class TestFcr:
    def test_boundary(self):
        spec = ClusterSpec(seq_len=2, batch_size=1, nic_bandwidth=1.0, gpu_flops=1.0)
        assert A.fcr(spec) == pytest.approx(1.0)

    def test_reference_value(self):
        assert A.fcr(reference_spec()) == pytest.approx(79.341, abs=1e-3)

    def test_halving_bandwidth(self):
        spec = reference_spec()
        assert A.fcr(spec.replace(nic_bandwidth=12.5e9)) == pytest.approx(A.fcr(spec) / 2)

    @settings(max_examples=300, deadline=None)
    @given(
        s=st.integers(1, 1 << 15), b=st.integers(1, 4096),
        v=st.floats(1e6, 1e12), c=st.floats(1e9, 1e16), phi=st.floats(1e3, 1e11),
    )
    def test_fcr_equivalence(self, s, b, v, c, phi):
        spec = ClusterSpec(seq_len=s, batch_size=b, nic_bandwidth=v, gpu_flops=c,
                           params_per_device=phi)
        f = A.fcr(spec)
        tc = A.compute_time(spec).total
        tck = A.ckpt_time_razor(phi, v)
        if abs(f - 1) < 1e-9:
            return  # ties are decided by float rounding, not by the model
        assert (f >= 1) == (tc >= tck)


class TestMfuLoss:
    def test_no_ckpt_overhead(self):
        assert A.mfu_loss(0, 0.5, 0.4, 3).l_ckpt == 0

    def test_table_rows(self):
        assert A.mfu_loss(0, 0.5, 0.4, 3).total == pytest.approx(0.191, abs=5e-4)
        assert A.mfu_loss(0, 0.5, 0.35, 12).total == pytest.approx(0.049, abs=5e-4)

    def test_total_is_sum(self):
        r = A.mfu_loss(0.1, 0.5, 0.3, 4)
        assert r.total == r.l_ckpt + r.l_recover + r.l_rollback

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 5), st.floats(0.01, 5), st.floats(0, 5), st.floats(0.1, 100),
           st.floats(0.001, 1))
    def test_components_monotone(self, tck, ti, mttr, mtbf, bump):
        base = A.mfu_loss(tck, ti, mttr, mtbf)
        assert A.mfu_loss(tck + bump, ti, mttr, mtbf).l_ckpt >= base.l_ckpt
        assert A.mfu_loss(tck, ti, mttr + bump, mtbf).l_recover >= base.l_recover
        assert A.mfu_loss(tck, ti + bump, mttr, mtbf).l_rollback >= base.l_rollback


class TestClusterFailure:
    @pytest.mark.parametrize("gpus, hours, expected", [
        (16384, 3, 0.46), (65536, 3, 0.91),
    ])
    def test_table_values(self, gpus, hours, expected):
        assert A.cluster_failure_probability(gpus, hours, 80_000) == pytest.approx(expected, abs=0.005)

    def test_zero_hours(self):
        assert A.cluster_failure_probability(16384, 0, 80_000) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 100_000), st.floats(0.01, 100), st.integers(1, 1000))
    def test_monotone(self, x, h, dx):
        p = A.cluster_failure_probability(x, h, 80_000)
        assert A.cluster_failure_probability(x + dx, h, 80_000) >= p
        assert A.cluster_failure_probability(x, h * 1.5, 80_000) >= p


class TestRecoveryPr:
    def test_single_failure_always_recoverable(self):
        for n in (1, 2, 5, 1000):
            assert A.recovery_prob_pr(n, 1) == 1
            assert A.recovery_prob_pr(n, 0) == 1

    def test_small_rings(self):
        assert A.recovery_prob_pr(4, 2) == Fraction(1, 3)
        assert A.recovery_prob_pr(5, 2) == Fraction(1, 2)

    def test_matches_enumeration(self):
        for n in range(1, 15):
            expected = ring_enumeration(n)
            assert [A.recovery_prob_pr(n, k) for k in range(n + 1)] == expected

    def test_range_error(self):
        with pytest.raises(IndexError):
            A.recovery_prob_pr(3, 4)

    def test_large_n_is_exact(self):
        r = A.recovery_prob_pr(20_000, 50)
        assert 0 < r < 1
        assert isinstance(r, Fraction)


class TestFailurePf:
    def test_k0_closed_form(self):
        assert A.failure_prob_pf(50, 0, 3, 80_000) == pytest.approx(math.exp(-8 * 50 * 3 / 80_000))

    def test_large_scale_k1(self):
        p = 1 - math.exp(-3e-4)
        assert A.failure_prob_pf(800, 1, 3, 80_000) == pytest.approx(800 * p * (1 - p) ** 799)
        assert A.failure_prob_pf(800, 1, 3, 80_000) == pytest.approx(0.1888, abs=1e-4)

    @pytest.mark.parametrize("n, hours", [(1, 3), (17, 400), (800, 12), (5000, 12), (5000, 30000)])
    def test_normalized(self, n, hours):
        total = math.fsum(A.failure_prob_pf(n, k, hours, 80_000) for k in range(n + 1))
        assert total == pytest.approx(1.0, abs=1e-9)


class TestOverall:
    def test_single_host(self):
        for h in (1, 100, 1e6):
            assert A.overall_recovery_prob(1, h, 80_000).p_recover == pytest.approx(1.0)

    # frozen from the transfer-matrix oracle (mpmath, 40 digits)
    @pytest.mark.parametrize("n, h, tb, expected", [
        (100, 3, 80_000, 0.999991005436742),
        (800, 3, 80_000, 0.999928045759153),
        (800, 12, 80_000, 0.998851417346198),
        (10_000, 12, 100_000, 0.990843831238838),
    ])
    def test_frozen_values(self, n, h, tb, expected):
        assert A.overall_recovery_prob(n, h, tb).p_recover == pytest.approx(expected, abs=1e-11)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 3000), st.floats(0.1, 48), st.sampled_from([50_000, 80_000, 100_000]))
    def test_against_transfer_matrix(self, n, h, tb):
        assert A.overall_recovery_prob(n, h, tb).p_recover == pytest.approx(
            transfer_matrix_recovery(n, h, tb), abs=1e-10)

    def test_mass_and_terms(self):
        r = A.overall_recovery_prob(800, 12, 80_000)
        assert r.pf_mass == pytest.approx(1.0, abs=1e-9)
        for k, pr, pf in r.per_k_terms:
            assert 0 <= pr <= 1 and 0 <= pf <= 1
        assert len(r.per_k_terms) < 40

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 2000), st.floats(0.5, 24), st.integers(1, 500), st.floats(0.1, 24))
    def test_monotone_in_n_and_h(self, n, h, dn, dh):
        p = A.overall_recovery_prob(n, h, 80_000).p_recover
        assert A.overall_recovery_prob(n + dn, h, 80_000).p_recover <= p + 1e-12
        assert A.overall_recovery_prob(n, h + dh, 80_000).p_recover <= p + 1e-12


class TestMonteCarlo:
    def test_all_fail_limit(self):
        est, _ = A.monte_carlo_recovery(5, 1e9, 1.0, 2000, seed=1)
        assert est == 0.0

    def test_forced_half(self):
        # exhaustive: (1 + 4 + 6 * 1/3) / 16
        est, se = A.monte_carlo_recovery(4, 1, 1, 200_000, seed=3, p_override=0.5)
        assert abs(est - 0.4375) < 4 * se

    def test_deterministic(self):
        a = A.monte_carlo_recovery(50, 12, 80_000, 10_000, seed=9)
        b = A.monte_carlo_recovery(50, 12, 80_000, 10_000, seed=9)
        assert a == b

    def test_agrees_with_analytic(self):
        est, se = A.monte_carlo_recovery(30, 2000, 80_000, 100_000, seed=5)
        exact = A.overall_recovery_prob(30, 2000, 80_000).p_recover
        assert abs(est - exact) < 3 * se


class TestBuffers:
    def test_infinite_depth_limit(self):
        spec = reference_spec(preload_depth=10**12)
        expected = 6 * 2048 * 256 * 1e9 * 25e9 / 82.6e12
        assert A.preload_buffer_size(spec) == pytest.approx(expected)

    def test_first_term_dominates(self):
        spec = reference_spec(seq_len=1024, batch_size=8, preload_depth=10)
        assert A.preload_buffer_size(spec) == 327_680

    def test_llama70b_order_of_magnitude(self):
        spec = ClusterSpec(seq_len=8192, batch_size=128, params_per_device=70e9 / 64,
                           nic_bandwidth=25e9, gpu_flops=82.6e12)
        assert 10e6 < A.preload_buffer_size(spec) < 100e6

    def test_unique_state_bytes(self):
        assert A.unique_state_bytes(ClusterSpec(d=1, params_per_device=1e9)) == 12e9
        assert A.unique_state_bytes(ClusterSpec(d=4, params_per_device=1e9)) == 3e9
        assert A.unique_state_bytes(ClusterSpec(d=8, params_per_device=1e9)) == 1.5e9
