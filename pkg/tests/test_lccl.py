import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from failover.domain import ClusterSpec, Role, index_of, node_of
from failover.errors import Interrupted, PlanViolation, ProtocolError, RendezvousTimeout
from failover.lccl import (
    FakeGroup, RendezvousTable, allreduce, comm_plan, dp_group, interrupt_all, p2p_recv,
    p2p_send, pack_tag, rendezvous, ring_allreduce_local, ring_schedule, unpack_tag,
)
from failover.lccl.tags import TagKind
from failover.wire import Kind

from simkit import MiniCluster


def flat_spec(nodes, per_node, **kw):
    return ClusterSpec(num_nodes=nodes, gpus_per_node=per_node, d=nodes * per_node, p=1, t=1, **kw)


class TestPlan:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.sampled_from([1, 2, 4, 8]))
    def test_at_most_four_inter_node_peers(self, d, p, t, per_node):
        world = d * p * t
        if world % per_node:
            return
        spec = ClusterSpec(num_nodes=world // per_node, gpus_per_node=per_node, d=d, p=p, t=t)
        for role in spec.roles():
            plan = comm_plan(role, spec)
            assert len(plan.inter_node_peers(spec)) <= 4
            if plan.dp_next is not None:
                assert comm_plan(plan.dp_next, spec).dp_prev == role
            if plan.pp_next is not None:
                assert comm_plan(plan.pp_next, spec).pp_prev == role

    def test_single_worker_has_no_peers(self):
        spec = ClusterSpec(num_nodes=1, gpus_per_node=1, d=1, p=1, t=1)
        assert comm_plan(Role(0, 0, 0), spec).peers == ()

    def test_sixteen_gpu_faked_group(self):
        spec = flat_spec(2, 8)
        g = FakeGroup.of([0, 4, 8, 12], spec)
        assert g.segments == ((0, 4), (8, 12))
        assert g.nodes == (0, 1)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 63), min_size=1, max_size=64, unique=True),
           st.sampled_from([1, 2, 4, 8, 16]))
    def test_segments_partition_members(self, members, per_node):
        spec = flat_spec(64 // per_node, per_node)
        g = FakeGroup.of(members, spec)
        flat = [m for seg in g.segments for m in seg]
        assert sorted(flat) == sorted(members)
        for seg, node in zip(g.segments, g.nodes):
            assert all(m // per_node == node for m in seg)
            assert list(seg) == [m for m in members if m // per_node == node]

    def test_dp_group_members(self):
        spec = ClusterSpec(num_nodes=4, gpus_per_node=4, d=4, p=2, t=2)
        g = dp_group(Role(1, 1, 0), spec)
        assert g.members == tuple(index_of(Role(i, 1, 0), spec) for i in range(4))
        assert len(g.nodes) == 4

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
    def test_ring_schedule_length_and_result(self, n):
        assert len(ring_schedule(n, 0)) == 2 * (n - 1)
        rng = np.random.default_rng(n)
        bufs = [rng.integers(-1000, 1000, size=11) for _ in range(n)]
        for out in ring_allreduce_local(bufs):
            assert np.array_equal(out, np.sum(bufs, axis=0))

    def test_tags_roundtrip(self):
        t = pack_tag(TagKind.COLL, 4097, 1, 2, 3)
        assert unpack_tag(t) == (TagKind.COLL, 1, 1, 2, 3)
        assert t < 1 << 64
        with pytest.raises(ValueError):
            pack_tag(TagKind.P2P, 0, 1 << 16)


class TestRendezvousTable:
    def test_partial_readiness_and_epochs(self):
        table = RendezvousTable()
        table.write(0, 0, "a")
        table.write(0, 1, "b")
        assert table.read(0, [1, 7]) == {1: "b"}
        with pytest.raises(ProtocolError):
            table.write(0, 1, "again")
        table.open_epoch(1)
        assert table.read(1, [0, 1]) == {}
        with pytest.raises(ProtocolError):
            table.write(0, 2, "stale")
        with pytest.raises(ProtocolError):
            table.open_epoch(1)


class TestInit:
    def test_single_node_ready_immediately(self):
        mc = MiniCluster(ClusterSpec(num_nodes=1, gpus_per_node=1, d=1, p=1, t=1))
        out = {}

        def proc():
            ctx = yield from mc.init(0, 0)
            out["stage1"] = ctx.stage1_at
            out["ready"] = ctx.ready.triggered
            out["role"] = ctx.role

        mc.env.process(proc())
        mc.env.run(until=1)
        assert out["ready"] and out["role"] == Role(0, 0, 0)

    def test_loading_overlaps_channel_setup(self):
        mc = MiniCluster(flat_spec(4, 1), setup_delay=3.0)
        done = {}

        def body(ctx):
            loading = ctx.env.timeout(5.0)  # state-loading stub, starts after stage 1
            yield ctx.env.all_of([loading, ctx.ready])
            done[ctx.rank] = ctx.env.now
            assert ctx.ready_at - ctx.stage1_at >= 3.0
            return ctx.env.now

        mc.spawn_all(body)
        mc.env.run(until=30)
        assert len(done) == 4
        for t in done.values():
            assert 5.0 <= t < 5.2  # overlapped: not 8 s

    def test_collective_waits_for_stage2(self):
        mc = MiniCluster(flat_spec(2, 1), setup_delay=2.0)
        res = {}

        def body(ctx):
            out = yield from allreduce(ctx, dp_group(ctx.role, mc.spec), np.ones(4))
            res[ctx.rank] = (out, ctx.trace)

        mc.spawn_all(body)
        mc.env.run(until=10)
        for out, trace in res.values():
            assert np.array_equal(out, 2 * np.ones(4))
            kinds = [k for _, k in trace]
            assert kinds.index("ready") < kinds.index("collective")

    def test_rendezvous_ignores_unrelated_ranks(self):
        # rank 0's peers are 1 and 7 on an 8-ring; withholding rank 4 must not matter
        def ready_time(absent):
            mc = MiniCluster(flat_spec(8, 1), absent_nodes=absent)
            got = {}

            def body(ctx):
                yield ctx.ready
                got[ctx.rank] = ctx.env.now

            for n in sorted(mc.agents):
                mc.env.process(_init_then(mc, n, body))
            mc.env.run(until=5)
            return got

        full = ready_time(())
        partial = ready_time((4,))
        assert 0 in partial and partial[0] == pytest.approx(full[0])
        assert 3 not in partial and 5 not in partial  # 4's own peers keep waiting

    def test_rendezvous_timeout(self):
        mc = MiniCluster(flat_spec(2, 1), absent_nodes=(1,))
        out = {}

        def proc():
            ctx = yield from mc.init(0, 0, rendezvous_timeout=0.5)
            try:
                yield ctx.ready
            except RendezvousTimeout as exc:
                out["err"] = exc

        mc.env.process(proc())
        mc.env.run(until=5)
        assert "err" in out

    def test_stale_epoch_registration_rejected(self):
        mc = MiniCluster(flat_spec(2, 1))
        out = {}

        def proc():
            try:
                yield from mc.clients[(0, 0)].call(Kind.REGISTER, {"host": "x", "epoch": 3})
            except ProtocolError as exc:
                out["err"] = str(exc)

        mc.env.process(proc())
        mc.env.run(until=1)
        assert "stale epoch" in out["err"]


def _init_then(mc, n, body):
    ctx = yield from mc.init(n, 0)
    yield from body(ctx)


class TestAllreduce:
    def test_four_agents_ones(self):
        mc = MiniCluster(flat_spec(4, 1))
        res = {}

        def body(ctx):
            res[ctx.rank] = yield from allreduce(ctx, FakeGroup.of(range(4), mc.spec),
                                                 np.ones(8, dtype=np.int64))

        mc.spawn_all(body)
        mc.env.run(until=5)
        assert len(res) == 4
        for v in res.values():
            assert np.array_equal(v, np.full(8, 4))

    def test_segments_exchange_only_between_hosts(self):
        spec = flat_spec(2, 8)
        mc = MiniCluster(spec)
        mc.net.record_trace = True
        group = FakeGroup.of([0, 4, 8, 12], spec)
        res = {}

        def body(ctx):
            if ctx.rank in group.members:
                res[ctx.rank] = yield from allreduce(ctx, group, np.arange(5) * ctx.rank)
            else:
                yield ctx.ready

        for n in (0, 1):
            for lr in range(8):
                mc.env.process(_init_local(mc, n, lr, body))
        mc.env.run(until=5)
        expected = np.arange(5) * (0 + 4 + 8 + 12)
        assert all(np.array_equal(v, expected) for v in res.values()) and len(res) == 4
        coll = [e for e in mc.net.trace if e[1] == "submit" and unpack_tag(e[5])[0] == TagKind.COLL]
        assert coll and {(e[2], e[3]) for e in coll} == {("host0", "host1"), ("host1", "host0")}

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 4), st.integers(1, 40), st.integers(0, 2**31))
    def test_random_vectors_match_reference(self, members, per_node, length, seed):
        nodes = -(-members // per_node)
        spec = flat_spec(nodes, per_node)
        rng = np.random.default_rng(seed)
        data = {r: rng.normal(size=length) for r in range(members)}
        res = _run_group(spec, range(members), data)
        ref = np.sum([data[r] for r in range(members)], axis=0)
        for v in res.values():
            np.testing.assert_allclose(v, ref, rtol=1e-9, atol=1e-12)

    def test_modeled_bytes_on_links(self):
        spec = flat_spec(2, 1)
        mc = MiniCluster(spec)

        def body(ctx):
            yield from allreduce(ctx, FakeGroup.of([0, 1], spec), np.ones(4), nbytes=1 << 20)

        mc.spawn_all(body)
        mc.env.run(until=5)
        # 2(n-1) = 2 steps of half the vector each
        assert mc.agents[0].ring_bytes == 1 << 20


def _init_local(mc, n, lr, body):
    ctx = yield from mc.init(n, lr)
    yield from body(ctx)


def _run_group(spec, members, data, until=50):
    mc = MiniCluster(spec)
    group = FakeGroup.of(list(members), spec)
    res = {}

    def body(ctx):
        if ctx.rank in group.members:
            res[ctx.rank] = yield from allreduce(ctx, group, data[ctx.rank])

    for n in range(spec.num_nodes):
        for lr in range(spec.gpus_per_node):
            if n * spec.gpus_per_node + lr < spec.world_size:
                mc.env.process(_init_local(mc, n, lr, body))
    mc.env.run(until=until)
    assert set(res) == set(group.members)
    return res


class TestP2P:
    def make(self):
        spec = ClusterSpec(num_nodes=2, gpus_per_node=1, d=1, p=2, t=1)
        return MiniCluster(spec), spec

    def test_forward_and_backward_do_not_interfere(self):
        mc, spec = self.make()
        got = {}

        def stage0(ctx):
            nxt = Role(0, 1, 0)
            for mb in range(3):
                yield from p2p_send(ctx, nxt, mb, f"act{mb}".encode())
            for mb in range(3):
                got[("grad", mb)] = yield from p2p_recv(ctx, nxt, (1 << 40) | mb)

        def stage1(ctx):
            prv = Role(0, 0, 0)
            for mb in reversed(range(3)):
                got[("act", mb)] = yield from p2p_recv(ctx, prv, mb)
                yield from p2p_send(ctx, prv, (1 << 40) | mb, f"grad{mb}".encode())

        mc.env.process(_init_then(mc, 0, stage0))
        mc.env.process(_init_then(mc, 1, stage1))
        mc.env.run(until=5)
        for mb in range(3):
            assert got[("act", mb)] == f"act{mb}".encode()
            assert got[("grad", mb)] == f"grad{mb}".encode()

    def test_send_to_non_peer(self):
        spec = flat_spec(4, 1)
        mc = MiniCluster(spec)
        out = {}

        def body(ctx):
            yield ctx.ready
            if ctx.rank == 0:
                try:
                    yield from p2p_send(ctx, Role(2, 0, 0), 1, b"x")
                except PlanViolation:
                    out["violation"] = True

        mc.spawn_all(body)
        mc.env.run(until=5)
        assert out == {"violation": True}

    def test_interrupt_during_recv(self):
        mc, spec = self.make()
        out = {}

        def waiter(ctx):
            out["ctx"] = ctx
            try:
                yield from p2p_recv(ctx, Role(0, 1, 0), 9)
            except Interrupted as exc:
                out["notice"] = exc.notice
                out["t"] = ctx.env.now

        def kicker():
            yield mc.env.timeout(2)
            interrupt_all(out["ctx"], "node 1 failed")

        mc.env.process(_init_then(mc, 0, waiter))
        mc.env.process(kicker())
        mc.env.run(until=5)
        assert out["notice"] == "node 1 failed" and out["t"] == 2
        with pytest.raises(Interrupted):
            out["ctx"].check()


class TestInterruptAll:
    def test_no_blocked_callers_still_poisons(self):
        mc = MiniCluster(ClusterSpec(num_nodes=1, gpus_per_node=1, d=1, p=1, t=1))
        out = {}

        def proc():
            ctx = yield from mc.init(0, 0)
            interrupt_all(ctx, "bye")
            try:
                yield from allreduce(ctx, FakeGroup.of([0], mc.spec), np.ones(1))
            except Interrupted:
                out["poisoned"] = True

        mc.env.process(proc())
        mc.env.run(until=1)
        assert out == {"poisoned": True}

    def test_eight_blocked_workers_unblock_together(self):
        spec = flat_spec(9, 1)
        mc = MiniCluster(spec)
        woke = {}
        group = FakeGroup.of(range(9), spec)

        def body(ctx):
            try:
                yield from allreduce(ctx, group, np.ones(3))
            except Interrupted:
                woke[ctx.rank] = ctx.env.now

        mc.spawn_all(body, nodes=range(8))  # node 8 never shows up

        def kicker():
            yield mc.env.timeout(3)
            for agent in mc.agents.values():
                agent.interrupt("failure")

        mc.env.process(kicker())
        mc.env.run(until=5)
        assert len(woke) == 8 and set(woke.values()) == {3}
