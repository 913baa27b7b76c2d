import threading
import time

import pytest
import simpy
from hypothesis import given, settings, strategies as st

from failover.domain import TID, Role
from failover.errors import Aborted, Interrupted, SetupError
from failover.transport import (
    Direction, LinkModel, Message, Priority, SimNetwork, SocketNetwork,
)

LINK = LinkModel(bandwidth=1e6, latency=1e-3, chunk_size=1000)  # 1 ms per chunk


def make_net(*nodes, link=LINK):
    env = simpy.Environment()
    net = SimNetwork(env, link)
    for node in nodes:
        net.register(node, node)
    return env, net


def msg(src, dst, prio, size, tag=0, payload=b""):
    return Message(prio, src, dst, tag, payload, nbytes=size)


def run_proc(env, gen):
    proc = env.process(gen)
    env.run()
    return proc.value


class TestSimChannel:
    def test_ctrl_zero_bytes_after_latency(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        h = ch.send(msg("a", "b", Priority.CTRL, 0))

        def receiver():
            m = yield ch.recv("b", 0)
            return env.now, m

        t, m = run_proc(env, receiver())
        assert t == pytest.approx(1e-3)
        assert h.completed_at == pytest.approx(2e-3)

    def test_unknown_endpoint(self):
        env, net = make_net("a")
        with pytest.raises(SetupError):
            net.open_channel("a", "zzz")

    def test_ctrl_size_limit(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        with pytest.raises(ValueError):
            ch.send(msg("a", "b", Priority.CTRL, 64 * 1024 + 1))

    def test_two_channels_share_nic(self):
        env, net = make_net("a", "b", "c")
        x = 10_000
        h1 = net.open_channel("a", "b").send(msg("a", "b", Priority.STATE, x))
        h2 = net.open_channel("a", "c").send(msg("a", "c", Priority.STATE, x))
        env.run()
        # round-robin chunks: 19 and 20 chunk-times, plus delivery and ack latency
        assert h1.completed_at == pytest.approx(0.019 + 2e-3)
        assert h2.completed_at == pytest.approx(0.020 + 2e-3)
        assert max(h1.completed_at, h2.completed_at) == pytest.approx(2 * x / 1e6 + 2e-3)

    def test_train_preempts_state_at_chunk_boundary(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        delivered = {}

        def watch(tag):
            m = yield ch.recv("b", tag)
            delivered[tag] = env.now

        env.process(watch(1))
        env.process(watch(2))
        ch.send(msg("a", "b", Priority.STATE, 10_000, tag=1))

        def later():
            yield env.timeout(1.5e-3)
            ch.send(msg("a", "b", Priority.TRAIN, 1000, tag=2))

        env.process(later())
        env.run()
        # STATE chunk 2 occupies [1, 2) ms; TRAIN goes [2, 3) ms; +1 ms latency
        assert delivered[2] == pytest.approx(4e-3)
        assert delivered[1] == pytest.approx(12e-3)
        assert delivered[2] < delivered[1]

    def test_state_only_saturates_link(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        ch.send(msg("a", "b", Priority.STATE, 100_000))
        env.run(until=0.0505)
        assert net.stats("a").utilization == pytest.approx(1.0)
        env.run()
        assert net.stats("a").bytes_by_priority[Priority.STATE] == 100_000

    def test_ctrl_bypasses_data_queues(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        ch.send(msg("a", "b", Priority.TRAIN, 50_000, tag=1))
        got = {}

        def rx():
            yield ch.recv("b", 9)
            got["t"] = env.now

        env.process(rx())
        ch.send(msg("a", "b", Priority.CTRL, 100, tag=9))
        env.run()
        assert got["t"] == pytest.approx(1e-3)

    def test_tag_matching_any_order(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        out = {}

        def rx(tag):
            m = yield ch.recv("b", tag)
            out[tag] = m.payload

        env.process(rx(7))
        env.process(rx(3))
        ch.send(Message(Priority.TRAIN, "a", "b", 3, b"three"))
        ch.send(Message(Priority.TRAIN, "a", "b", 7, b"seven"))
        env.run()
        assert out == {7: b"seven", 3: b"three"}

    def test_queued_message_returns_immediately(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        ch.send(Message(Priority.CTRL, "a", "b", 1, b"x"))
        env.run()
        ev = ch.recv("b", 1)
        assert ev.triggered and ev.value.payload == b"x"

    def test_interrupt_wakes_blocked_recv(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        caught = {}

        def rx():
            try:
                yield ch.recv("b", 1)
            except Interrupted as exc:
                caught["t"] = env.now
                caught["notice"] = exc.notice

        def kick():
            yield env.timeout(5)
            net.interrupt("b", "node 3 failed")

        env.process(rx())
        env.process(kick())
        env.run()
        assert caught == {"t": 5, "notice": "node 3 failed"}
        assert "node 3 failed" in str(Interrupted("node 3 failed"))

    def test_close_aborts_and_reopen_is_fresh(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        h = ch.send(msg("a", "b", Priority.STATE, 50_000))
        ch.send(Message(Priority.CTRL, "a", "b", 1, b"stale"))

        def closer():
            yield env.timeout(5e-3)
            ch.close()

        def waiter():
            try:
                yield h
            except Aborted:
                return "aborted"

        p = env.process(waiter())
        env.process(closer())
        env.run()
        assert p.value == "aborted"
        ch2 = net.open_channel("a", "b")
        assert ch2.pending("b", 1) == 0
        assert net.link_idle("b", "down")

    def test_link_idle(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        assert net.link_idle("a", Direction.UP) and net.link_idle("b", Direction.DOWN)
        ch.send(msg("a", "b", Priority.TRAIN, 5000))
        env.run(until=2e-3)
        assert not net.link_idle("a", Direction.UP)
        assert not net.link_idle("b", Direction.DOWN)
        env.run()
        assert net.link_idle("a", Direction.UP) and net.link_idle("b", Direction.DOWN)
        ch.send(msg("a", "b", Priority.STATE, 5000))
        env.run(until=env.now + 2e-3)
        assert net.link_idle("a", Direction.UP) and net.link_idle("b", Direction.DOWN)

    def test_fifo_within_priority_and_tag(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        for i in range(20):
            ch.send(Message(Priority.STATE, "a", "b", 4, bytes([i]), nbytes=1500 + 37 * i))
        got = []

        def rx():
            for _ in range(20):
                m = yield ch.recv("b", 4)
                got.append(m.payload[0])

        env.process(rx())
        env.run()
        assert got == list(range(20))

    def test_dead_node_loses_messages(self):
        env, net = make_net("a", "b")
        ch = net.open_channel("a", "b")
        h = ch.send(msg("a", "b", Priority.TRAIN, 10_000))
        env.run(until=3e-3)
        net.fail_node("b")
        env.run()
        assert not h.triggered
        assert net.link_idle("b", "down")


def _train_schedule(times, sizes, with_state, seed_state=0):
    env, net = make_net("a", "b")
    ch = net.open_channel("a", "b")
    done = []

    def feeder():
        # keeps STATE work queued on the link for the whole run
        while env.now < 0.5:
            h = ch.send(msg("a", "b", Priority.STATE, 3500, tag=99))
            yield h

    def sender(t, size, i):
        yield env.timeout(t)
        h = ch.send(msg("a", "b", Priority.TRAIN, size, tag=i))
        yield h
        done.append((i, env.now))

    if with_state:
        env.process(feeder())
    for i, (t, size) in enumerate(zip(times, sizes)):
        env.process(sender(t, size, i))
    env.run(until=2.0)
    return dict(done), net


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 0.3), st.integers(0, 6000)), min_size=1, max_size=12))
def test_train_delay_bounded_by_one_chunk(events):
    times = [t for t, _ in events]
    sizes = [s for _, s in events]
    alone, _ = _train_schedule(times, sizes, with_state=False)
    mixed, _ = _train_schedule(times, sizes, with_state=True)
    for i, t in alone.items():
        assert mixed[i] - t <= LINK.chunk_time + 1e-12
        assert mixed[i] >= t - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 0.05), st.integers(0, 20_000), st.sampled_from(
    [Priority.TRAIN, Priority.STATE])), min_size=1, max_size=15), st.floats(0.001, 0.2))
def test_bytes_bounded_by_bandwidth(sends, horizon):
    env, net = make_net("a", "b", "c")
    chans = {"b": net.open_channel("a", "b"), "c": net.open_channel("a", "c")}

    def sender(t, size, prio, dest):
        yield env.timeout(t)
        chans[dest].send(msg("a", dest, prio, size))

    for i, (t, size, prio) in enumerate(sends):
        env.process(sender(t, size, prio, "b" if i % 2 else "c"))
    env.run(until=horizon)
    stats = net.stats("a")
    sent = stats.bytes_by_priority[Priority.TRAIN] + stats.bytes_by_priority[Priority.STATE]
    assert sent <= LINK.bandwidth * horizon + LINK.chunk_size
    assert stats.busy_time + stats.idle_time == pytest.approx(horizon)


def test_simulated_trace_deterministic():
    def trace():
        env, net = make_net("a", "b", "c")
        net.record_trace = True
        ab, ac = net.open_channel("a", "b"), net.open_channel("a", "c")
        for i in range(10):
            (ab if i % 3 else ac).send(msg("a", "b" if i % 3 else "c",
                                           Priority(i % 2), 1234 * i, tag=i))
        env.run()
        return net.trace

    assert trace() == trace()


class TestSocketBackend:
    @pytest.fixture
    def net(self):
        n = SocketNetwork(chunk_size=4096)
        n.register("a")
        n.register("b")
        yield n
        n.close()

    def test_roundtrip_with_chunking_and_tid(self, net):
        ch = net.open_channel("a", "b")
        payload = bytes(range(256)) * 100
        tid = TID(Role(1, 2, 3), 42)
        fut = ch.send(Message(Priority.STATE, "a", "b", 5, payload, tid=tid))
        m = ch.recv("b", 5, timeout=5)
        assert m.payload == payload and m.tid == tid and m.priority == Priority.STATE
        assert fut.result(timeout=5) > 0

    def test_tag_matching(self, net):
        ch = net.open_channel("a", "b")
        ch.send(Message(Priority.TRAIN, "a", "b", 2, b"two"))
        ch.send(Message(Priority.TRAIN, "a", "b", 1, b"one"))
        assert ch.recv("b", 1, timeout=5).payload == b"one"
        assert ch.recv("b", 2, timeout=5).payload == b"two"

    def test_duplex(self, net):
        ch = net.open_channel("a", "b")
        ch.send(Message(Priority.CTRL, "b", "a", 0, b"hello"))
        assert ch.recv("a", 0, timeout=5).payload == b"hello"

    def test_interrupt_blocked_recv(self, net):
        ch = net.open_channel("a", "b")
        result = {}

        def rx():
            try:
                ch.recv("b", 1, timeout=10)
            except Interrupted as exc:
                result["notice"] = exc.notice

        th = threading.Thread(target=rx)
        th.start()
        time.sleep(0.1)
        net.interrupt("b", "pod 2 down")
        th.join(5)
        assert result == {"notice": "pod 2 down"}

    def test_close_aborts(self, net):
        ch = net.open_channel("a", "b")
        ch.close()
        with pytest.raises(Aborted):
            ch.send(Message(Priority.STATE, "a", "b", 1, b"x")).result(timeout=5)
        with pytest.raises(Aborted):
            ch.recv("b", 1, timeout=1)

    def test_link_idle_reports(self, net):
        net.open_channel("a", "b")
        assert net.link_idle("a", "up") and net.link_idle("b", "down")
