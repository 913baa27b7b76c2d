"""Tiny simulated cluster for lccl / controller tests."""

import simpy

from failover.controller import ControllerService, StateController
from failover.domain import ClusterSpec
from failover.lccl import Fabric, HostAgent, init_two_stage
from failover.transport import LinkModel, SimNetwork


class MiniCluster:
    def __init__(self, spec: ClusterSpec, *, link=None, setup_delay=0.0, poll_interval=0.01,
                 absent_nodes=()):
        self.spec = spec
        self.env = simpy.Environment()
        self.net = SimNetwork(self.env, link or LinkModel(bandwidth=1e9, latency=1e-5,
                                                          chunk_size=1 << 16))
        self.core = StateController(spec)
        self.service = ControllerService(self.env, self.net, self.core, detect=False)
        self.fabric = Fabric(self.env, self.net, spec, setup_delay=setup_delay,
                             poll_interval=poll_interval)
        self.agents = {}
        self.clients = {}
        for n in range(spec.num_nodes):
            if n in absent_nodes:
                continue
            host = f"host{n}"
            self.net.register(host, f"n{n}")
            agent = HostAgent(self.fabric, n, host)
            agent.client = self.service.connect(host)
            self.agents[n] = agent
            for lr in range(spec.gpus_per_node):
                ep = f"w{n}.{lr}"
                self.net.register(ep, f"n{n}")
                self.clients[(n, lr)] = self.service.connect(ep)

    def init(self, node, local_rank, **kw):
        """Generator: stage-1 init of one worker; returns its context."""
        ctx = yield from init_two_stage(self.agents[node], local_rank, f"w{node}.{local_rank}",
                                        self.clients[(node, local_rank)],
                                        node_info={"node": node}, **kw)
        return ctx

    def spawn_all(self, body, nodes=None):
        """Start ``body(ctx)`` on every worker; returns {(node, lr): process}."""
        procs = {}
        for n in (nodes if nodes is not None else sorted(self.agents)):
            for lr in range(self.spec.gpus_per_node):
                def run(n=n, lr=lr):
                    ctx = yield from self.init(n, lr)
                    out = yield from body(ctx)
                    return out
                procs[(n, lr)] = self.env.process(run())
        return procs
