"""Deterministic stand-in for training: the evolution rule and the replica oracle.

Weights and optimizer state are short byte strings advanced by a SHAKE-256
hash chain over (previous bytes, reduced gradient, iteration).  Gradients are
small non-negative int64 vectors, so the DP allreduce is exact and replicas
agree bit for bit.  The oracle replays the same arithmetic without any
network to give the expected state of every role at every iteration.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from ..controller.core import DataIndexMap
from ..dataloader.core import DataServerStub
from ..domain import ClusterSpec, OptimizerVersion, Role, StateBundle

WEIGHT_BYTES = 32
OPTIMIZER_BYTES = 48
ACTIVATION_BYTES = 32
GRAD_LEN = 8


def _h(tag: bytes, *parts, n: int = 32) -> bytes:
    """Hash with length-prefixed parts, so no two part lists collide by concatenation."""
    x = hashlib.shake_256(tag)
    for p in parts:
        b = p if isinstance(p, bytes) else struct.pack("<q", int(p))
        x.update(struct.pack("<I", len(b)))
        x.update(b)
    return x.digest(n)


def shard_of(role: Role, spec: ClusterSpec) -> int:
    """Optimizer shard index: replicas share one optimizer unless it is distributed."""
    return role.dp_index if spec.distributed_optimizer else 0


def initial_state(role: Role, spec: ClusterSpec, seed: int) -> StateBundle:
    w = _h(b"init-weights", seed, role.pp_index, role.tp_index, n=WEIGHT_BYTES)
    o = _h(b"init-optimizer", seed, role.pp_index, role.tp_index, shard_of(role, spec),
           n=OPTIMIZER_BYTES)
    return StateBundle(role, 0, w, OptimizerVersion(0, o))


def forward(act_in: bytes, weights: bytes) -> bytes:
    return _h(b"fwd", act_in, weights, n=ACTIVATION_BYTES)


def loss_signal(act_out: bytes, data: bytes) -> bytes:
    return _h(b"loss", act_out, data, n=ACTIVATION_BYTES)


def backward(grad_in: bytes, weights: bytes) -> bytes:
    return _h(b"bwd", grad_in, weights, n=ACTIVATION_BYTES)


def local_gradient(act_in: bytes, grad_in: bytes, weights: bytes) -> np.ndarray:
    raw = _h(b"grad", act_in, grad_in, weights, n=4 * GRAD_LEN)
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


def evolution_rule(state: StateBundle, gradient: np.ndarray, iteration: int,
                   spec: ClusterSpec | None = None) -> StateBundle:
    """State after applying ``gradient`` at ``iteration``; keeps one previous version."""
    if iteration != state.iteration:
        raise ValueError(f"state is at {state.iteration}, update is for {iteration}")
    g = np.asarray(gradient, dtype="<i8").tobytes()
    shard = shard_of(state.role, spec) if spec is not None else 0
    w = _h(b"weights", state.weights, g, iteration, n=WEIGHT_BYTES)
    o = _h(b"optimizer", state.optimizer_current.blob, g, iteration, shard, n=OPTIMIZER_BYTES)
    return StateBundle(state.role, iteration + 1, w, OptimizerVersion(iteration + 1, o),
                       state.optimizer_current, state.weights)


class ReplicaOracle:
    """Expected state of every role, recomputed from the seed alone."""

    def __init__(self, spec: ClusterSpec, seed: int, stub: DataServerStub | None = None):
        self.spec = spec
        self.seed = seed
        self.stub = stub or DataServerStub(seed=seed)
        self.indices = DataIndexMap(spec, seed)
        self._states = {r: initial_state(r, spec, seed) for r in spec.roles()}
        self.iteration = 0
        self._history: dict[int, dict[Role, StateBundle]] = {0: dict(self._states)}

    def _step(self) -> None:
        spec, it = self.spec, self.iteration
        per = self.indices.per_replica(it)
        grads: dict[Role, np.ndarray] = {}
        for dp in range(spec.d):
            data = self.stub.batch(per[dp])
            for tp in range(spec.t):
                acts_in, acts_out = [], []
                act = data
                for pp in range(spec.p):
                    acts_in.append(act)
                    act = forward(act, self._states[Role(dp, pp, tp)].weights)
                    acts_out.append(act)
                grad_in = loss_signal(acts_out[-1], data)
                for pp in reversed(range(spec.p)):
                    w = self._states[Role(dp, pp, tp)].weights
                    grads[Role(dp, pp, tp)] = local_gradient(acts_in[pp], grad_in, w)
                    grad_in = backward(grad_in, w)
        for pp in range(spec.p):
            for tp in range(spec.t):
                total = sum(grads[Role(dp, pp, tp)] for dp in range(spec.d))
                for dp in range(spec.d):
                    r = Role(dp, pp, tp)
                    self._states[r] = evolution_rule(self._states[r], total, it, spec)
        self.iteration += 1
        self._history[self.iteration] = dict(self._states)

    def state(self, role: Role, iteration: int) -> StateBundle:
        while self.iteration < iteration:
            self._step()
        return self._history[iteration][role]


def same_state(a: StateBundle, b: StateBundle) -> bool:
    return (a.role == b.role and a.iteration == b.iteration and a.weights == b.weights
            and a.optimizer_current.blob == b.optimizer_current.blob)
