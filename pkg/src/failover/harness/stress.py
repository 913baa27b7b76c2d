"""Controller stress: many synthetic heartbeat senders and no GPU workers.

Each round every sender emits one wire-encoded HEARTBEAT; the controller
decodes the batch, applies it to the heartbeat table in one vectorized
update and runs failure detection.  The wall-clock cost of that per-round
work is what gets measured.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from ..controller.core import HeartbeatTable
from ..wire import HEADER, HEARTBEAT_BODY, Kind, encode

DEFAULT_SENDERS = (1024, 8192, 32768)


@dataclass
class StressResult:
    senders: int
    rounds: int
    batch_seconds: list[float]
    detected: int
    bytes_per_round: int

    @property
    def median(self) -> float:
        return statistics.median(self.batch_seconds)

    @property
    def worst(self) -> float:
        return max(self.batch_seconds)

    def to_dict(self) -> dict:
        return {"senders": self.senders, "rounds": self.rounds, "median_s": self.median,
                "max_s": self.worst, "detected": self.detected,
                "bytes_per_round": self.bytes_per_round}


def _frames(n: int, round_: int, now: float, silent: set[int]) -> bytes:
    # concatenated frames as they would sit in the controller's receive buffers
    return b"".join(encode(Kind.HEARTBEAT, (pod, round_, now))
                    for pod in range(n) if pod not in silent)


def _decode_batch(buf: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    size = HEADER.size + HEARTBEAT_BODY.size
    if len(buf) % size:
        raise ValueError("torn heartbeat batch")
    dtype = np.dtype([("hdr", f"V{HEADER.size}"), ("pod", ">u4"), ("it", ">i8"), ("ts", ">f8")])
    rec = np.frombuffer(buf, dtype=dtype)
    # every heartbeat header is identical (same kind, flags and body length)
    expected = np.frombuffer(encode(Kind.HEARTBEAT, (0, 0, 0.0))[:HEADER.size], dtype=dtype["hdr"])
    if rec.size and not np.all(rec["hdr"] == expected[0]):
        raise ValueError("non-heartbeat frame in heartbeat batch")
    return rec["pod"].astype(np.int64), rec["it"].astype(np.int64), rec["ts"].astype(float)


def stress(senders: int, rounds: int = 5, *, interval: float = 1.0, threshold: float = 3.0,
           silent: int = 1, seed: int = 0) -> StressResult:
    """Run ``rounds`` heartbeat rounds; ``silent`` random senders stop after round 0."""
    table = HeartbeatTable(senders)
    for pod in range(senders):
        table.register(pod, 0.0)
    rng = np.random.default_rng(seed)
    quiet = set(int(x) for x in rng.choice(senders, size=min(silent, senders), replace=False))
    times, detected = [], 0
    nbytes = 0
    for r in range(rounds):
        now = (r + 1) * interval
        buf = _frames(senders, r, now, quiet if r > 0 else set())
        nbytes = len(buf)
        t0 = time.perf_counter()
        pods, its, ts = _decode_batch(buf)
        table.update_batch(pods, its, ts)
        stale = table.stale(now, threshold * interval)
        table.failed[stale] = True
        detected += len(stale)
        times.append(time.perf_counter() - t0)
    return StressResult(senders, rounds, times, detected, nbytes)


def sweep(sizes=DEFAULT_SENDERS, rounds: int = 5, seed: int = 0) -> list[StressResult]:
    return [stress(n, rounds, seed=seed) for n in sizes]
