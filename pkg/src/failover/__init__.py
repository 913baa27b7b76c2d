"""Failure recovery for large-model training, on a simulated cluster.

Subpackages: ``transport`` (prioritized channels), ``lccl`` (collectives),
``controller`` (liveness and recovery), ``ckpt`` (in-memory checkpointing),
``dataloader`` (preloading), ``harness`` (scenarios, metrics, CLI), plus the
closed-form models in ``analytics``.
"""

__version__ = "0.1.0"
