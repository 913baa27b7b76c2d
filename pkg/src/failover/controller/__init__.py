"""State controller: registration, liveness, data indices, checkpoint ledger, recovery."""

from .core import (
    RECOVERY_STEPS, BackupOrder, DataIndexMap, HeartbeatTable, IndexAssignment, IterationLedger,
    RecoveryPlan, StateController, StateForward,
)
from .service import ControllerService, RecoveryRecord

__all__ = [
    "RECOVERY_STEPS", "BackupOrder", "ControllerService", "DataIndexMap", "HeartbeatTable",
    "IndexAssignment", "IterationLedger", "RecoveryPlan", "RecoveryRecord", "StateController",
    "StateForward",
]
