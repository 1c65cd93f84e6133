"""flowarm: continuous flow networks and actor-critic baselines on a faultable two-link reacher."""

from .env import ArmConfig, FaultKind, FaultSpec, ReacherEnv, apply_fault
from .harness import (
    Checkpoint, EvalRecord, RunManifest, Stage, TransferMode, detect_asymptote, evaluate_policy, run_stage1,
    run_stage3,
)

__version__ = "0.1.0"

__all__ = [
    "ArmConfig", "Checkpoint", "EvalRecord", "FaultKind", "FaultSpec", "ReacherEnv", "RunManifest", "Stage",
    "TransferMode", "apply_fault", "detect_asymptote", "evaluate_policy", "run_stage1", "run_stage3",
]
