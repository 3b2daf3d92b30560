"""Robust CUSUM change detection under structured model uncertainty."""

from .config import (
    BenchConfig,
    DetectorConfig,
    EvidenceConfig,
    ExactSolverConfig,
    ScheduleConfig,
)
from .detector import DetectorState, RunResult, run, threshold_for_fap, update
from .gllr_exact import ExactEvidence, SolveStatus, v_t_exact
from .gllr_relaxed import RelaxedEvidence, v_t_relaxed
from .model import ChangeScenario, SystemModel, orthogonal_projector, residual
from .scenarios import ieee14_region4, load_scenario, mimo_blockage, random_system
from .uncertainty import DNormSet, EllipsoidSet, PolyhedralSet, RobustConstraintData

__version__ = "0.2.0"

__all__ = [
    "BenchConfig",
    "ChangeScenario",
    "DNormSet",
    "DetectorConfig",
    "DetectorState",
    "EllipsoidSet",
    "EvidenceConfig",
    "ExactEvidence",
    "ExactSolverConfig",
    "PolyhedralSet",
    "RelaxedEvidence",
    "RobustConstraintData",
    "RunResult",
    "ScheduleConfig",
    "SolveStatus",
    "SystemModel",
    "ieee14_region4",
    "load_scenario",
    "mimo_blockage",
    "orthogonal_projector",
    "random_system",
    "residual",
    "run",
    "threshold_for_fap",
    "update",
    "v_t_exact",
    "v_t_relaxed",
]
