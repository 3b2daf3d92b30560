import logging
import os
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationError,
    field_validator,
    model_validator,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "ROSGUARD_THREADS"


def _as_float_array(value: Any) -> np.ndarray:
    array = np.array(value, dtype=float)
    array.setflags(write=False)
    return array


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_float_array),
    PlainSerializer(lambda a: a.tolist(), return_type=list),
]


class ArrayModel(BaseModel):
    """Frozen model that may hold numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class ConfigModel(BaseModel):
    """Base for user-facing configuration blocks."""

    model_config = ConfigDict(extra="forbid")

    @classmethod
    def from_config(cls, config_dict: Dict[str, Any]):
        """
        Create a configuration block from a plain dictionary.

        Args:
            config_dict (Dict[str, Any]): Raw configuration values.

        Returns:
            The validated configuration model.
        """
        try:
            return cls(**config_dict)
        except ValidationError as e:
            logger.error(f"Configuration validation error: {e}")
            raise


class EvidenceConfig(ConfigModel):
    """
    Magnitude band and slack policy for the per-step evidence problem.

    ``epsilon`` may be ``None`` (fill each column from the diameter guideline),
    a single value for every column, or one value per column.
    """

    rho_L: float = Field(1.0, gt=0)
    rho_U: float = Field(3.0, gt=0)
    epsilon: Union[None, float, List[float]] = None

    @model_validator(mode="after")
    def _check_band(self):
        if self.rho_U < self.rho_L:
            raise ValueError(f"rho_U ({self.rho_U}) must be >= rho_L ({self.rho_L})")
        eps = self.epsilon
        if eps is not None:
            values = eps if isinstance(eps, list) else [eps]
            if any(e < 0 for e in values):
                raise ValueError("epsilon values must be >= 0")
        return self


class ExactSolverConfig(ConfigModel):
    method: Literal["bnb", "bruteforce"] = "bnb"
    # None selects 1e-6 * (1 + |incumbent|)
    gap_tol: Optional[float] = Field(None, ge=0)
    node_limit: int = Field(100_000, ge=1)
    comp_tol: float = Field(1e-7, gt=0)
    feas_tol: float = Field(1e-7, gt=0)
    int_tol: float = Field(1e-6, gt=0)
    max_enumeration_dim: int = Field(8, ge=1)
    conic_solver: str = "CLARABEL"
    perspective: Literal["split", "single"] = "split"


class ScheduleConfig(ConfigModel):
    """Geometric step-size schedule for the first-order relaxed solver."""

    K: int = Field(10, ge=1)
    max_inner: int = Field(50, ge=1)
    eps_stop: float = Field(0.01, gt=0)
    max_outer: int = Field(200, ge=1)
    primal_base: float = Field(0.05, gt=0)
    primal_decay: float = Field(0.9, gt=0)
    dual_base: float = Field(0.1, gt=0)
    dual_decay: float = Field(0.95, gt=0)
    penalty: float = Field(1.0, gt=0)
    kkt_tol: float = Field(1e-4, gt=0)
    backtracking: bool = True
    max_halvings: int = Field(20, ge=0)
    u_floor: float = Field(1e-9, gt=0)
    diverge_at: float = Field(1e12, gt=0)
    perspective: Literal["split", "single"] = "split"
    shortcut: bool = True
    # primal value minus certified lower bound, in objective units
    certify_tol: float = Field(1e-4, gt=0)
    bound_steps: int = Field(200, ge=0)
    polish: bool = True
    conic_solver: str = "CLARABEL"

    @model_validator(mode="after")
    def _check_layers(self):
        if self.K > self.max_inner:
            raise ValueError(f"K ({self.K}) exceeds max_inner ({self.max_inner})")
        return self


class DetectorConfig(ConfigModel):
    """Threshold selection: give ``h`` directly or a false-alarm target ``gamma``."""

    h: Optional[float] = Field(None, gt=0)
    gamma: Optional[float] = Field(None, gt=0)
    alpha: Optional[float] = Field(None, gt=0)
    alpha_safety: float = Field(1.2, ge=1.0)
    calibration_steps: int = Field(1000, ge=1)
    t_max: int = Field(10**6, ge=1)

    @model_validator(mode="after")
    def _need_threshold(self):
        if self.h is None and self.gamma is None:
            raise ValueError("either h or gamma must be given")
        return self


class BenchConfig(ConfigModel):
    scenario: str = "ieee14"
    solver: Literal["exact", "relaxed"] = "relaxed"
    runs: int = Field(100, ge=1)
    gammas: List[float] = Field(default_factory=lambda: [50.0, 100.0, 200.0])
    h_grid: Optional[List[float]] = None
    t_a: Optional[int] = Field(1, ge=1)
    t_a_pair: Tuple[int, int] = (1, 50)
    t_max: int = Field(10**6, ge=1)
    seed_base: int = 0
    alpha: Optional[float] = Field(None, gt=0)
    alpha_safety: float = Field(1.2, ge=1.0)
    calibration_steps: int = Field(1000, ge=1)
    sigma2: Optional[float] = Field(None, gt=0)
    evidence: Optional[EvidenceConfig] = None
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    exact: ExactSolverConfig = Field(default_factory=ExactSolverConfig)
    M_grid: List[int] = Field(default_factory=lambda: [4, 8, 16, 32, 64])
    trials: int = Field(50, ge=1)
    batch: int = Field(64, ge=1)
    exact_cap: int = Field(8, ge=1)
    threads: Optional[int] = Field(None, ge=1)
    out: Optional[str] = None

    @field_validator("h_grid", "gammas")
    @classmethod
    def _positive(cls, values):
        if values is not None and any(v <= 0 for v in values):
            raise ValueError("grid values must be > 0")
        return values


class SetBlock(ConfigModel):
    """One column's uncertainty set in a scenario file; matrices inline or by path."""

    kind: Literal["polyhedral", "ellipsoid", "dnorm"]
    D: Union[None, str, List[List[float]]] = None
    d: Union[None, str, List[float]] = None
    center: Union[None, str, List[float]] = None
    radius: Optional[float] = Field(None, ge=0)
    kappa: Optional[int] = Field(None, ge=0)
    u_hat: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _required_fields(self):
        needed = {
            "polyhedral": ("D", "d"),
            "ellipsoid": ("center", "radius"),
            "dnorm": ("center", "kappa", "u_hat"),
        }[self.kind]
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind} set block is missing {', '.join(missing)}")
        return self


class ScenarioFile(ConfigModel):
    """JSON scenario file schema (see README)."""

    name: str
    H: Union[str, List[List[float]]]
    sigma2: float = Field(gt=0)
    sets: List[SetBlock]
    evidence: EvidenceConfig = Field(default_factory=EvidenceConfig)
    t_a: Optional[int] = Field(None, ge=1)
    injection: Literal["in-band", "none"] = "in-band"
    seed: int = 0


def worker_count(threads: Optional[int] = None) -> int:
    """Worker pool size: explicit value, else ROSGUARD_THREADS, else 1."""
    if threads is not None:
        return threads
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
        return 1
    return max(1, value)
