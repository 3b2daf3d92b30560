"""
CUSUM stopping rule on the per-step evidence, plus the threshold and delay
calculators that go with it.
"""

import logging
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from .config import ArrayModel, FloatArray
from .exceptions import AlreadyFired, ReportError

logger = logging.getLogger(__name__)

NEGATIVE_EVIDENCE_TOL = 1e-9
RUN_LOG_COLUMNS = ["t", "v_t", "V_t", "fired"]


class DetectorState(ArrayModel):
    """Cumulative statistic V after t updates; ``history`` is None unless recording."""

    h: float = Field(gt=0)
    V: float = 0.0
    t: int = 0
    fired: bool = False
    history: Optional[Tuple[float, ...]] = None


def update(state: DetectorState, v_t: float) -> DetectorState:
    """
    One CUSUM step: V' = max(V, 0) + max(v_t, 0).

    Raises:
        AlreadyFired: If the detector has already raised an alarm.
        ValueError: If v_t is below -1e-9 or not a number.
    """
    if state.fired:
        raise AlreadyFired(f"detector fired at t={state.t}; create a new state to continue")
    v_t = float(v_t)
    if not v_t >= -NEGATIVE_EVIDENCE_TOL:
        raise ValueError(f"evidence must be >= 0, got {v_t}")
    v_t = max(v_t, 0.0)
    V = max(state.V, 0.0) + v_t
    history = None if state.history is None else state.history + (v_t,)
    return state.model_copy(update={"V": V, "t": state.t + 1, "fired": V >= state.h, "history": history})


class RunResult(ArrayModel):
    """Outcome of one detector run; ``stopping_time`` is None when censored."""

    stopping_time: Optional[int]
    t_max: int
    h: float
    v: FloatArray = Field(default_factory=lambda: np.zeros(0))

    @property
    def censored(self) -> bool:
        return self.stopping_time is None

    @property
    def run_length(self) -> int:
        return self.t_max if self.stopping_time is None else self.stopping_time

    @property
    def V(self) -> np.ndarray:
        return statistic_path(self.v)


def run(
    stream: Iterable,
    evidence_solver: Callable[[np.ndarray], float],
    h: float,
    t_max: int = 10**6,
) -> RunResult:
    """
    Feed observations to the detector until V_K >= h or t_max steps.

    Solver errors abort the run; the failing step is logged before re-raising.
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    state = DetectorState(h=h)
    values = []
    for x in stream:
        if state.t >= t_max:
            break
        try:
            v = evidence_solver(x)
        except Exception as e:
            logger.error(f"Evidence solver failed at step {state.t + 1}: {e}")
            raise
        state = update(state, v)
        values.append(max(float(v), 0.0))
        if state.fired:
            logger.info(f"Detector fired at t={state.t} (V={state.V:.4g}, h={h:.4g})")
            return RunResult(stopping_time=state.t, t_max=t_max, h=h, v=np.array(values))
    logger.warning(f"Run censored after {state.t} steps (V={state.V:.4g}, h={h:.4g})")
    return RunResult(stopping_time=None, t_max=t_max, h=h, v=np.array(values))


def statistic_path(v: Sequence[float], clamp: bool = True) -> np.ndarray:
    """
    V_1..V_K for an evidence sequence.

    With ``clamp`` the evidence is floored at 0 first, as ``update`` does, and the
    path is a running sum. Without it the raw recursion V_K = max(V_{K-1}, 0) + v_K
    is returned, which equals the largest suffix sum of v_1..v_K.
    """
    v = np.asarray(v, dtype=float)
    if clamp:
        return np.cumsum(np.maximum(v, 0.0))
    S = np.concatenate([[0.0], np.cumsum(v)])
    return S[1:] - np.minimum.accumulate(S[:-1])


def first_crossings(V: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """1-based first index with V >= h for each threshold (0 when never reached). V must be nondecreasing."""
    V = np.asarray(V, dtype=float)
    idx = np.searchsorted(V, np.asarray(thresholds, dtype=float), side="left")
    return np.where(idx < V.size, idx + 1, 0)


def threshold_for_fap(alpha: float, sigma2: float, gamma: float) -> float:
    """Smallest h with a guaranteed false-alarm period of at least gamma: alpha gamma / (2 sigma2)."""
    if alpha <= 0 or sigma2 <= 0 or gamma <= 0:
        raise ValueError(f"need alpha, sigma2, gamma > 0 (got {alpha}, {sigma2}, {gamma})")
    return alpha * gamma / (2.0 * sigma2)


def add_upper_bound(h: float, sigma2: float, rho_L: float) -> float:
    """Worst-case average detection delay bound 2 h sigma2 / rho_L^2."""
    if rho_L <= 0:
        raise ValueError(f"rho_L must be > 0, got {rho_L}")
    if h < 0:
        raise ValueError(f"h must be >= 0, got {h}")
    return 2.0 * h * sigma2 / rho_L**2


def estimate_alpha(prefix, safety: float = 1.2) -> float:
    """Observation energy bound: safety * max ||x||^2 over a calibration prefix."""
    prefix = np.atleast_2d(np.asarray(prefix, dtype=float))
    if prefix.size == 0:
        raise ValueError("calibration prefix is empty")
    return safety * float((prefix**2).sum(axis=1).max())


class DelayMetrics(BaseModel):
    """Measured false-alarm period and delay at the threshold a gamma target implies."""

    fap: float = Field(ge=1)
    add: float = Field(ge=0)
    gamma: float = Field(gt=0)
    alpha: float = Field(gt=0)
    h: Optional[float] = Field(None, gt=0)


def write_run_log(result: RunResult, path: Union[str, Path]) -> None:
    """CSV with one row per step: t, v_t, V_t, fired."""
    v = result.v
    V = statistic_path(v)
    fired = np.zeros(v.size, dtype=int)
    if result.stopping_time is not None and v.size:
        fired[result.stopping_time - 1 :] = 1
    frame = pd.DataFrame({"t": np.arange(1, v.size + 1), "v_t": v, "V_t": V, "fired": fired})
    try:
        frame.to_csv(path, index=False, columns=RUN_LOG_COLUMNS, float_format="%.10g")
    except OSError as e:
        logger.error(f"Could not write run log {path}: {e}")
        raise ReportError(path, e) from e
    logger.info(f"Wrote run log with {v.size} steps to {path}")
