"""
Monte Carlo harness: false-alarm and delay tables, the change-time equalizer
test, runtime scaling, and CSV reporting.

Every run owns a seed spawned from ``SeedSequence(seed_base)``, its own
observation stream and its own detector path, so tables do not depend on how
runs are scheduled across the worker pool.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import islice
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.stats

from .config import BenchConfig, worker_count
from .detector import (
    DelayMetrics,
    add_upper_bound,
    estimate_alpha,
    first_crossings,
    threshold_for_fap,
)
from .exceptions import ReportError
from .gllr_exact import ExactEvidence
from .gllr_relaxed import RelaxedEvidence, SolverSchedule
from .model import ChangeScenario, generate_stream, iter_stream
from .scenarios import ScenarioSpec, load_scenario, random_system

logger = logging.getLogger(__name__)

FAP_COLUMNS = ["h", "gamma", "mean_fap", "censored", "runs"]
ADD_COLUMNS = ["h", "mean_add", "bound", "runs"]
SCALE_COLUMNS = ["M", "solver", "batch", "mean_ms", "throughput"]
CURVE_COLUMNS = ["gamma", "h", "alpha", "mean_fap", "mean_add", "fap_ratio"]
EQUALIZER_COLUMNS = ["t_a_first", "t_a_second", "runs", "statistic", "pvalue", "passed"]
DEFAULT_ADD_H = (5.0, 10.0, 20.0)
KS_LEVEL = 0.01
# evidence is solved in blocks that double from FIRST_BLOCK up to STEP_BLOCK steps
FIRST_BLOCK = 16
STEP_BLOCK = 256


def run_seeds(seed_base: int, runs: int, stream: int = 0) -> List[int]:
    children = np.random.SeedSequence([seed_base, stream]).spawn(runs)
    return [int(child.generate_state(1)[0]) for child in children]


def scenario_for(cfg: BenchConfig) -> ScenarioSpec:
    spec = load_scenario(cfg.scenario, sigma2=cfg.sigma2, seed=cfg.seed_base)
    return spec.with_evidence(cfg.evidence)


def evidence_factory(spec: ScenarioSpec, cfg: BenchConfig) -> Callable[[], Callable]:
    """
    Returns a constructor for the evidence solver a run should use.

    The relaxed solver is stateless and shared; the exact solver keeps the last
    support between steps, so every run gets its own.
    """
    if cfg.solver == "relaxed":
        shared = RelaxedEvidence(spec.model, spec.sets, spec.evidence, cfg.schedule)
        return lambda: shared
    return lambda: ExactEvidence(spec.model, spec.sets, spec.evidence, cfg.exact)


def block_evidence(solver, X: np.ndarray) -> np.ndarray:
    if isinstance(solver, RelaxedEvidence):
        return solver.batch(X)
    return np.array([solver(x) for x in X])


def crossing_times(
    spec: ScenarioSpec,
    change: ChangeScenario,
    make_solver: Callable[[], Callable],
    thresholds: Sequence[float],
    t_max: int,
) -> np.ndarray:
    """
    First time the CUSUM path reaches each threshold on one stream (0 if it
    never does within t_max). One pass serves the whole threshold grid.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    solver = make_solver()
    stream = iter_stream(spec.data_model, change)
    times = np.zeros(thresholds.size, dtype=int)
    V, t = 0.0, 0
    top = thresholds.max()
    size = FIRST_BLOCK
    while t < t_max and V < top:
        block = min(size, t_max - t)
        size = min(2 * size, STEP_BLOCK)
        X = np.array(list(islice(stream, block)))
        path = V + np.cumsum(np.maximum(block_evidence(solver, X), 0.0))
        hits = first_crossings(path, thresholds)
        fresh = (times == 0) & (hits > 0)
        times[fresh] = t + hits[fresh]
        V, t = float(path[-1]), t + block
    return times


def _map_runs(fn: Callable[[int], np.ndarray], seeds: Sequence[int], threads: Optional[int]) -> np.ndarray:
    workers = worker_count(threads)
    if workers == 1:
        return np.array([fn(seed) for seed in seeds])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(fn, seeds)))


def calibrate_alpha(spec: ScenarioSpec, cfg: BenchConfig) -> float:
    if cfg.alpha is not None:
        return cfg.alpha
    prefix = generate_stream(spec.data_model, ChangeScenario(theta_gen=spec.theta_gen, seed=cfg.seed_base), cfg.calibration_steps)
    alpha = estimate_alpha(prefix, cfg.alpha_safety)
    logger.info(f"Estimated alpha = {alpha:.6g} from {cfg.calibration_steps} calibration steps")
    return alpha


def monte_carlo_fap(cfg: BenchConfig) -> pd.DataFrame:
    """
    Mean run length without a change, per threshold.

    Censored runs count as t_max and are reported in the ``censored`` column,
    so a row with censored runs is a lower bound on the false-alarm period.
    """
    spec = scenario_for(cfg)
    sigma2 = spec.model.sigma2
    if cfg.h_grid is not None:
        thresholds = np.asarray(cfg.h_grid, dtype=float)
        gammas = np.full(thresholds.size, np.nan)
    else:
        alpha = calibrate_alpha(spec, cfg)
        gammas = np.asarray(cfg.gammas, dtype=float)
        thresholds = np.array([threshold_for_fap(alpha, sigma2, g) for g in gammas])
    make_solver = evidence_factory(spec, cfg)

    def one_run(seed: int) -> np.ndarray:
        change = ChangeScenario(theta_gen=spec.theta_gen, seed=seed)
        return crossing_times(spec, change, make_solver, thresholds, cfg.t_max)

    times = _map_runs(one_run, run_seeds(cfg.seed_base, cfg.runs), cfg.threads)
    censored = (times == 0).sum(axis=0)
    lengths = np.where(times == 0, cfg.t_max, times)
    table = pd.DataFrame(
        {
            "h": thresholds,
            "gamma": gammas,
            "mean_fap": lengths.mean(axis=0),
            "censored": censored,
            "runs": cfg.runs,
        },
        columns=FAP_COLUMNS,
    )
    if censored.any():
        logger.warning(f"{int(censored.sum())} censored run/threshold pairs at t_max={cfg.t_max}")
    logger.info(f"FAP bench on {spec.name}: {cfg.runs} runs, {thresholds.size} thresholds")
    return table


def delays(
    spec: ScenarioSpec, cfg: BenchConfig, thresholds: Sequence[float], t_a: int, stream: int = 0
) -> np.ndarray:
    """
    Delay Gamma - t_a + 1 per run and threshold; NaN where the run raised an
    alarm before t_a or never fired.
    """
    make_solver = evidence_factory(spec, cfg)

    def one_run(seed: int) -> np.ndarray:
        return crossing_times(spec, spec.change(seed, t_a=t_a), make_solver, thresholds, cfg.t_max)

    times = _map_runs(one_run, run_seeds(cfg.seed_base, cfg.runs, stream), cfg.threads).astype(float)
    valid = times >= t_a
    return np.where(valid, times - t_a + 1, np.nan)


def monte_carlo_add(cfg: BenchConfig) -> pd.DataFrame:
    """Mean detection delay per threshold next to the bound 2 h sigma2 / rho_L^2."""
    spec = scenario_for(cfg)
    if spec.injection is None:
        raise ValueError(f"scenario {spec.name} has no change to detect")
    t_a = cfg.t_a or 1
    thresholds = np.asarray(cfg.h_grid if cfg.h_grid is not None else DEFAULT_ADD_H, dtype=float)
    delay = delays(spec, cfg, thresholds, t_a)
    counted = (~np.isnan(delay)).sum(axis=0)
    if np.any(counted < cfg.runs):
        logger.warning(f"{int(cfg.runs * thresholds.size - counted.sum())} run/threshold pairs fired early or never")
    with np.errstate(invalid="ignore"):
        means = np.where(counted > 0, np.nansum(delay, axis=0) / np.maximum(counted, 1), np.nan)
    bounds = [add_upper_bound(h, spec.model.sigma2, spec.evidence.rho_L) for h in thresholds]
    logger.info(f"ADD bench on {spec.name}: {cfg.runs} runs, t_a={t_a}")
    return pd.DataFrame(
        {"h": thresholds, "mean_add": means, "bound": bounds, "runs": counted}, columns=ADD_COLUMNS
    )


def equalizer_check(cfg: BenchConfig, level: float = KS_LEVEL) -> pd.DataFrame:
    """
    Two-sample Kolmogorov-Smirnov test of delays for the two change times in
    ``cfg.t_a_pair`` at the first threshold of the grid.
    """
    spec = scenario_for(cfg)
    h = cfg.h_grid[0] if cfg.h_grid else DEFAULT_ADD_H[0]
    first, second = cfg.t_a_pair
    a = delays(spec, cfg, [h], first, stream=first)[:, 0]
    b = delays(spec, cfg, [h], second, stream=second)[:, 0]
    a, b = a[~np.isnan(a)], b[~np.isnan(b)]
    result = scipy.stats.ks_2samp(a, b)
    passed = bool(result.pvalue >= level)
    logger.info(f"Equalizer KS test t_a={first} vs {second}: D={result.statistic:.4f}, p={result.pvalue:.4g}")
    return pd.DataFrame(
        [[first, second, min(a.size, b.size), float(result.statistic), float(result.pvalue), passed]],
        columns=EQUALIZER_COLUMNS,
    )


def paired_metrics(cfg: BenchConfig) -> List[DelayMetrics]:
    """For each gamma target: the threshold it implies, then measured FAP and ADD at that threshold."""
    spec = scenario_for(cfg)
    alpha = calibrate_alpha(spec, cfg)
    gammas = list(cfg.gammas)
    grid = [threshold_for_fap(alpha, spec.model.sigma2, g) for g in gammas]
    fixed = cfg.model_copy(update={"h_grid": grid, "alpha": alpha})
    fap = monte_carlo_fap(fixed)
    add = monte_carlo_add(fixed)
    out = []
    for gamma, fap_row, add_row in zip(gammas, fap.itertuples(), add.itertuples()):
        if math.isnan(add_row.mean_add):
            logger.warning(f"No detections at gamma={gamma}; skipping")
            continue
        out.append(
            DelayMetrics(fap=fap_row.mean_fap, add=add_row.mean_add, gamma=gamma, alpha=alpha, h=fap_row.h)
        )
    return out


def operating_curve(cfg: BenchConfig) -> pd.DataFrame:
    """
    FAP/ADD operating curve: one row per gamma target that produced detections.

    ``fap_ratio`` is the measured false-alarm period over its target; values at
    or above 1 mean the threshold formula held.
    """
    metrics = paired_metrics(cfg)
    if not metrics:
        logger.warning("No gamma target produced detections; the curve is empty")
        return empty_table(CURVE_COLUMNS)
    return pd.DataFrame(
        [(m.gamma, m.h, m.alpha, m.fap, m.add, m.fap / m.gamma) for m in metrics],
        columns=CURVE_COLUMNS,
    )


def _timed(fn: Callable[[], object]) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def runtime_scaling(cfg: BenchConfig) -> pd.DataFrame:
    """
    Solver wall time per evidence value on random systems of growing M.

    Stream generation is excluded. The relaxed solver is timed one instance at a
    time (batch 1) and on a whole stack (batch T). Exact cells above
    ``cfg.exact_cap`` are skipped and reported as NaN. The relaxed solver runs
    without conic polishing so the cells time the first-order method alone.
    """
    schedule = SolverSchedule.geometric(cfg.schedule.model_copy(update={"shortcut": False, "polish": False}))
    T = cfg.batch
    rows: List[Tuple] = []
    for M in cfg.M_grid:
        spec = random_system(M, seed=cfg.seed_base, t_a=1).with_sigma2(cfg.sigma2)
        relaxed = RelaxedEvidence(spec.model, spec.sets, spec.evidence, schedule)
        stacks = [
            generate_stream(spec.data_model, spec.change(seed, t_a=1), T)
            for seed in run_seeds(cfg.seed_base, cfg.trials, stream=M)
        ]
        relaxed.batch(stacks[0][:2])

        serial = sum(_timed(lambda X=X: [relaxed.batch(x[None, :]) for x in X]) for X in stacks)
        batched = sum(_timed(lambda X=X: relaxed.batch(X)) for X in stacks)
        n = cfg.trials * T
        rows.append((M, "relaxed", 1, 1e3 * serial / n, n / serial))
        rows.append((M, "relaxed", T, 1e3 * batched / n, n / batched))

        if M <= cfg.exact_cap:
            exact = ExactEvidence(spec.model, spec.sets, spec.evidence, cfg.exact)
            exact(stacks[0][0])
            points = [X[0] for X in stacks]
            elapsed = sum(_timed(lambda x=x: exact(x)) for x in points)
            rows.append((M, "exact", 1, 1e3 * elapsed / len(points), len(points) / elapsed))
        else:
            logger.info(f"Skipping exact solver at M={M} (cap {cfg.exact_cap})")
            rows.append((M, "exact", 1, math.nan, math.nan))
        logger.info(f"Scaling cell M={M} done")
    return pd.DataFrame(rows, columns=SCALE_COLUMNS)


def report(tables: Dict[str, pd.DataFrame], out: Union[str, Path]) -> List[Path]:
    """
    Write ``<name>.csv`` and a long-format ``<name>_long.csv`` per table.

    The first column of each table identifies a row in the long format. Files
    hold no timestamps, so equal inputs give byte-identical output.
    """
    out = Path(out)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(out, e) from e
    for name, table in tables.items():
        wide = out / f"{name}.csv"
        long = out / f"{name}_long.csv"
        key = list(table.columns[:1])
        if name == "scale":
            key = ["M", "solver", "batch"]
        melted = table.melt(id_vars=key, var_name="metric", value_name="value")
        for path, frame in ((wide, table), (long, melted)):
            try:
                frame.to_csv(path, index=False, float_format="%.10g")
            except OSError as e:
                logger.error(f"Could not write {path}: {e}")
                raise ReportError(path, e) from e
            written.append(path)
        logger.info(f"Wrote {name} table ({len(table)} rows) to {wide}")
    return written


def empty_table(columns: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame(columns=list(columns))
