"""
Command-line front end.

Usage:
    rosguard detect --scenario ieee14 --gamma 100 --t-a 20 --out run.csv
    rosguard gen-data --scenario random:8 --T 500 --out stream.csv
    rosguard bench-fap --config bench.json --runs 100 --out results/
    rosguard bench-add --scenario ieee14 --h 5 10 20 --out results/
    rosguard bench-curve --scenario ieee14 --gamma 50 100 200 --t-a 1 --out results/
    rosguard bench-scale --out results/
    rosguard verify
"""

import argparse
import importlib.util
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from .bench import (
    equalizer_check,
    monte_carlo_add,
    monte_carlo_fap,
    operating_curve,
    report,
    runtime_scaling,
)
from .config import BenchConfig, DetectorConfig, ExactSolverConfig, ScheduleConfig
from .detector import estimate_alpha, run, threshold_for_fap, write_run_log
from .exceptions import RosGuardError
from .gllr_exact import ExactEvidence
from .gllr_relaxed import RelaxedEvidence
from .model import ChangeScenario, generate_stream, iter_stream, write_matrix, write_stream
from .scenarios import load_scenario

logger = logging.getLogger(__name__)


class RosGuardCLI:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.package_root = Path(__file__).parent

    def load_config(self) -> Dict[str, Any]:
        if not getattr(self.args, "config", None):
            return {}
        with open(self.args.config, "r", encoding="utf-8") as f:
            return json.load(f)

    def bench_config(self) -> BenchConfig:
        """Config file values, then command-line flags on top."""
        raw = self.load_config()
        a = self.args
        overrides = {
            "scenario": a.scenario,
            "solver": a.solver,
            "runs": a.runs,
            "seed_base": a.seed,
            "t_max": a.t_max,
            "sigma2": a.sigma2,
            "threads": a.threads,
            "out": a.out,
            "h_grid": getattr(a, "h", None),
            "gammas": getattr(a, "gamma", None),
            "t_a": getattr(a, "t_a", None),
        }
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return BenchConfig.from_config(raw)

    def detect(self) -> int:
        a = self.args
        spec = load_scenario(a.scenario or "ieee14", sigma2=a.sigma2, seed=a.seed or 0)
        detector_cfg = DetectorConfig.from_config(
            {k: v for k, v in {"h": a.h, "gamma": a.gamma, "t_max": a.t_max}.items() if v is not None}
        )
        h = detector_cfg.h
        if h is None:
            alpha = detector_cfg.alpha
            if alpha is None:
                prefix = generate_stream(spec.data_model, ChangeScenario(theta_gen=spec.theta_gen, seed=(a.seed or 0) + 1), detector_cfg.calibration_steps)
                alpha = estimate_alpha(prefix, detector_cfg.alpha_safety)
            h = threshold_for_fap(alpha, spec.model.sigma2, detector_cfg.gamma)
            print(f"Threshold h = {h:.6g} (alpha = {alpha:.6g}, gamma = {detector_cfg.gamma:g})")
        if a.solver == "exact":
            solver = ExactEvidence(spec.model, spec.sets, spec.evidence, ExactSolverConfig())
        else:
            solver = RelaxedEvidence(spec.model, spec.sets, spec.evidence, ScheduleConfig())
        change = spec.change(a.seed or 0, t_a=a.t_a)
        result = run(iter_stream(spec.data_model, change), solver, h, detector_cfg.t_max)
        if result.censored:
            print(f"No alarm within {result.t_max} steps")
        else:
            print(f"Alarm at t = {result.stopping_time}")
        if a.out:
            write_run_log(result, a.out)
            print(f"✓ Wrote run log to {a.out}")
        return 0

    def gen_data(self) -> int:
        a = self.args
        spec = load_scenario(a.scenario or "ieee14", sigma2=a.sigma2, seed=a.seed or 0)
        stream = generate_stream(spec.data_model, spec.change(a.seed or 0, t_a=a.t_a), a.T)
        out = Path(a.out or "stream.csv")
        write_stream(stream, out)
        if a.matrix_out:
            write_matrix(a.matrix_out, spec.model.H)
            print(f"✓ Wrote nominal H to {a.matrix_out}")
        print(f"✓ Wrote {a.T} observations to {out}")
        return 0

    def bench_fap(self) -> int:
        cfg = self.bench_config()
        table = monte_carlo_fap(cfg)
        print(table.to_string(index=False))
        self._report({"fap": table}, cfg)
        return 0

    def bench_add(self) -> int:
        cfg = self.bench_config()
        tables = {"add": monte_carlo_add(cfg)}
        if self.args.equalizer:
            tables["equalizer"] = equalizer_check(cfg)
        for table in tables.values():
            print(table.to_string(index=False))
        self._report(tables, cfg)
        return 0

    def bench_curve(self) -> int:
        cfg = self.bench_config()
        table = operating_curve(cfg)
        print(table.to_string(index=False))
        self._report({"curve": table}, cfg)
        return 0

    def bench_scale(self) -> int:
        cfg = self.bench_config()
        table = runtime_scaling(cfg)
        print(table.to_string(index=False))
        self._report({"scale": table}, cfg)
        return 0

    def _report(self, tables, cfg: BenchConfig) -> None:
        if cfg.out:
            for path in report(tables, cfg.out):
                print(f"✓ Wrote {path}")

    def verify(self) -> int:
        """Run the package test suite with pytest, or unittest when pytest is missing."""
        tests = self.package_root / "tests"
        if importlib.util.find_spec("pytest") is not None:
            cmd = [sys.executable, "-m", "pytest", str(tests)]
        else:
            cmd = [sys.executable, "-m", "unittest", "discover", "-s", str(tests), "-t", str(self.package_root.parent), "-p", "test*.py"]
        print(f"Running: {' '.join(cmd)}")
        return subprocess.run(cmd).returncode

    def dispatch(self) -> int:
        handler = {
            "detect": self.detect,
            "gen-data": self.gen_data,
            "bench-fap": self.bench_fap,
            "bench-add": self.bench_add,
            "bench-curve": self.bench_curve,
            "bench-scale": self.bench_scale,
            "verify": self.verify,
        }[self.args.command]
        try:
            return handler()
        except ValidationError as e:
            print(f"❌ Invalid configuration: {e}")
            return 2
        except (RosGuardError, OSError, ValueError) as e:
            logger.error(f"{self.args.command} failed: {e}")
            print(f"❌ {self.args.command} failed: {e}")
            return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rosguard", description="Robust CUSUM change detection")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (DEBUG, INFO, ...)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", help="ieee14[:kind], random:<M>, mimo, or a JSON scenario file")
        p.add_argument("--solver", choices=["exact", "relaxed"], help="Evidence solver")
        p.add_argument("--seed", type=int, help="Seed (base seed for benches)")
        p.add_argument("--sigma2", type=float, help="Override the scenario noise variance")
        p.add_argument("--t-max", dest="t_max", type=int, help="Censoring horizon")
        p.add_argument("--out", help="Output file (detect, gen-data) or directory (benches)")

    p = sub.add_parser("detect", help="Run the detector on one generated stream")
    common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--h", type=float, help="Threshold")
    group.add_argument("--gamma", type=float, help="False-alarm period target")
    p.add_argument("--t-a", dest="t_a", type=int, help="Change time (default: no change)")

    p = sub.add_parser("gen-data", help="Write a generated stream as CSV")
    common(p)
    p.add_argument("--T", type=int, default=1000, help="Number of observations")
    p.add_argument("--t-a", dest="t_a", type=int, help="Change time (default: no change)")
    p.add_argument("--matrix-out", help="Also write the nominal H in 'M N' text format")

    for name, text in (
        ("bench-fap", "False-alarm period table"),
        ("bench-add", "Detection delay table"),
        ("bench-curve", "FAP/ADD operating curve over gamma targets"),
        ("bench-scale", "Runtime scaling table"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--config", help="JSON file with BenchConfig fields")
        p.add_argument("--runs", type=int, help="Monte Carlo runs")
        p.add_argument("--threads", type=int, help="Worker threads (default: ROSGUARD_THREADS or 1)")
        if name in ("bench-fap", "bench-add"):
            p.add_argument("--h", type=float, nargs="+", help="Threshold grid")
        if name in ("bench-fap", "bench-curve"):
            p.add_argument("--gamma", type=float, nargs="+", help="False-alarm period targets")
        if name in ("bench-add", "bench-curve"):
            p.add_argument("--t-a", dest="t_a", type=int, help="Change time")
        if name == "bench-add":
            p.add_argument("--equalizer", action="store_true", help="Also run the change-time KS test")

    sub.add_parser("verify", help="Run the test suite")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    return RosGuardCLI(args).dispatch()


if __name__ == "__main__":
    sys.exit(main())
