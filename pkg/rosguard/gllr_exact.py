"""
Exact per-step evidence.

The evidence problem minimizes

    F(mu) = (||mu||^2 - 2 mu^T x_tilde) / (2 sigma2)

over vectors whose nonzero entries satisfy rho_L <= |mu_m| <= rho_U and that
pass every robust column constraint max_{h in S_i} |h^T mu| <= epsilon_i.
Fixing the sign pattern s in {-1, 0, +1}^M (the binaries u and b) leaves a
convex QP, so the global minimum is found either by visiting all 3^M patterns
or by branch-and-bound over the conic relaxation in ``gllr_relaxed``.
"""

import enum
import heapq
import itertools
import logging
import math
import threading
from typing import Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
from pydantic import Field, model_validator

from .config import ArrayModel, EvidenceConfig, ExactSolverConfig, FloatArray
from .exceptions import DimMismatch, SolverFailure, TooLarge
from .model import SystemModel
from .uncertainty import (
    PolyhedralSet,
    RobustConstraintData,
    UncertaintySet,
    epsilon_guideline,
    robust_violation,
)

logger = logging.getLogger(__name__)

ACCEPTED_STATUSES = (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
INFEASIBLE_STATUSES = (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE)


class SolveStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    BOUND_ONLY = "BoundOnly"
    ITER_LIMIT = "IterLimit"
    INFEASIBLE = "Infeasible"


class EvidenceProblem(ArrayModel):
    """One time step's robust evidence instance."""

    x_tilde: FloatArray
    rho_L: float = Field(gt=0)
    rho_U: float = Field(gt=0)
    sigma2: float = Field(gt=0)
    constraints: List[RobustConstraintData]

    @model_validator(mode="after")
    def _consistent(self):
        if self.rho_U < self.rho_L:
            raise ValueError(f"rho_U ({self.rho_U}) must be >= rho_L ({self.rho_L})")
        if self.x_tilde.ndim != 1:
            raise DimMismatch("x_tilde", "a vector", self.x_tilde.shape)
        for i, con in enumerate(self.constraints):
            if con.uncertainty_set.dim != self.M:
                raise DimMismatch(f"uncertainty set of column {i}", self.M, con.uncertainty_set.dim)
        return self

    @property
    def M(self) -> int:
        return self.x_tilde.shape[0]

    @property
    def N(self) -> int:
        return len(self.constraints)

    @property
    def scale(self) -> float:
        return 1.0 / (2.0 * self.sigma2)

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([con.epsilon for con in self.constraints], dtype=float)

    @property
    def structure_key(self) -> tuple:
        return (self.M,) + tuple(con.uncertainty_set.structure_key for con in self.constraints)

    def objective(self, mu) -> float:
        """F(mu), written as ||mu - x||^2 - ||x||^2 so it never drops below -||x||^2."""
        mu = np.asarray(mu, dtype=float)
        x = self.x_tilde
        return self.scale * (float(((mu - x) ** 2).sum()) - float((x * x).sum()))

    def upper_bound(self) -> float:
        """||x_tilde||^2 / (2 sigma2), the largest value the evidence can take."""
        return self.scale * float((self.x_tilde**2).sum())

    def with_x(self, x_tilde) -> "EvidenceProblem":
        return self.model_copy(update={"x_tilde": np.asarray(x_tilde, dtype=float)})


class Solution(ArrayModel):
    """
    Minimizer of one evidence problem.

    ``u`` and ``b`` are binary for exact solutions and lie in [0, 1] for relaxed
    ones. ``duals[i]`` stacks the certificates for directions +mu and -mu of
    column i (shape (2, R_i), empty for sets without dual blocks).
    """

    mu_plus: FloatArray
    mu_minus: FloatArray
    u: FloatArray
    b: FloatArray
    phi: FloatArray
    duals: List[FloatArray] = Field(default_factory=list)
    objective: float
    bound: float
    status: SolveStatus
    nodes: int = 0

    @property
    def mu(self) -> np.ndarray:
        return self.mu_plus - self.mu_minus

    @property
    def v_t(self) -> float:
        return max(0.0, -self.objective)

    @property
    def pattern(self) -> np.ndarray:
        return sign_pattern(self.mu)

    def is_integral(self, int_tol: float = 1e-6) -> bool:
        for z in (self.u, self.b):
            if np.any(np.minimum(np.abs(z), np.abs(1.0 - z)) > int_tol):
                return False
        return True


def sign_pattern(mu) -> np.ndarray:
    return np.sign(np.asarray(mu, dtype=float)).astype(np.int8)


def resolve_constraints(
    model: SystemModel, sets: Sequence, cfg: EvidenceConfig
) -> List[RobustConstraintData]:
    """
    Pair every column's set with its slack and nominal column.

    Entries of ``sets`` may be bare uncertainty sets or ready
    ``RobustConstraintData``; bare sets take their slack from ``cfg.epsilon`` or,
    when that is unset, from the diameter guideline at rho_U.
    """
    if len(sets) != model.N:
        raise DimMismatch("uncertainty sets", model.N, len(sets))
    eps = cfg.epsilon
    if isinstance(eps, list) and len(eps) != model.N:
        raise DimMismatch("epsilon list", model.N, len(eps))
    out = []
    for i, item in enumerate(sets):
        if isinstance(item, RobustConstraintData):
            out.append(item)
            continue
        if not isinstance(item, UncertaintySet):
            raise TypeError(f"column {i}: expected an uncertainty set, got {type(item).__name__}")
        if eps is None:
            value = epsilon_guideline(item, cfg.rho_U, model.M)
        elif isinstance(eps, list):
            value = eps[i]
        else:
            value = eps
        column = model.H[:, i]
        if item.dim == model.M and item.contains(column, tol=1e-7):
            nominal = column
        else:
            logger.debug(f"Column {i} of H lies outside its uncertainty set; the set center stands in as nominal")
            nominal = None
        out.append(RobustConstraintData(epsilon=value, uncertainty_set=item, nominal=nominal))
    return out


def build_problem(model: SystemModel, sets: Sequence, x, cfg: EvidenceConfig) -> EvidenceProblem:
    """Project the observation and assemble the evidence problem for it."""
    return EvidenceProblem(
        x_tilde=model.residual(x),
        rho_L=cfg.rho_L,
        rho_U=cfg.rho_U,
        sigma2=model.sigma2,
        constraints=resolve_constraints(model, sets, cfg),
    )


_local = threading.local()


def thread_cache(name: str) -> Dict:
    """Per-thread dictionary of compiled cvxpy programs."""
    cache = getattr(_local, name, None)
    if cache is None:
        cache = {}
        setattr(_local, name, cache)
    return cache


def solve_program(problem: cp.Problem, solver: str, what: str) -> bool:
    """
    Run the conic backend. Returns False when the program is infeasible.

    Raises:
        SolverFailure: For any status other than (inaccurately) optimal or infeasible.
    """
    try:
        problem.solve(solver=solver)
    except cp.error.SolverError as e:
        logger.error(f"{what}: {solver} failed: {e}")
        raise SolverFailure(f"{what}: {solver} failed: {e}") from e
    if problem.status in INFEASIBLE_STATUSES:
        return False
    if problem.status not in ACCEPTED_STATUSES:
        raise SolverFailure(f"{what}: {solver} returned status {problem.status}")
    if problem.status == cp.OPTIMAL_INACCURATE:
        logger.warning(f"{what}: {solver} reported an inaccurate solution")
    return True


class PatternProgram:
    """Convex QP for a fixed sign pattern: box bounds lo <= mu <= hi plus robust rows."""

    def __init__(self, prob: EvidenceProblem, solver: str):
        M, N = prob.M, prob.N
        self.solver = solver
        self.mu = cp.Variable(M)
        self.x_tilde = cp.Parameter(M)
        self.lo = cp.Parameter(M)
        self.hi = cp.Parameter(M)
        self.eps = cp.Parameter(N, nonneg=True)
        rows = [self.mu >= self.lo, self.mu <= self.hi]
        for i, con in enumerate(prob.constraints):
            robust, _ = con.uncertainty_set.robust_rows(self.mu, self.eps[i])
            rows += robust
        objective = cp.sum_squares(self.mu) - 2 * self.x_tilde @ self.mu
        self.problem = cp.Problem(cp.Minimize(objective), rows)

    @classmethod
    def cached(cls, prob: EvidenceProblem, solver: str) -> "PatternProgram":
        cache = thread_cache("pattern_programs")
        key = (solver, prob.structure_key)
        if key not in cache:
            cache[key] = cls(prob, solver)
        return cache[key]

    def solve(self, prob: EvidenceProblem, lo, hi) -> Optional[np.ndarray]:
        self.x_tilde.value = prob.x_tilde
        self.lo.value = lo
        self.hi.value = hi
        self.eps.value = prob.epsilons
        if not solve_program(self.problem, self.solver, "pattern QP"):
            return None
        return np.clip(self.mu.value, lo, hi)


def pattern_box(prob: EvidenceProblem, pattern) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(pattern)
    lo = np.where(s > 0, prob.rho_L, np.where(s < 0, -prob.rho_U, 0.0))
    hi = np.where(s > 0, prob.rho_U, np.where(s < 0, -prob.rho_L, 0.0))
    return lo, hi


class PatternEvaluator:
    """Exact minimum of the evidence problem for one sign pattern, memoized."""

    def __init__(self, prob: EvidenceProblem, cfg: ExactSolverConfig):
        self.prob = prob
        self.cfg = cfg
        self._program: Optional[PatternProgram] = None
        self._seen: Dict[bytes, Optional[Tuple[float, np.ndarray]]] = {}
        self.qp_solves = 0

    def lower_bound(self, pattern) -> float:
        lo, hi = pattern_box(self.prob, pattern)
        return self.prob.objective(np.clip(self.prob.x_tilde, lo, hi))

    def __call__(self, pattern) -> Optional[Tuple[float, np.ndarray]]:
        s = np.asarray(pattern, dtype=np.int8)
        key = s.tobytes()
        if key not in self._seen:
            self._seen[key] = self._evaluate(s)
        return self._seen[key]

    def _evaluate(self, s: np.ndarray) -> Optional[Tuple[float, np.ndarray]]:
        prob = self.prob
        lo, hi = pattern_box(prob, s)
        mu = np.clip(prob.x_tilde, lo, hi)
        # the clipped point minimizes the separable objective over the pattern box
        if np.all(robust_violation(prob.constraints, mu) <= 0.0):
            return prob.objective(mu), mu
        if not s.any():
            return None
        if self._program is None:
            self._program = PatternProgram.cached(prob, self.cfg.conic_solver)
        self.qp_solves += 1
        mu = self._program.solve(prob, lo, hi)
        if mu is None:
            return None
        return prob.objective(mu), mu


def integral_solution(
    prob: EvidenceProblem,
    mu,
    bound: float,
    status: SolveStatus,
    nodes: int = 0,
) -> Solution:
    mu = np.asarray(mu, dtype=float)
    duals = []
    for con in prob.constraints:
        s = con.uncertainty_set
        if isinstance(s, PolyhedralSet):
            duals.append(np.stack([s.optimal_dual(mu), s.optimal_dual(-mu)]))
        else:
            duals.append(np.zeros((2, 0)))
    return Solution(
        mu_plus=np.maximum(mu, 0.0),
        mu_minus=np.maximum(-mu, 0.0),
        u=(mu != 0.0).astype(float),
        b=(mu < 0.0).astype(float),
        phi=mu * mu,
        duals=duals,
        objective=prob.objective(mu),
        bound=bound,
        status=status,
        nodes=nodes,
    )


def all_patterns(M: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=M)), dtype=np.int8)


def solve_bruteforce(prob: EvidenceProblem, cfg: Optional[ExactSolverConfig] = None) -> Solution:
    """
    Global minimum over all 3^M sign patterns.

    Patterns are visited in order of their box lower bound and the scan stops
    once that bound reaches the incumbent, so most patterns are never solved.

    Raises:
        TooLarge: If M exceeds ``cfg.max_enumeration_dim``.
    """
    cfg = cfg or ExactSolverConfig()
    if prob.M > cfg.max_enumeration_dim:
        raise TooLarge(prob.M, cfg.max_enumeration_dim)
    patterns = all_patterns(prob.M)
    lo = np.where(patterns > 0, prob.rho_L, np.where(patterns < 0, -prob.rho_U, 0.0))
    hi = np.where(patterns > 0, prob.rho_U, np.where(patterns < 0, -prob.rho_L, 0.0))
    clipped = np.clip(prob.x_tilde, lo, hi)
    x = prob.x_tilde
    bounds = prob.scale * (((clipped - x) ** 2).sum(axis=1) - float((x * x).sum()))
    order = np.argsort(bounds, kind="stable")

    evaluate = PatternEvaluator(prob, cfg)
    best, best_mu = 0.0, np.zeros(prob.M)
    visited = 0
    for idx in order:
        if bounds[idx] >= best:
            break
        visited += 1
        result = evaluate(patterns[idx])
        if result is not None and result[0] < best:
            best, best_mu = result
    logger.debug(
        f"Brute force visited {visited}/{len(patterns)} patterns, {evaluate.qp_solves} QP solves"
    )
    return integral_solution(prob, best_mu, bound=prob.objective(best_mu), status=SolveStatus.OPTIMAL)


def zero_is_optimal(prob: EvidenceProblem) -> bool:
    """rho_L |mu| - 2 x mu >= 0 on every coordinate, so mu = 0 wins."""
    return bool(np.all(2.0 * np.abs(prob.x_tilde) <= prob.rho_L))


def _rounded_pattern(node_sol: Solution, u_lo, u_hi, b_lo, b_hi, x_tilde) -> np.ndarray:
    mu, u = node_sol.mu, node_sol.u
    s = np.where(u >= 0.5, np.sign(mu), 0.0)
    fixed_on = u_lo >= 1.0
    fallback = np.where(np.sign(mu) != 0, np.sign(mu), np.where(x_tilde < 0, -1.0, 1.0))
    signed = np.where(b_lo >= 1.0, -1.0, np.where(b_hi <= 0.0, 1.0, fallback))
    s = np.where(fixed_on, signed, s)
    s = np.where(u_hi <= 0.0, 0.0, s)
    return s.astype(np.int8)


def _branch_choice(
    node_sol: Solution, u_lo, u_hi, b_lo, b_hi, x_tilde, int_tol: float
) -> Tuple[Optional[str], int]:
    u, b = node_sol.u, node_sol.b
    frac_u = np.minimum(u, 1.0 - u)
    free_u = (u_lo < u_hi) & (frac_u > int_tol)
    if free_u.any():
        # most fractional first, ties broken by the larger |x_tilde|
        keys = np.where(free_u, np.round(frac_u, 9), -np.inf)
        best = keys.max()
        tied = np.flatnonzero(keys == best)
        return "u", int(tied[np.argmax(np.abs(x_tilde[tied]))])
    frac_b = np.minimum(b, 1.0 - b)
    free_b = (u >= 1.0 - int_tol) & (b_lo < b_hi) & (frac_b > int_tol)
    if free_b.any():
        keys = np.where(free_b, np.round(frac_b, 9), -np.inf)
        best = keys.max()
        tied = np.flatnonzero(keys == best)
        return "b", int(tied[np.argmax(np.abs(x_tilde[tied]))])
    return None, -1


def _first_unfixed(u_lo, u_hi, b_lo, b_hi, x_tilde) -> Tuple[Optional[str], int]:
    weight = np.abs(x_tilde)
    free_u = u_lo < u_hi
    if free_u.any():
        return "u", int(np.argmax(np.where(free_u, weight, -1.0)))
    free_b = (u_lo >= 1.0) & (b_lo < b_hi)
    if free_b.any():
        return "b", int(np.argmax(np.where(free_b, weight, -1.0)))
    return None, -1


def branch_and_bound(
    prob: EvidenceProblem,
    relax=None,
    gap_tol: Optional[float] = None,
    cfg: Optional[ExactSolverConfig] = None,
    initial_pattern=None,
) -> Solution:
    """
    Best-bound-first branch-and-bound on u (then b) over the conic relaxation.

    Args:
        prob (EvidenceProblem): The instance.
        relax: Relaxation handle with ``solve(prob, u_lo, u_hi, b_lo, b_hi)``
            returning a relaxed ``Solution`` or None when the node is infeasible.
            Defaults to ``SocpRelaxation`` with the configured perspective.
        gap_tol (float, optional): Absolute optimality gap. ``math.inf`` returns
            the root bound with status BoundOnly. Defaults to ``cfg.gap_tol`` or
            1e-6 * (1 + |incumbent|).
        cfg (ExactSolverConfig, optional): Tolerances and node budget.
        initial_pattern (optional): Sign pattern tried first as incumbent.

    Returns:
        Solution: Integral incumbent with its certified bound.
    """
    cfg = cfg or ExactSolverConfig()
    if gap_tol is None:
        gap_tol = cfg.gap_tol
    if relax is None:
        from .gllr_relaxed import SocpRelaxation

        relax = SocpRelaxation(perspective=cfg.perspective, solver=cfg.conic_solver)

    M = prob.M
    zeros, ones = np.zeros(M), np.ones(M)
    if gap_tol is not None and math.isinf(gap_tol):
        root = relax.solve(prob, zeros, ones, zeros, ones)
        return root.model_copy(update={"status": SolveStatus.BOUND_ONLY, "bound": root.objective, "nodes": 1})
    if zero_is_optimal(prob):
        return integral_solution(prob, zeros, bound=0.0, status=SolveStatus.OPTIMAL)

    def tolerance(incumbent: float) -> float:
        return gap_tol if gap_tol is not None else 1e-6 * (1.0 + abs(incumbent))

    evaluate = PatternEvaluator(prob, cfg)
    best, best_mu = 0.0, np.zeros(M)

    def offer(pattern) -> None:
        nonlocal best, best_mu
        result = evaluate(pattern)
        if result is not None and result[0] < best:
            best, best_mu = result

    if initial_pattern is not None:
        offer(np.asarray(initial_pattern, dtype=np.int8))

    counter = itertools.count()
    heap = [(-math.inf, next(counter), (zeros, ones, zeros, ones))]
    pruned_min = math.inf
    nodes = 0
    status = SolveStatus.OPTIMAL

    while heap:
        parent_bound, _, (u_lo, u_hi, b_lo, b_hi) = heap[0]
        if parent_bound >= best - tolerance(best):
            break
        if nodes >= cfg.node_limit:
            status = SolveStatus.ITER_LIMIT
            logger.warning(f"Branch-and-bound hit the node budget ({cfg.node_limit})")
            break
        heapq.heappop(heap)
        node = relax.solve(prob, u_lo, u_hi, b_lo, b_hi)
        nodes += 1
        if node is None:
            continue
        bound = max(node.objective, parent_bound)
        kind, m = _branch_choice(node, u_lo, u_hi, b_lo, b_hi, prob.x_tilde, cfg.int_tol)
        if kind is None:
            # integral relaxation point: its pattern QP closes the node
            u, b = node.u, node.b
            pattern = np.where(u >= 0.5, np.where(b >= 0.5, -1, 1), 0).astype(np.int8)
            result = evaluate(pattern)
            offer(pattern)
            if result is not None and result[0] <= bound + tolerance(best):
                continue
            kind, m = _first_unfixed(u_lo, u_hi, b_lo, b_hi, prob.x_tilde)
            if kind is None:
                continue
        if bound >= best - tolerance(best):
            pruned_min = min(pruned_min, bound)
            continue
        offer(_rounded_pattern(node, u_lo, u_hi, b_lo, b_hi, prob.x_tilde))
        if bound >= best - tolerance(best):
            pruned_min = min(pruned_min, bound)
            continue

        if kind == "u":
            off = (u_lo.copy(), u_hi.copy(), b_lo.copy(), b_hi.copy())
            off[1][m] = 0.0
            off[3][m] = 0.0
            on = (u_lo.copy(), u_hi.copy(), b_lo.copy(), b_hi.copy())
            on[0][m] = 1.0
            children = (off, on)
        else:
            pos = (u_lo.copy(), u_hi.copy(), b_lo.copy(), b_hi.copy())
            pos[0][m] = 1.0
            pos[3][m] = 0.0
            neg = (u_lo.copy(), u_hi.copy(), b_lo.copy(), b_hi.copy())
            neg[0][m] = 1.0
            neg[2][m] = 1.0
            children = (pos, neg)
        for child in children:
            heapq.heappush(heap, (bound, next(counter), child))
        logger.debug(f"Node {nodes}: bound {bound:.6g}, incumbent {best:.6g}, branch {kind}[{m}]")

    open_min = min((entry[0] for entry in heap), default=math.inf)
    final_bound = min(best, pruned_min, open_min)
    logger.debug(
        f"Branch-and-bound finished: {nodes} nodes, {evaluate.qp_solves} pattern QPs, "
        f"objective {best:.6g}, bound {final_bound:.6g}"
    )
    return integral_solution(prob, best_mu, bound=final_bound, status=status, nodes=nodes)


def v_t_exact(prob: EvidenceProblem, solver_cfg: Optional[ExactSolverConfig] = None) -> float:
    """Evidence -min F, clamped at 0 against round-off."""
    solver_cfg = solver_cfg or ExactSolverConfig()
    if solver_cfg.method == "bruteforce":
        sol = solve_bruteforce(prob, solver_cfg)
    else:
        sol = branch_and_bound(prob, cfg=solver_cfg)
    return sol.v_t


def check_solution(
    prob: EvidenceProblem,
    sol: Solution,
    feas_tol: float = 1e-7,
    comp_tol: float = 1e-7,
    int_tol: float = 1e-6,
) -> List[str]:
    """
    Independent check of a solution against the evidence problem's constraints.

    Returns:
        List[str]: One message per violated condition; empty when the solution is valid.
    """
    problems = []
    mu_p, mu_m, u, b, phi = sol.mu_plus, sol.mu_minus, sol.u, sol.b, sol.phi
    mu = mu_p - mu_m
    M = prob.M
    for name, arr in (("mu_plus", mu_p), ("mu_minus", mu_m), ("u", u), ("b", b), ("phi", phi)):
        if arr.shape != (M,):
            problems.append(f"{name} has shape {arr.shape}, expected ({M},)")
    if problems:
        return problems

    for name, arr in (("mu_plus", mu_p), ("mu_minus", mu_m), ("phi", phi)):
        if arr.min() < -feas_tol:
            problems.append(f"{name} is negative ({arr.min():.3e})")
    for name, arr in (("u", u), ("b", b)):
        if arr.min() < -feas_tol or arr.max() > 1.0 + feas_tol:
            problems.append(f"{name} leaves [0, 1]")

    total = mu_p + mu_m
    if np.any(total < prob.rho_L * u - feas_tol):
        problems.append("rho_L * u <= mu_plus + mu_minus violated")
    if np.any(total > prob.rho_U * u + feas_tol):
        problems.append("mu_plus + mu_minus <= rho_U * u violated")
    if np.any(mu_p > prob.rho_U * (1.0 - b) + feas_tol):
        problems.append("mu_plus <= rho_U * (1 - b) violated")
    if np.any(mu_m > prob.rho_U * b + feas_tol):
        problems.append("mu_minus <= rho_U * b violated")

    # perspective row (mu_m)^2 <= phi_m u_m
    if np.any(mu * mu > phi * np.maximum(u, 0.0) + feas_tol * (1.0 + phi)):
        problems.append("perspective row mu^2 <= phi * u violated")

    worst = robust_violation(prob.constraints, mu)
    for i in np.flatnonzero(worst > feas_tol):
        problems.append(f"robust constraint of column {i} exceeded by {worst[i]:.3e}")

    for i, (con, p) in enumerate(zip(prob.constraints, sol.duals)):
        s = con.uncertainty_set
        if not isinstance(s, PolyhedralSet) or p.size == 0:
            continue
        for sign, block in ((1.0, p[0]), (-1.0, p[1])):
            if block.min() < -feas_tol:
                problems.append(f"dual block of column {i} has a negative entry")
            if np.abs(s.D.T @ block - sign * mu).max() > feas_tol:
                problems.append(f"dual block of column {i} violates D^T p = {'+' if sign > 0 else '-'}mu")
            if block @ s.d > con.epsilon + feas_tol:
                problems.append(f"dual block of column {i} exceeds epsilon")

    if sol.is_integral(int_tol):
        if np.any(np.minimum(mu_p, mu_m) > comp_tol):
            problems.append("complementarity min(mu_plus, mu_minus) violated")
        expected = prob.objective(mu)
    else:
        expected = prob.scale * float((phi - 2.0 * mu * prob.x_tilde).sum())
    if abs(sol.objective - expected) > 1e-6 * (1.0 + abs(expected)):
        problems.append(f"objective {sol.objective:.9g} differs from recomputed {expected:.9g}")
    if sol.status == SolveStatus.OPTIMAL and sol.bound > sol.objective + 1e-9:
        problems.append(f"bound {sol.bound:.9g} exceeds objective {sol.objective:.9g}")
    return problems


class ExactEvidence:
    """
    Evidence solver for one scenario, callable as ``x -> v_t``.

    The previous step's support is offered to branch-and-bound as its first
    incumbent.
    """

    def __init__(
        self,
        model: SystemModel,
        sets: Sequence,
        evidence: Optional[EvidenceConfig] = None,
        solver_cfg: Optional[ExactSolverConfig] = None,
    ):
        self.model = model
        self.evidence = evidence or EvidenceConfig()
        self.solver_cfg = solver_cfg or ExactSolverConfig()
        self.constraints = resolve_constraints(model, sets, self.evidence)
        self._previous: Optional[np.ndarray] = None
        self.last: Optional[Solution] = None

    def problem(self, x) -> EvidenceProblem:
        return EvidenceProblem(
            x_tilde=self.model.residual(x),
            rho_L=self.evidence.rho_L,
            rho_U=self.evidence.rho_U,
            sigma2=self.model.sigma2,
            constraints=self.constraints,
        )

    def solve(self, x) -> Solution:
        prob = self.problem(x)
        if self.solver_cfg.method == "bruteforce":
            sol = solve_bruteforce(prob, self.solver_cfg)
        else:
            sol = branch_and_bound(prob, cfg=self.solver_cfg, initial_pattern=self._previous)
        if sol.status != SolveStatus.BOUND_ONLY:
            self._previous = sol.pattern if np.any(sol.pattern) else None
        self.last = sol
        return sol

    def __call__(self, x) -> float:
        return self.solve(x).v_t

    def reset(self) -> None:
        self._previous = None
        self.last = None
