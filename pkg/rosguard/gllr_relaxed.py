"""
Continuous relaxations of the evidence problem.

``SocpRelaxation`` states the perspective relaxation (and the plain box
relaxation) as cvxpy programs; branch-and-bound uses it for node bounds.
``solve_lagrangian`` is the batched first-order solver: projected proximal
gradient on an augmented Lagrangian, with per-layer step sizes taken from a
``SolverSchedule``.

With the default split perspective, minimizing out (phi, u, b) per coordinate
leaves the separable envelope

    psi(mu) = max(mu^2, rho_L |mu|),    |mu| <= rho_U,

so the first-order solver iterates on mu alone and recovers the other
variables in closed form.

The reported relaxed evidence is minus a weak-duality lower bound on the
relaxation minimum, built from the solver's final multipliers and tightened
by ascent. It therefore never falls below the exact evidence. Instances whose
bound stays farther than ``certify_tol`` from the feasible value are re-solved
with the conic program when ``polish`` is on.
"""

import logging
from typing import Callable, Dict, List, Literal, Optional, Sequence, Union

import cvxpy as cp
import numpy as np
from pydantic import Field, model_validator

from .config import ArrayModel, EvidenceConfig, FloatArray, ScheduleConfig
from .exceptions import DimMismatch, Diverged, SolverFailure
from .gllr_exact import (
    EvidenceProblem,
    Solution,
    SolveStatus,
    resolve_constraints,
    solve_program,
    thread_cache,
)
from .model import SystemModel
from .uncertainty import PolyhedralSet, RobustConstraintData

logger = logging.getLogger(__name__)

Perspective = Literal["split", "single"]


class SocpInstance(ArrayModel):
    """An evidence problem viewed through its perspective relaxation."""

    problem: EvidenceProblem
    perspective: Perspective = "split"
    u_floor: float = Field(1e-9, gt=0)

    @property
    def M(self) -> int:
        return self.problem.M

    def envelope(self, mu) -> np.ndarray:
        """Smallest phi compatible with mu once u and b are minimized out."""
        mu = np.asarray(mu, dtype=float)
        if self.perspective == "single":
            return mu * mu
        return np.maximum(mu * mu, self.problem.rho_L * np.abs(mu))

    def lift(self, mu) -> Dict[str, np.ndarray]:
        """Closed-form (phi, u, b, mu_plus, mu_minus) for a reduced iterate mu."""
        return lift(np.asarray(mu, dtype=float), self.problem.rho_L, self.problem.rho_U, self.perspective)

    def perspective_ratio(self, mu, u) -> np.ndarray:
        """mu^2 / max(u, u_floor), with 0/0 taken as 0."""
        mu = np.asarray(mu, dtype=float)
        return np.where(mu == 0.0, 0.0, mu * mu / np.maximum(u, self.u_floor))

    def soc_rows(self, phi, u, mu_plus, mu_minus) -> np.ndarray:
        """||(mu+ - mu-, (phi - u)/2)|| - (phi + u)/2 per coordinate (<= 0 when satisfied)."""
        mu = np.asarray(mu_plus) - np.asarray(mu_minus)
        half_gap = 0.5 * (np.asarray(phi) - np.asarray(u))
        return np.sqrt(mu * mu + half_gap * half_gap) - 0.5 * (np.asarray(phi) + np.asarray(u))

    def objective(self, phi, mu) -> float:
        x = self.problem.x_tilde
        return self.problem.scale * float((np.asarray(phi) - 2.0 * np.asarray(mu) * x).sum())

    def constraint_values(self, phi, u, b, mu_plus, mu_minus) -> Dict[str, np.ndarray]:
        """The relaxed constraint rows g1..g6, each <= 0 at a feasible point."""
        prob = self.problem
        mu = np.asarray(mu_plus) - np.asarray(mu_minus)
        total = np.asarray(mu_plus) + np.asarray(mu_minus)
        robust = []
        for con in prob.constraints:
            s = con.uncertainty_set
            robust += [float(s.worst_case(mu)) - con.epsilon, float(s.worst_case(-mu)) - con.epsilon]
        return {
            "g1": self.soc_rows(phi, u, mu_plus, mu_minus),
            "g2": np.array(robust),
            "g3": prob.rho_L * np.asarray(u) - total,
            "g4": total - prob.rho_U * np.asarray(u),
            "g5": np.asarray(mu_plus) - prob.rho_U * (1.0 - np.asarray(b)),
            "g6": np.asarray(mu_minus) - prob.rho_U * np.asarray(b),
        }


def build_socp(prob: EvidenceProblem, perspective: Perspective = "split", u_floor: float = 1e-9) -> SocpInstance:
    """
    Wrap an evidence problem as a relaxation instance.

    Args:
        prob (EvidenceProblem): The instance to relax.
        perspective (str): ``"split"`` or ``"single"`` strengthening.
        u_floor (float): Lower clamp on u inside perspective ratios.

    Returns:
        SocpInstance: The relaxation view used by the first-order solver.
    """
    return SocpInstance(problem=prob, perspective=perspective, u_floor=u_floor)


def lift(mu: np.ndarray, rho_L, rho_U, perspective: Perspective = "split") -> Dict[str, np.ndarray]:
    """
    Recover the remaining relaxation variables from a reduced iterate.

    Args:
        mu (np.ndarray): Reduced iterate, shape (M,) or (B, M).
        rho_L: Lower band edge, scalar or broadcastable to mu.
        rho_U: Upper band edge, scalar or broadcastable to mu.
        perspective (str): ``"split"`` or ``"single"``.

    Returns:
        Dict[str, np.ndarray]: ``phi``, ``u``, ``b``, ``mu_plus`` and ``mu_minus``,
        each shaped like mu and feasible for the relaxation whenever mu is.
    """
    mu_plus = np.maximum(mu, 0.0)
    mu_minus = np.maximum(-mu, 0.0)
    magnitude = np.abs(mu)
    if perspective == "single":
        u = (mu != 0.0).astype(float)
        # pad both parts so mu+ + mu- reaches rho_L * u
        pad = 0.5 * np.maximum(rho_L * u - magnitude, 0.0)
        mu_plus = mu_plus + pad
        mu_minus = mu_minus + pad
        return {
            "phi": mu * mu,
            "u": u,
            "b": mu_minus / rho_U,
            "mu_plus": mu_plus,
            "mu_minus": mu_minus,
        }
    u = np.minimum(1.0, magnitude / rho_L)
    return {
        "phi": np.maximum(mu * mu, rho_L * magnitude),
        "u": u,
        "b": np.where(mu < 0.0, u, 0.0),
        "mu_plus": mu_plus,
        "mu_minus": mu_minus,
    }


class SocpRelaxation:
    """
    cvxpy model of the relaxation with node bounds on u and b.

    ``perspective`` selects the strengthening: ``"split"`` (one perspective row
    per sign, with b <= u), ``"single"`` (one row on mu+ - mu-), or ``"box"``
    (binaries relaxed to [0, 1] with no strengthening).
    """

    def __init__(self, perspective: str = "split", solver: str = "CLARABEL"):
        if perspective not in ("split", "single", "box"):
            raise ValueError(f"unknown perspective {perspective!r}")
        self.perspective = perspective
        self.solver = solver

    def _program(self, prob: EvidenceProblem) -> "_RelaxationProgram":
        cache = thread_cache("relaxation_programs")
        key = (self.perspective, self.solver, prob.structure_key)
        if key not in cache:
            cache[key] = _RelaxationProgram(prob, self.perspective)
        return cache[key]

    def solve(self, prob: EvidenceProblem, u_lo=None, u_hi=None, b_lo=None, b_hi=None) -> Optional[Solution]:
        """Relaxed minimizer inside the node box, or None if the node is empty."""
        M = prob.M
        zeros, ones = np.zeros(M), np.ones(M)
        program = self._program(prob)
        return program.solve(
            prob,
            zeros if u_lo is None else u_lo,
            ones if u_hi is None else u_hi,
            zeros if b_lo is None else b_lo,
            ones if b_hi is None else b_hi,
            self.solver,
        )

    def bound(self, prob: EvidenceProblem) -> float:
        return self.solve(prob).objective


class _RelaxationProgram:
    def __init__(self, prob: EvidenceProblem, perspective: str):
        M, N = prob.M, prob.N
        self.perspective = perspective
        self.x_tilde = cp.Parameter(M)
        self.eps = cp.Parameter(N, nonneg=True)
        self.rho_L = cp.Parameter(nonneg=True)
        self.rho_U = cp.Parameter(nonneg=True)
        self.u_lo, self.u_hi = cp.Parameter(M), cp.Parameter(M)
        self.b_lo, self.b_hi = cp.Parameter(M), cp.Parameter(M)

        self.mu_plus = cp.Variable(M, nonneg=True)
        self.mu_minus = cp.Variable(M, nonneg=True)
        self.u = cp.Variable(M)
        self.b = cp.Variable(M)
        mu = self.mu_plus - self.mu_minus
        rows = [
            self.u >= self.u_lo,
            self.u <= self.u_hi,
            self.b >= self.b_lo,
            self.b <= self.b_hi,
        ]
        if perspective == "split":
            self.phi_plus = cp.Variable(M, nonneg=True)
            self.phi_minus = cp.Variable(M, nonneg=True)
            w = self.u - self.b
            rows += [
                self.b >= 0,
                w >= 0,
                self.mu_plus <= self.rho_U * w,
                self.mu_plus >= self.rho_L * w,
                self.mu_minus <= self.rho_U * self.b,
                self.mu_minus >= self.rho_L * self.b,
                cp.SOC(w + self.phi_plus, cp.vstack([2 * self.mu_plus, w - self.phi_plus]), axis=0),
                cp.SOC(self.b + self.phi_minus, cp.vstack([2 * self.mu_minus, self.b - self.phi_minus]), axis=0),
            ]
            curvature = cp.sum(self.phi_plus + self.phi_minus)
        else:
            total = self.mu_plus + self.mu_minus
            rows += [
                self.u >= 0,
                self.u <= 1,
                self.b >= 0,
                self.b <= 1,
                self.mu_plus <= self.rho_U * (1 - self.b),
                self.mu_minus <= self.rho_U * self.b,
                total >= self.rho_L * self.u,
                total <= self.rho_U * self.u,
            ]
            if perspective == "single":
                self.phi = cp.Variable(M, nonneg=True)
                rows.append(cp.SOC(self.phi + self.u, cp.vstack([2 * mu, self.phi - self.u]), axis=0))
                curvature = cp.sum(self.phi)
            else:
                curvature = cp.sum_squares(mu)

        self.aux = []
        for i, con in enumerate(prob.constraints):
            robust, aux = con.uncertainty_set.robust_rows(mu, self.eps[i])
            rows += robust
            self.aux.append(aux)
        self.problem = cp.Problem(cp.Minimize(curvature - 2 * self.x_tilde @ mu), rows)

    def solve(self, prob, u_lo, u_hi, b_lo, b_hi, solver) -> Optional[Solution]:
        self.x_tilde.value = prob.x_tilde
        self.eps.value = prob.epsilons
        self.rho_L.value = prob.rho_L
        self.rho_U.value = prob.rho_U
        self.u_lo.value, self.u_hi.value = np.asarray(u_lo, float), np.asarray(u_hi, float)
        self.b_lo.value, self.b_hi.value = np.asarray(b_lo, float), np.asarray(b_hi, float)
        if not solve_program(self.problem, solver, f"{self.perspective} relaxation"):
            return None

        mu_plus = np.maximum(self.mu_plus.value, 0.0)
        mu_minus = np.maximum(self.mu_minus.value, 0.0)
        mu = mu_plus - mu_minus
        u = np.clip(self.u.value, 0.0, 1.0)
        b = np.clip(self.b.value, 0.0, 1.0)
        if self.perspective == "split":
            phi = np.maximum(self.phi_plus.value, 0.0) + np.maximum(self.phi_minus.value, 0.0)
        elif self.perspective == "single":
            phi = np.maximum(self.phi.value, 0.0)
        else:
            phi = mu * mu
        duals = [
            np.stack([np.maximum(a.value, 0.0) for a in aux]) if aux else np.zeros((2, 0))
            for aux in self.aux
        ]
        objective = prob.scale * float((phi - 2.0 * mu * prob.x_tilde).sum())
        return Solution(
            mu_plus=mu_plus,
            mu_minus=mu_minus,
            u=u,
            b=b,
            phi=phi,
            duals=duals,
            objective=objective,
            bound=objective,
            status=SolveStatus.OPTIMAL,
        )


def box_relaxation_bound(prob: EvidenceProblem, solver: str = "CLARABEL") -> float:
    """Minimum with u and b relaxed to [0, 1] and no perspective strengthening."""
    return SocpRelaxation("box", solver).bound(prob)


class SolverSchedule(ArrayModel):
    """Per-layer step sizes and stopping rule of the first-order solver."""

    primal_steps: FloatArray
    dual_steps: FloatArray
    eps_stop: float = Field(0.01, gt=0)
    max_outer: int = Field(200, ge=1)
    max_inner: int = Field(50, ge=1)
    penalty: float = Field(1.0, gt=0)
    kkt_tol: float = Field(1e-4, gt=0)
    backtracking: bool = True
    max_halvings: int = Field(20, ge=0)
    u_floor: float = Field(1e-9, gt=0)
    diverge_at: float = Field(1e12, gt=0)
    perspective: Perspective = "split"
    shortcut: bool = True
    certify_tol: float = Field(1e-4, gt=0)
    bound_steps: int = Field(200, ge=0)
    polish: bool = True
    conic_solver: str = "CLARABEL"

    @model_validator(mode="after")
    def _steps(self):
        if self.primal_steps.ndim != 1 or self.primal_steps.shape != self.dual_steps.shape:
            raise ValueError("primal_steps and dual_steps must be vectors of equal length K")
        if self.primal_steps.size == 0:
            raise ValueError("need at least one layer")
        if np.any(self.primal_steps <= 0) or np.any(self.dual_steps <= 0):
            raise ValueError("step sizes must be > 0")
        return self

    @property
    def K(self) -> int:
        return self.primal_steps.shape[0]

    @property
    def inner_steps(self) -> int:
        """Primal steps per layer at fixed multipliers."""
        return max(1, self.max_inner // self.K)

    @classmethod
    def geometric(cls, cfg: Optional[ScheduleConfig] = None) -> "SolverSchedule":
        """base * decay^k for k = 0..K-1."""
        cfg = cfg or ScheduleConfig()
        k = np.arange(cfg.K)
        return cls(
            primal_steps=cfg.primal_base * cfg.primal_decay**k,
            dual_steps=cfg.dual_base * cfg.dual_decay**k,
            eps_stop=cfg.eps_stop,
            max_outer=cfg.max_outer,
            max_inner=cfg.max_inner,
            penalty=cfg.penalty,
            kkt_tol=cfg.kkt_tol,
            backtracking=cfg.backtracking,
            max_halvings=cfg.max_halvings,
            u_floor=cfg.u_floor,
            diverge_at=cfg.diverge_at,
            perspective=cfg.perspective,
            shortcut=cfg.shortcut,
            certify_tol=cfg.certify_tol,
            bound_steps=cfg.bound_steps,
            polish=cfg.polish,
            conic_solver=cfg.conic_solver,
        )


class LagrangianState(ArrayModel):
    """Snapshot handed to the solver callback after every primal step and dual update."""

    outer: int
    layer: int
    phase: Literal["primal", "dual"]
    mu: np.ndarray
    duals: List[np.ndarray]
    multipliers: np.ndarray
    loss: np.ndarray
    active: np.ndarray
    primal: Dict[str, np.ndarray] = Field(default_factory=dict)


# step multiples tried per ascent step of the certified bound
MULTIPLIER_TRIALS = (0.25, 0.5, 1.0, 2.0, 4.0)
POINT_TRIALS = (0.0625, 0.125, 0.25, 0.5, 1.0)


class LagrangianBatch:
    """
    Arrays of a batch of evidence problems that share M and their uncertainty sets.

    Rows of the penalty vector g (all <= 0 at feasibility) are laid out per
    column: two rows ``+-c^T mu + support(mu) - eps`` for sets with a closed-form
    support, and for general polyhedra the paired equalities D^T p+ = mu,
    D^T p- = -mu followed by d^T p+- <= eps.
    """

    def __init__(
        self,
        constraints: Sequence[RobustConstraintData],
        x_tilde: np.ndarray,
        eps: np.ndarray,
        rho_L: np.ndarray,
        rho_U: np.ndarray,
        sigma2: np.ndarray,
        sched: SolverSchedule,
    ):
        self.constraints = list(constraints)
        self.sets = [con.uncertainty_set for con in self.constraints]
        self.X = np.atleast_2d(np.asarray(x_tilde, dtype=float))
        B, M = self.X.shape
        self.B, self.M = B, M
        self.eps = np.broadcast_to(np.asarray(eps, dtype=float), (B, len(self.sets)))
        # one slack per robust row, ordered (column 0 +, column 0 -, column 1 +, ...)
        self.eps2 = np.repeat(self.eps, 2, axis=1)
        self.rho_L = np.broadcast_to(np.asarray(rho_L, dtype=float).reshape(-1, 1), (B, 1))
        self.rho_U = np.broadcast_to(np.asarray(rho_U, dtype=float).reshape(-1, 1), (B, 1))
        self.sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float).reshape(-1), (B,))
        self.scale = 1.0 / (2.0 * self.sigma2)
        self.sched = sched
        self.single_row = sched.perspective == "single"

        self.slices = []
        self.dual_slot: Dict[int, int] = {}
        offset = 0
        for i, s in enumerate(self.sets):
            if s.dim != M:
                raise DimMismatch(f"uncertainty set of column {i}", M, s.dim)
            width = 4 * M + 2 if s.uses_dual_blocks else 2
            if s.uses_dual_blocks:
                self.dual_slot[i] = len(self.dual_slot)
            self.slices.append(slice(offset, offset + width))
            offset += width
        self.J = offset

    def zero_duals(self) -> List[np.ndarray]:
        return [np.zeros((self.B, 2, self.sets[i].D.shape[0])) for i in self.dual_slot]

    def psi(self, mu: np.ndarray) -> np.ndarray:
        if self.single_row:
            return mu * mu
        return np.maximum(mu * mu, self.rho_L * np.abs(mu))

    def prox(self, v: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        """argmin_z psi(z) + (z - v)^2 / (2 alpha) subject to |z| <= rho_U."""
        sign = np.sign(v)
        mag = np.abs(v)
        if self.single_row:
            return sign * np.minimum(mag / (1.0 + 2.0 * alpha), self.rho_U)
        low = np.minimum(np.maximum(mag - alpha * self.rho_L, 0.0), self.rho_L)
        high = np.clip(mag / (1.0 + 2.0 * alpha), self.rho_L, self.rho_U)
        cost_low = np.maximum(low * low, self.rho_L * low) + (low - mag) ** 2 / (2.0 * alpha)
        cost_high = high * high + (high - mag) ** 2 / (2.0 * alpha)
        return sign * np.where(cost_low <= cost_high, low, high)

    def rows(self, mu: np.ndarray, duals: List[np.ndarray]) -> np.ndarray:
        out = []
        for i, s in enumerate(self.sets):
            eps = self.eps[:, i : i + 1]
            if i in self.dual_slot:
                P = duals[self.dual_slot[i]]
                DtP = (P[..., :, None] * s.D).sum(axis=-2)
                e_plus = DtP[:, 0] - mu
                e_minus = DtP[:, 1] + mu
                cap = (P * s.d).sum(axis=-1) - eps
                out += [e_plus, -e_plus, e_minus, -e_minus, cap]
            else:
                lean = (mu * s.center).sum(axis=-1, keepdims=True)
                spread = np.asarray(s.support(mu)).reshape(-1, 1)
                out += [lean + spread - eps, -lean + spread - eps]
        if not out:
            return np.zeros((self.B, 0))
        return np.concatenate(out, axis=1)

    def loss(self, mu, duals, lam) -> np.ndarray:
        c = self.sched.penalty
        g = self.rows(mu, duals)
        penalty = (np.maximum(0.0, lam + c * g) ** 2 - lam * lam).sum(axis=-1) / (2.0 * c)
        return self.psi(mu).sum(axis=-1) - 2.0 * (mu * self.X).sum(axis=-1) + penalty

    def smooth_grad(self, mu, duals, lam):
        """Gradient of everything but psi: the linear term and the penalty rows."""
        c = self.sched.penalty
        w = np.maximum(0.0, lam + c * self.rows(mu, duals))
        M = self.M
        g_mu = -2.0 * self.X
        g_duals = [np.zeros_like(P) for P in duals]
        for i, s in enumerate(self.sets):
            wi = w[:, self.slices[i]]
            if i in self.dual_slot:
                d_plus = wi[:, 0:M] - wi[:, M : 2 * M]
                d_minus = wi[:, 2 * M : 3 * M] - wi[:, 3 * M : 4 * M]
                g_mu = g_mu - d_plus + d_minus
                grad = g_duals[self.dual_slot[i]]
                grad[:, 0] = (s.D * d_plus[:, None, :]).sum(axis=-1) + wi[:, 4 * M : 4 * M + 1] * s.d
                grad[:, 1] = (s.D * d_minus[:, None, :]).sum(axis=-1) + wi[:, 4 * M + 1 :] * s.d
            else:
                w_pos, w_neg = wi[:, 0:1], wi[:, 1:2]
                g_mu = g_mu + (w_pos - w_neg) * s.center + (w_pos + w_neg) * s.support_grad(mu)
        return g_mu, g_duals

    def candidate(self, mu, duals, g_mu, g_duals, alpha):
        a = alpha[:, None]
        new_mu = self.prox(mu - a * g_mu, a)
        new_duals = [np.maximum(P - a[:, :, None] * G, 0.0) for P, G in zip(duals, g_duals)]
        return new_mu, new_duals

    def primal_step(self, mu, duals, lam, step: float, active: np.ndarray):
        """One projected proximal-gradient step with per-instance backtracking."""
        base = self.loss(mu, duals, lam)
        g_mu, g_duals = self.smooth_grad(mu, duals, lam)
        alpha = np.full(self.B, step)
        new_mu = mu.copy()
        new_duals = [P.copy() for P in duals]
        pending = active.copy()
        for _ in range(self.sched.max_halvings + 1):
            cand_mu, cand_duals = self.candidate(mu, duals, g_mu, g_duals, alpha)
            if self.sched.backtracking:
                accept = pending & (self.loss(cand_mu, cand_duals, lam) <= base)
            else:
                accept = pending
            new_mu[accept] = cand_mu[accept]
            for P, Q in zip(new_duals, cand_duals):
                P[accept] = Q[accept]
            pending = pending & ~accept
            if not pending.any():
                break
            alpha = np.where(pending, 0.5 * alpha, alpha)
        return new_mu, new_duals

    def kkt_residual(self, mu, duals, lam) -> np.ndarray:
        step = float(self.sched.primal_steps[0])
        g_mu, g_duals = self.smooth_grad(mu, duals, lam)
        alpha = np.full(self.B, step)
        cand_mu, cand_duals = self.candidate(mu, duals, g_mu, g_duals, alpha)
        stationarity = np.abs(cand_mu - mu).max(axis=-1) / step
        for P, Q in zip(duals, cand_duals):
            stationarity = np.maximum(stationarity, np.abs(Q - P).reshape(self.B, -1).max(axis=-1) / step)
        g = self.rows(mu, duals)
        if g.shape[1] == 0:
            return stationarity
        infeasibility = np.maximum(g, 0.0).max(axis=-1)
        slackness = np.abs(np.minimum(lam, -g)).max(axis=-1)
        return np.maximum(stationarity, np.maximum(infeasibility, slackness))

    def worst_ratio(self, mu: np.ndarray) -> np.ndarray:
        """Largest max_{h in S_i} |h^T mu| / eps_i over columns (inf if eps_i = 0 and mu leans)."""
        ratio = np.zeros(self.B)
        for i, s in enumerate(self.sets):
            need = np.asarray(s.abs_worst_case(mu)).reshape(-1)
            eps = self.eps[:, i]
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(need > 0.0, need / eps, 0.0)
            ratio = np.maximum(ratio, np.nan_to_num(r, nan=0.0, posinf=np.inf))
        return ratio

    def envelope_argmin(self, y: np.ndarray) -> np.ndarray:
        """Per coordinate argmin of psi(z) - 2 y z over |z| <= rho_U."""
        mag = np.abs(y)
        if self.single_row:
            return np.sign(y) * np.minimum(mag, self.rho_U)
        inside = np.clip(mag, self.rho_L, self.rho_U)
        return np.where(2.0 * mag > self.rho_L, np.sign(y) * inside, 0.0)

    def envelope_minimizer(self) -> np.ndarray:
        return self.envelope_argmin(self.X)

    def reduced_objective(self, mu: np.ndarray) -> np.ndarray:
        return self.psi(mu).sum(axis=-1) - 2.0 * (mu * self.X).sum(axis=-1)

    def robust_multipliers(self, mu, duals, lam) -> np.ndarray:
        """Multipliers of the rows max_{h in S_i} +-h^T mu <= eps_i, shape (B, 2N)."""
        w = np.maximum(0.0, lam + self.sched.penalty * self.rows(mu, duals))
        cols = []
        for i, sl in enumerate(self.slices):
            first = sl.start + 4 * self.M if i in self.dual_slot else sl.start
            cols.append(w[:, first : first + 2])
        return np.concatenate(cols, axis=1)

    def row_points(self, z: np.ndarray) -> np.ndarray:
        """Signed maximizers s h of s h^T z per column and sign s, shape (B, 2N, M)."""
        rows = []
        for s in self.sets:
            rows += [s.maximizer(z), -s.maximizer(-z)]
        return np.stack(rows, axis=1)

    def lagrange_value(self, lam2: np.ndarray, A: np.ndarray):
        """
        Dual value with every robust row replaced by the halfspace a_j^T mu <= eps_j.

        Returns the value and the minimizing mu, both per instance.
        """
        y = self.X - 0.5 * (lam2[:, :, None] * A).sum(axis=1)
        z = self.envelope_argmin(y)
        value = self.psi(z).sum(axis=-1) - 2.0 * (z * y).sum(axis=-1) - (lam2 * self.eps2).sum(axis=-1)
        return value, z

    def certified_bound(self, mu, duals, lam, primal: np.ndarray) -> np.ndarray:
        """
        Weak-duality lower bound on the reduced minimum of every instance.

        Each robust row max_{h in S_i} s h^T mu <= eps_i is implied by the
        halfspace of any single point h in S_i, so every choice of multipliers
        lam >= 0 and points h yields a valid bound. Both start from the solver's
        final iterate and are improved by monotone ascent until the bound is
        within ``certify_tol`` of ``primal`` or ``bound_steps`` is spent.
        """
        sched = self.sched
        lam2 = self.robust_multipliers(mu, duals, lam)
        A = self.row_points(mu)
        best, z = self.lagrange_value(lam2, A)
        free, z_free = self.lagrange_value(np.zeros_like(lam2), A)
        use_free = free > best
        lam2 = np.where(use_free[:, None], 0.0, lam2)
        z = np.where(use_free[:, None], z_free, z)
        best = np.maximum(best, free)

        tol = sched.certify_tol / self.scale
        open_ = primal - best > tol
        for _ in range(sched.bound_steps):
            if not open_.any():
                break
            grad = (A * z[:, None, :]).sum(axis=-1) - self.eps2
            curvature = np.maximum(0.5 * (A * A).reshape(self.B, -1).sum(axis=-1), 1e-12)
            base_lam = lam2
            for t in MULTIPLIER_TRIALS:
                cand = np.maximum(base_lam + (t / curvature)[:, None] * grad, 0.0)
                value, zc = self.lagrange_value(cand, A)
                better = open_ & (value > best)
                lam2 = np.where(better[:, None], cand, lam2)
                z = np.where(better[:, None], zc, z)
                best = np.where(better, value, best)

            target = self.row_points(z)
            base_A = A
            for gamma in POINT_TRIALS:
                cand = (1.0 - gamma) * base_A + gamma * target
                value, zc = self.lagrange_value(lam2, cand)
                better = open_ & (value > best)
                A = np.where(better[:, None, None], cand, A)
                z = np.where(better[:, None], zc, z)
                best = np.where(better, value, best)
            open_ = primal - best > tol
        return best

    def problem(self, j: int) -> EvidenceProblem:
        """Instance j as a standalone evidence problem."""
        return EvidenceProblem(
            x_tilde=self.X[j],
            rho_L=float(self.rho_L[j, 0]),
            rho_U=float(self.rho_U[j, 0]),
            sigma2=float(self.sigma2[j]),
            constraints=[
                con.model_copy(update={"epsilon": float(self.eps[j, i])}) for i, con in enumerate(self.constraints)
            ],
        )


class LagrangianResult(ArrayModel):
    """
    Per-instance outcome of ``run_lagrangian``.

    ``objective`` is the scaled value of the feasible point ``mu``; ``bound`` is
    a certified lower bound on the relaxation minimum, within ``certify_tol``
    of it for every instance marked ``certified``.
    """

    mu: np.ndarray
    objective: np.ndarray
    bound: np.ndarray
    kkt: np.ndarray
    optimal: np.ndarray
    certified: np.ndarray
    polished: np.ndarray
    rounds: np.ndarray


def run_lagrangian(
    batch: LagrangianBatch, sched: SolverSchedule, callback: Optional[Callable[[LagrangianState], None]] = None
) -> LagrangianResult:
    B, M = batch.B, batch.M
    mu = np.zeros((B, M))
    duals = batch.zero_duals()
    lam = np.zeros((B, batch.J))
    active = np.ones(B, dtype=bool)
    rounds = np.zeros(B, dtype=int)
    shortcut = np.zeros(B, dtype=bool)

    if sched.shortcut:
        candidate = batch.envelope_minimizer()
        shortcut = batch.worst_ratio(candidate) <= 1.0
        mu[shortcut] = candidate[shortcut]
        active &= ~shortcut

    def report(outer, layer, phase):
        if callback is None:
            return
        callback(
            LagrangianState(
                outer=outer,
                layer=layer,
                phase=phase,
                mu=mu.copy(),
                duals=[P.copy() for P in duals],
                multipliers=lam.copy(),
                loss=batch.loss(mu, duals, lam),
                active=active.copy(),
                primal=lift(mu, batch.rho_L, batch.rho_U, sched.perspective),
            )
        )

    for outer in range(sched.max_outer):
        if not active.any():
            break
        start = mu.copy()
        for k in range(sched.K):
            for _ in range(sched.inner_steps):
                mu, duals = batch.primal_step(mu, duals, lam, float(sched.primal_steps[k]), active)
                report(outer, k, "primal")
            g = batch.rows(mu, duals)
            updated = np.maximum(0.0, lam + sched.dual_steps[k] * g)
            lam[active] = updated[active]
            loss = batch.loss(mu, duals, lam)
            if np.any(loss[active] > sched.diverge_at):
                logger.error(f"First-order solver diverged at outer round {outer}, layer {k}")
                raise Diverged(f"loss exceeded {sched.diverge_at:.1e} at outer round {outer}, layer {k}")
            report(outer, k, "dual")
        change = np.sqrt(((mu - start) ** 2).sum(axis=-1))
        scale = np.maximum(1.0, np.sqrt((start**2).sum(axis=-1)))
        rounds[active] += 1
        active &= ~(change / scale < sched.eps_stop)

    if active.any():
        logger.debug(f"{int(active.sum())}/{B} instances stopped at max_outer={sched.max_outer}")
    kkt = batch.kkt_residual(mu, duals, lam)
    kkt[shortcut] = 0.0

    # scale back into the robust rows, then keep the better of that and mu = 0
    ratio = batch.worst_ratio(mu)
    shrink = np.where(ratio > 1.0, 1.0 / ratio, 1.0)
    feasible = mu * shrink[:, None]
    primal = batch.reduced_objective(feasible)
    worse = primal > 0.0
    feasible[worse] = 0.0
    primal[worse] = 0.0

    # the unconstrained envelope minimizer is optimal whenever it is feasible
    bound = np.where(shortcut, primal, -np.inf)
    rest = ~shortcut
    if rest.any():
        bound[rest] = batch.certified_bound(mu, duals, lam, primal)[rest]
    certified = (primal - bound) * batch.scale <= sched.certify_tol
    polished = np.zeros(B, dtype=bool)

    if sched.polish and not certified.all():
        relax = SocpRelaxation(sched.perspective, sched.conic_solver)
        for j in np.flatnonzero(~certified):
            try:
                sol = relax.solve(batch.problem(j))
            except SolverFailure as e:
                logger.warning(f"Polish of instance {j} failed, keeping the dual bound: {e}")
                continue
            if sol is None:
                continue
            feasible[j] = sol.mu
            primal[j] = batch.reduced_objective(sol.mu[None, :])[0]
            bound[j] = min(primal[j], sol.objective / batch.scale[j])
            polished[j] = True
        logger.debug(f"Polished {int(polished.sum())}/{B} instances with the conic relaxation")

    return LagrangianResult(
        mu=feasible,
        objective=primal * batch.scale,
        bound=bound * batch.scale,
        kkt=kkt,
        optimal=(kkt < sched.kkt_tol) | certified | polished,
        certified=certified,
        polished=polished,
        rounds=rounds,
    )


def _batch_from_instances(instances: Sequence[SocpInstance], sched: SolverSchedule) -> LagrangianBatch:
    first = instances[0].problem
    key = first.structure_key
    for inst in instances[1:]:
        if inst.problem.structure_key != key:
            raise ValueError("every instance in a batch must share M and the uncertainty sets")
    probs = [inst.problem for inst in instances]
    return LagrangianBatch(
        first.constraints,
        np.stack([p.x_tilde for p in probs]),
        np.stack([p.epsilons for p in probs]),
        np.array([p.rho_L for p in probs]),
        np.array([p.rho_U for p in probs]),
        np.array([p.sigma2 for p in probs]),
        sched,
    )


def solve_lagrangian(
    inst: Union[SocpInstance, Sequence[SocpInstance]],
    sched: Optional[SolverSchedule] = None,
    callback: Optional[Callable[[LagrangianState], None]] = None,
) -> List[Solution]:
    """
    Solve one instance or a batch with the first-order augmented-Lagrangian method.

    Every instance in a batch is updated independently: backtracking, stopping,
    feasibility restoration and the certified bound are decided per instance,
    so a batch returns what solving each instance alone would.

    Args:
        inst: A ``SocpInstance`` or a sequence sharing M and the uncertainty sets.
        sched (SolverSchedule, optional): Step sizes and stopping rule.
        callback (optional): Receives a ``LagrangianState`` after each primal
            step and each multiplier update.

    Returns:
        List[Solution]: One relaxed solution per instance. ``objective`` is the
        value of the returned feasible point and ``bound`` a certified lower
        bound on the relaxation minimum.

    Raises:
        Diverged: If the loss exceeds ``sched.diverge_at``.
    """
    sched = sched or SolverSchedule.geometric()
    instances = [inst] if isinstance(inst, SocpInstance) else list(inst)
    if not instances:
        return []
    if any(i.perspective != sched.perspective for i in instances):
        sched = sched.model_copy(update={"perspective": instances[0].perspective})
    result = run_lagrangian(_batch_from_instances(instances, sched), sched, callback)

    solutions = []
    for j, socp in enumerate(instances):
        prob = socp.problem
        mu = result.mu[j]
        parts = socp.lift(mu)
        duals = []
        for con in prob.constraints:
            s = con.uncertainty_set
            if isinstance(s, PolyhedralSet):
                duals.append(np.stack([s.optimal_dual(mu), s.optimal_dual(-mu)]))
            else:
                duals.append(np.zeros((2, 0)))
        solutions.append(
            Solution(
                mu_plus=parts["mu_plus"],
                mu_minus=parts["mu_minus"],
                u=parts["u"],
                b=parts["b"],
                phi=parts["phi"],
                duals=duals,
                objective=float(result.objective[j]),
                bound=float(result.bound[j]),
                status=SolveStatus.OPTIMAL if result.optimal[j] else SolveStatus.ITER_LIMIT,
            )
        )
    return solutions


def v_t_relaxed(prob: EvidenceProblem, sched: Optional[SolverSchedule] = None) -> float:
    """
    Relaxed evidence: minus the certified lower bound on the relaxation minimum.

    The relaxation minimum never exceeds the exact minimum, so the value is at
    least ``v_t_exact(prob)`` and at most ||x_tilde||^2 / (2 sigma2).

    Args:
        prob (EvidenceProblem): The instance.
        sched (SolverSchedule, optional): Defaults to ``SolverSchedule.geometric()``.

    Returns:
        float: The evidence, clamped at 0.
    """
    sched = sched or SolverSchedule.geometric()
    sol = solve_lagrangian(build_socp(prob, sched.perspective, sched.u_floor), sched)[0]
    return max(0.0, -sol.bound)


class RelaxedEvidence:
    """
    First-order evidence solver for one scenario.

    Call it on one observation, or use ``batch`` on a (B, M) stack to solve all
    rows in one vectorized pass.
    """

    def __init__(
        self,
        model: SystemModel,
        sets: Sequence,
        evidence: Optional[EvidenceConfig] = None,
        schedule: Union[None, ScheduleConfig, SolverSchedule] = None,
    ):
        self.model = model
        self.evidence = evidence or EvidenceConfig()
        if schedule is None or isinstance(schedule, ScheduleConfig):
            schedule = SolverSchedule.geometric(schedule)
        self.schedule = schedule
        self.constraints = resolve_constraints(model, sets, self.evidence)
        self._eps = np.array([con.epsilon for con in self.constraints])

    def problem(self, x) -> EvidenceProblem:
        return EvidenceProblem(
            x_tilde=self.model.residual(x),
            rho_L=self.evidence.rho_L,
            rho_U=self.evidence.rho_U,
            sigma2=self.model.sigma2,
            constraints=self.constraints,
        )

    def solve(self, x) -> Solution:
        sched = self.schedule
        return solve_lagrangian(build_socp(self.problem(x), sched.perspective, sched.u_floor), sched)[0]

    def __call__(self, x) -> float:
        return float(self.batch(np.asarray(x, dtype=float)[None, :])[0])

    def batch(self, xs) -> np.ndarray:
        """Evidence for every row of a (B, M) stack of raw observations."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        batch = LagrangianBatch(
            self.constraints,
            self.model.residual(xs),
            self._eps,
            self.evidence.rho_L,
            self.evidence.rho_U,
            self.model.sigma2,
            self.schedule,
        )
        result = run_lagrangian(batch, self.schedule)
        return np.maximum(-result.bound, 0.0)
