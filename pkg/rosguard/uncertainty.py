"""
Column-wise uncertainty sets for the system matrix.

Each set S around a nominal column h_bar offers its centered support function
max_{h in S} (h - h_bar)^T mu, a diameter, membership and sampling helpers, and
the cvxpy rows that impose the two-sided robust constraint
max_{h in S} |h^T mu| <= epsilon.
"""

import abc
import itertools
import logging
from typing import Annotated, List, Literal, Optional, Tuple, Union

import cvxpy as cp
import numpy as np
import scipy.optimize
from pydantic import Field, PrivateAttr, model_validator
from scipy.spatial.distance import pdist

from .config import ArrayModel, FloatArray
from .exceptions import DimMismatch, InfeasibleDual, Unbounded

logger = logging.getLogger(__name__)

VERTEX_ENUMERATION_ROWS = 12
DEFAULT_FEAS_TOL = 1e-8


class UncertaintySet(ArrayModel, abc.ABC):
    """Common interface of the three set families."""

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        """Ambient dimension M."""

    @property
    @abc.abstractmethod
    def center(self) -> np.ndarray:
        """Nominal column h_bar."""

    @abc.abstractmethod
    def support(self, mu) -> Union[float, np.ndarray]:
        """Centered support function; accepts (M,) or stacked (..., M) directions."""

    @abc.abstractmethod
    def support_grad(self, mu: np.ndarray) -> np.ndarray:
        """A subgradient of the centered support function, same shape as mu."""

    @abc.abstractmethod
    def diameter(self) -> float:
        """Euclidean diameter."""

    @abc.abstractmethod
    def contains(self, h, tol: float = 1e-9) -> bool:
        """Membership test."""

    @abc.abstractmethod
    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n points of the set, including extreme points."""

    @abc.abstractmethod
    def robust_rows(self, mu: cp.Expression, epsilon) -> Tuple[list, list]:
        """cvxpy constraints for max |h^T mu| <= epsilon and any auxiliary variables."""

    @property
    def uses_dual_blocks(self) -> bool:
        return False

    @property
    def structure_key(self) -> tuple:
        """Hashable identity of the set data (cache key for compiled programs)."""
        return self._key()

    def _key(self) -> tuple:
        parts = [self.kind]
        for name in type(self).model_fields:
            value = getattr(self, name)
            parts.append(value.tobytes() if isinstance(value, np.ndarray) else value)
        return tuple(parts)

    def worst_case(self, mu) -> Union[float, np.ndarray]:
        """max_{h in S} h^T mu."""
        mu = self._check(mu)
        return (mu * self.center).sum(axis=-1) + self.support(mu)

    def abs_worst_case(self, mu) -> Union[float, np.ndarray]:
        """max_{h in S} |h^T mu|, the larger of the worst cases along mu and -mu."""
        mu = self._check(mu)
        return np.maximum(self.worst_case(mu), self.worst_case(-mu))

    def maximizer(self, mu) -> np.ndarray:
        """A point h of S attaining max_{h in S} h^T mu, same shape as mu."""
        mu = self._check(mu)
        return self.center + self.support_grad(mu)

    def _check(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape[-1] != self.dim:
            raise DimMismatch(f"{self.kind} set direction", self.dim, mu.shape)
        return mu


class PolyhedralSet(UncertaintySet):
    """
    {h : D h <= d}. Sets with D = [I; -I] are recognized as boxes and served
    by closed forms; other polyhedra use their vertices when R <= 12 and
    linear programs beyond that.
    """

    kind: Literal["polyhedral"] = "polyhedral"
    D: FloatArray
    d: FloatArray

    _box: Optional[Tuple[np.ndarray, np.ndarray]] = PrivateAttr(default=None)
    _lower: np.ndarray = PrivateAttr(default=None)
    _upper: np.ndarray = PrivateAttr(default=None)
    _center: np.ndarray = PrivateAttr(default=None)
    _vertices: Optional[np.ndarray] = PrivateAttr(default=None)

    def model_post_init(self, __context) -> None:
        D, d = self.D, self.d
        if D.ndim != 2 or d.ndim != 1 or D.shape[0] != d.shape[0]:
            raise DimMismatch("polyhedron (D, d)", "R x M and R", (D.shape, d.shape))
        M = D.shape[1]
        if D.shape[0] == 2 * M and np.array_equal(D, np.vstack([np.eye(M), -np.eye(M)])):
            upper, lower = d[:M].copy(), -d[M:].copy()
            if np.any(lower > upper):
                raise ValueError("box polyhedron is empty (lower bound above upper bound)")
            self._box = (lower, upper)
            self._lower, self._upper = lower, upper
            self._center = 0.5 * (lower + upper)
        else:
            self._lower, self._upper = self._bounding_box()
            self._center = self._chebyshev_center()

    def _bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        M = self.D.shape[1]
        lower, upper = np.empty(M), np.empty(M)
        for j in range(M):
            for sign, out in ((1.0, lower), (-1.0, upper)):
                c = np.zeros(M)
                c[j] = sign
                res = scipy.optimize.linprog(
                    c, A_ub=self.D, b_ub=self.d, bounds=[(None, None)] * M, method="highs"
                )
                if res.status == 2:
                    raise ValueError("polyhedron {h : D h <= d} is empty")
                if res.status == 3:
                    raise Unbounded(f"polyhedron is unbounded along coordinate {j}")
                out[j] = sign * res.fun
        return lower, upper

    def _chebyshev_center(self) -> np.ndarray:
        M = self.D.shape[1]
        norms = np.linalg.norm(self.D, axis=1)
        c = np.zeros(M + 1)
        c[-1] = -1.0
        res = scipy.optimize.linprog(
            c,
            A_ub=np.hstack([self.D, norms[:, None]]),
            b_ub=self.d,
            bounds=[(None, None)] * M + [(0, None)],
            method="highs",
        )
        if res.status != 0:
            return 0.5 * (self._lower + self._upper)
        return res.x[:M]

    @property
    def dim(self) -> int:
        return self.D.shape[1]

    @property
    def center(self) -> np.ndarray:
        return self._center

    @property
    def is_box(self) -> bool:
        return self._box is not None

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * (self._upper - self._lower)

    @property
    def uses_dual_blocks(self) -> bool:
        return not self.is_box

    def _vertex_table(self) -> Optional[np.ndarray]:
        """Vertices when they are cheap to enumerate, else None (LP path)."""
        if self.is_box or self.D.shape[0] > VERTEX_ENUMERATION_ROWS:
            return None
        verts = self.vertices()
        return verts if len(verts) else None

    def support(self, mu):
        mu = self._check(mu)
        if self.is_box:
            return (np.abs(mu) * self.half_widths).sum(axis=-1)
        verts = self._vertex_table()
        if verts is not None:
            values = (mu[..., None, :] * verts).sum(axis=-1).max(axis=-1) - (mu * self._center).sum(axis=-1)
            return values if mu.ndim > 1 else float(values)
        flat = mu.reshape(-1, self.dim)
        values = np.array([self._lp_max(row) for row in flat]) - flat @ self._center
        return values.reshape(mu.shape[:-1]) if mu.ndim > 1 else float(values[0])

    def _lp_max(self, mu: np.ndarray) -> float:
        res = scipy.optimize.linprog(
            -mu, A_ub=self.D, b_ub=self.d, bounds=[(None, None)] * self.dim, method="highs"
        )
        if res.status == 3:
            raise Unbounded("polyhedron is unbounded in the requested direction")
        return float(-res.fun)

    def support_grad(self, mu):
        mu = self._check(mu)
        if self.is_box:
            return np.sign(mu) * self.half_widths
        verts = self._vertex_table()
        if verts is not None:
            best = (mu[..., None, :] * verts).sum(axis=-1).argmax(axis=-1)
            return verts[best] - self._center
        flat = mu.reshape(-1, self.dim)
        grads = []
        for row in flat:
            res = scipy.optimize.linprog(
                -row, A_ub=self.D, b_ub=self.d, bounds=[(None, None)] * self.dim, method="highs"
            )
            grads.append(res.x - self._center)
        return np.array(grads).reshape(mu.shape)

    def vertices(self) -> np.ndarray:
        """Vertices by enumeration of active row subsets (small R only)."""
        if self._vertices is not None:
            return self._vertices
        M = self.dim
        if self.is_box:
            if M > 16:
                raise ValueError(f"refusing to enumerate 2^{M} box vertices")
            corners = np.array(list(itertools.product((0, 1), repeat=M)), dtype=float)
            verts = self._lower + corners * (self._upper - self._lower)
        else:
            R = self.D.shape[0]
            if R > VERTEX_ENUMERATION_ROWS:
                raise ValueError(f"vertex enumeration limited to R <= {VERTEX_ENUMERATION_ROWS}")
            found = []
            for rows in itertools.combinations(range(R), M):
                A = self.D[list(rows)]
                if abs(np.linalg.det(A)) < 1e-12:
                    continue
                v = np.linalg.solve(A, self.d[list(rows)])
                if np.all(self.D @ v <= self.d + 1e-9):
                    found.append(v)
            verts = np.unique(np.round(np.array(found), 12), axis=0)
        self._vertices = verts
        return verts

    def diameter(self) -> float:
        if self.is_box:
            return float(2.0 * np.linalg.norm(self.half_widths))
        if self.D.shape[0] <= VERTEX_ENUMERATION_ROWS:
            verts = self.vertices()
            return float(pdist(verts).max()) if len(verts) > 1 else 0.0
        # per-coordinate range bounds the diameter from above
        return float(np.linalg.norm(self._upper - self._lower))

    def contains(self, h, tol=1e-9):
        h = self._check(h)
        return bool(np.all(self.D @ h <= self.d + tol))

    def sample(self, rng, n):
        M = self.dim
        half = n // 2
        inner = rng.uniform(self._lower, self._upper, size=(4 * n, M))
        if not self.is_box:
            inner = inner[np.all(inner @ self.D.T <= self.d, axis=1)]
        inner = inner[: n - half]
        if self.is_box:
            corners = rng.integers(0, 2, size=(half, M)).astype(float)
            extreme = self._lower + corners * (self._upper - self._lower)
        elif self.D.shape[0] <= VERTEX_ENUMERATION_ROWS:
            verts = self.vertices()
            extreme = verts[rng.integers(0, len(verts), size=half)]
        else:
            extreme = np.empty((0, M))
        return np.vstack([inner, extreme])

    def optimal_dual(self, mu) -> np.ndarray:
        """A certificate p >= 0 with D^T p = mu and p^T d = max_{h in S} h^T mu."""
        mu = self._check(mu)
        if self.is_box:
            return np.concatenate([np.maximum(mu, 0.0), np.maximum(-mu, 0.0)])
        res = scipy.optimize.linprog(
            self.d, A_eq=self.D.T, b_eq=mu, bounds=[(0, None)] * self.D.shape[0], method="highs"
        )
        if res.status != 0:
            raise InfeasibleDual(f"no dual certificate for direction (status {res.status})")
        return res.x

    def robust_rows(self, mu, epsilon):
        R = self.D.shape[0]
        p_plus = cp.Variable(R, nonneg=True)
        p_minus = cp.Variable(R, nonneg=True)
        rows = [
            self.D.T @ p_plus == mu,
            self.D.T @ p_minus == -mu,
            self.d @ p_plus <= epsilon,
            self.d @ p_minus <= epsilon,
        ]
        return rows, [p_plus, p_minus]


class EllipsoidSet(UncertaintySet):
    """{h_bar + w : ||w||_2 <= radius}."""

    kind: Literal["ellipsoid"] = "ellipsoid"
    center_: FloatArray = Field(alias="center")
    radius: float = Field(ge=0)

    model_config = ArrayModel.model_config | {"populate_by_name": True}

    @property
    def dim(self):
        return self.center_.shape[0]

    @property
    def center(self):
        return self.center_

    def support(self, mu):
        mu = self._check(mu)
        return self.radius * np.sqrt((mu * mu).sum(axis=-1))

    def support_grad(self, mu):
        mu = self._check(mu)
        norm = np.sqrt((mu * mu).sum(axis=-1, keepdims=True))
        safe = np.where(norm > 0.0, norm, 1.0)
        return np.where(norm > 0.0, self.radius * mu / safe, 0.0)

    def diameter(self):
        return 2.0 * self.radius

    def contains(self, h, tol=1e-9):
        h = self._check(h)
        return bool(np.linalg.norm(h - self.center_) <= self.radius + tol)

    def sample(self, rng, n):
        M = self.dim
        directions = rng.standard_normal((n, M))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = self.radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / M)
        radii[: n // 2] = self.radius
        return self.center_ + radii * directions

    def robust_rows(self, mu, epsilon):
        spread = self.radius * cp.norm(mu, 2)
        return [self.center_ @ mu + spread <= epsilon, -(self.center_ @ mu) + spread <= epsilon], []


class DNormSet(UncertaintySet):
    """
    Budgeted deviations: |w_m| <= u_hat and at most kappa components at full
    deviation (the convex hull {|w|_inf <= u_hat, |w|_1 <= kappa u_hat}).
    """

    kind: Literal["dnorm"] = "dnorm"
    center_: FloatArray = Field(alias="center")
    kappa: int = Field(ge=0)
    u_hat: float = Field(ge=0)

    model_config = ArrayModel.model_config | {"populate_by_name": True}

    def model_post_init(self, __context) -> None:
        if self.kappa > self.center_.shape[0]:
            raise ValueError(f"kappa ({self.kappa}) exceeds dimension {self.center_.shape[0]}")

    @property
    def dim(self):
        return self.center_.shape[0]

    @property
    def center(self):
        return self.center_

    def support(self, mu):
        mu = self._check(mu)
        if self.kappa == 0:
            return np.zeros(mu.shape[:-1]) if mu.ndim > 1 else 0.0
        largest = np.sort(np.abs(mu), axis=-1)[..., -self.kappa :]
        return self.u_hat * largest.sum(axis=-1)

    def support_grad(self, mu):
        mu = self._check(mu)
        grad = np.zeros_like(mu)
        if self.kappa == 0:
            return grad
        top = np.argsort(-np.abs(mu), axis=-1, kind="stable")[..., : self.kappa]
        picked = np.take_along_axis(np.sign(mu), top, axis=-1) * self.u_hat
        np.put_along_axis(grad, top, picked, axis=-1)
        return grad

    def diameter(self):
        return 2.0 * self.u_hat * float(np.sqrt(self.kappa))

    def contains(self, h, tol=1e-9):
        w = self._check(h) - self.center_
        return bool(
            np.abs(w).max() <= self.u_hat + tol and np.abs(w).sum() <= self.kappa * self.u_hat + tol
        )

    def sample(self, rng, n):
        M = self.dim
        points = np.zeros((n, M))
        for k in range(n):
            picked = rng.choice(M, size=self.kappa, replace=False)
            scale = 1.0 if k < n // 2 else rng.uniform(0.0, 1.0)
            points[k, picked] = scale * self.u_hat * rng.choice((-1.0, 1.0), size=self.kappa)
        return self.center_ + points

    def robust_rows(self, mu, epsilon):
        if self.kappa == 0 or self.u_hat == 0.0:
            spread = 0.0
        else:
            spread = self.u_hat * cp.sum_largest(cp.abs(mu), self.kappa)
        return [self.center_ @ mu + spread <= epsilon, -(self.center_ @ mu) + spread <= epsilon], []


AnyUncertaintySet = Annotated[
    Union[PolyhedralSet, EllipsoidSet, DNormSet], Field(discriminator="kind")
]


class RobustConstraintData(ArrayModel):
    """
    Slack epsilon_i and the uncertainty set of column i.

    ``nominal`` is the column the detector treats as h_bar_i. It defaults to the
    set's own center and must lie inside the set when given.
    """

    epsilon: float = Field(ge=0)
    uncertainty_set: AnyUncertaintySet
    nominal_: Optional[FloatArray] = Field(None, alias="nominal")

    model_config = ArrayModel.model_config | {"populate_by_name": True}

    @model_validator(mode="after")
    def _nominal_inside(self):
        if self.nominal_ is None:
            return self
        s = self.uncertainty_set
        if self.nominal_.shape != (s.dim,):
            raise DimMismatch("nominal column", s.dim, self.nominal_.shape)
        if not s.contains(self.nominal_, tol=1e-7):
            raise ValueError("nominal column lies outside its uncertainty set")
        return self

    @property
    def nominal(self) -> np.ndarray:
        return self.uncertainty_set.center if self.nominal_ is None else self.nominal_


def box_set(center, half_width) -> PolyhedralSet:
    """Box |h - center|_inf <= half_width written as [I; -I] h <= [c + r; -c + r]."""
    center = np.asarray(center, dtype=float)
    half = np.broadcast_to(np.asarray(half_width, dtype=float), center.shape)
    M = center.size
    return PolyhedralSet(
        D=np.vstack([np.eye(M), -np.eye(M)]), d=np.concatenate([center + half, -center + half])
    )


def support_function(uset: UncertaintySet, mu) -> float:
    """max_{h in S} (h - h_bar)^T mu."""
    return uset.support(mu)


def worst_case(uset: UncertaintySet, mu) -> float:
    """
    Worst-case inner product max_{h in S} h^T mu.

    Args:
        uset (UncertaintySet): The column's uncertainty set.
        mu: Direction (M,) or a stack of directions (..., M).

    Returns:
        float: The worst case, or an array of them for stacked directions.
    """
    return uset.worst_case(mu)


def dual_feasible_bound(
    uset: PolyhedralSet, p, mu, feas_tol: float = DEFAULT_FEAS_TOL
) -> float:
    """
    Weak-duality bound p^T d >= max_{h in S} h^T mu.

    Raises:
        InfeasibleDual: If p has negative entries or D^T p differs from mu.
    """
    p = np.asarray(p, dtype=float)
    mu = uset._check(mu)
    if p.shape != uset.d.shape:
        raise DimMismatch("dual certificate", uset.d.shape, p.shape)
    if np.any(p < -feas_tol):
        raise InfeasibleDual(f"dual certificate has a negative entry ({p.min():.3e})")
    gap = np.abs(uset.D.T @ p - mu).max()
    if gap > feas_tol:
        raise InfeasibleDual(f"||D^T p - mu||_inf = {gap:.3e} exceeds {feas_tol:.1e}")
    return float(p @ uset.d)


def diameter(uset: UncertaintySet) -> float:
    """
    Euclidean diameter of the set.

    Polyhedra with more than 12 rows report the diagonal of their bounding box,
    which bounds the diameter from above.
    """
    return uset.diameter()


def epsilon_guideline(uset: UncertaintySet, rho_H: float, M: int) -> float:
    """Slack that keeps every in-band mu orthogonal to the true column feasible."""
    if rho_H <= 0:
        raise ValueError(f"rho_H must be > 0, got {rho_H}")
    return uset.diameter() * rho_H * float(np.sqrt(M))


def robust_violation(constraints: List[RobustConstraintData], mu) -> np.ndarray:
    """Per column: max(worst_case(mu), worst_case(-mu)) - epsilon (<= 0 means satisfied)."""
    mu = np.asarray(mu, dtype=float)
    return np.array([float(con.uncertainty_set.abs_worst_case(mu)) - con.epsilon for con in constraints])
