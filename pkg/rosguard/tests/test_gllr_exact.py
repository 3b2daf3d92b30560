import math
import unittest

import numpy as np
import scipy.spatial

from rosguard.config import EvidenceConfig, ExactSolverConfig
from rosguard.exceptions import DimMismatch, TooLarge
from rosguard.gllr_exact import (
    EvidenceProblem,
    ExactEvidence,
    SolveStatus,
    all_patterns,
    branch_and_bound,
    build_problem,
    check_solution,
    solve_bruteforce,
    v_t_exact,
)
from rosguard.model import SystemModel
from rosguard.scenarios import IEEE14_REGION4_H, ieee14_region4
from rosguard.uncertainty import (
    DNormSet,
    EllipsoidSet,
    PolyhedralSet,
    RobustConstraintData,
    box_set,
)

LOOSE = 1e6

TRIANGLE_POINTS = np.array([[0.0, -1.0], [0.0, 1.0], [10.0, 0.0]])


def loose_problem(x_tilde, rho_L, rho_U, sigma2=1.0):
    M = len(x_tilde)
    con = RobustConstraintData(epsilon=LOOSE, uncertainty_set=EllipsoidSet(center=np.zeros(M), radius=0.1))
    return EvidenceProblem(x_tilde=x_tilde, rho_L=rho_L, rho_U=rho_U, sigma2=sigma2, constraints=[con])


def triangle_problem(x_tilde=(-2.0, 0.0), epsilon=5.0, rho_L=0.1, rho_U=3.0):
    """A skewed triangle whose worst case along mu and -mu differ by a factor of 10."""
    tri = PolyhedralSet(D=np.array([[-1.0, 0.0], [1.0, 10.0], [1.0, -10.0]]), d=np.array([0.0, 10.0, 10.0]))
    con = RobustConstraintData(epsilon=epsilon, uncertainty_set=tri)
    return EvidenceProblem(x_tilde=np.asarray(x_tilde, dtype=float), rho_L=rho_L, rho_U=rho_U, sigma2=1.0, constraints=[con])


def hull_set(points):
    """Polyhedron {D h <= d} of the convex hull of the given points."""
    eq = scipy.spatial.ConvexHull(points).equations
    return PolyhedralSet(D=eq[:, :-1], d=-eq[:, -1])


def grid_minimum(prob, generators=None, steps=401):
    """
    Brute grid over mu in [-rho_U, rho_U]^2 restricted to band points.

    ``generators`` lists, per robust row, points whose convex hull is that row's
    set; a grid point is kept only if max |p^T mu| over those points is within
    epsilon. Without it the robust rows are ignored.
    """
    axis = np.linspace(-prob.rho_U, prob.rho_U, steps)
    axis = np.union1d(axis[np.abs(axis) >= prob.rho_L], [0.0])
    a, b = np.meshgrid(axis, axis, indexing="ij")
    mu = np.stack([a.ravel(), b.ravel()], axis=1)
    keep = np.ones(len(mu), dtype=bool)
    for points, con in zip(generators or [], prob.constraints):
        keep &= np.abs(mu @ np.asarray(points).T).max(axis=1) <= con.epsilon + 1e-12
    mu = mu[keep]
    values = ((mu * mu).sum(axis=1) - 2.0 * mu @ prob.x_tilde) / (2.0 * prob.sigma2)
    return min(0.0, float(values.min())) if len(values) else 0.0


class SetFamilies:
    """
    A few fixed uncertainty sets per (kind, M), reused across random instances.

    ``hull`` sets are convex hulls of a handful of exponentially spread points,
    far from symmetric about any center; their generating points are kept in
    ``generators``.
    """

    KINDS = ("polyhedral", "ellipsoid", "dnorm", "hull")

    def __init__(self, seed=0, per_kind=2, dims=range(2, 6)):
        rng = np.random.default_rng(seed)
        self.sets = {}
        self.generators = {}
        for M in dims:
            for kind in self.KINDS:
                families = []
                for f in range(per_kind):
                    N = 1 + f % 2
                    cols, gens = [], []
                    for _ in range(N):
                        center = rng.normal(size=M)
                        if kind == "polyhedral":
                            box = box_set(center, 0.2)
                            if f % 2:
                                D = np.vstack([box.D, np.ones((1, M))])
                                d = np.concatenate([box.d, [center.sum() + 0.1]])
                                cols.append(PolyhedralSet(D=D, d=d))
                            else:
                                cols.append(box)
                        elif kind == "ellipsoid":
                            cols.append(EllipsoidSet(center=center, radius=0.3))
                        elif kind == "dnorm":
                            cols.append(DNormSet(center=center, kappa=min(2, M), u_hat=0.3))
                        else:
                            points = center + rng.exponential(0.3, size=(M + 3, M)) ** 2
                            gens.append(points)
                            cols.append(hull_set(points))
                    families.append(cols)
                    self.generators[(kind, M, f)] = gens
                self.sets[(kind, M)] = families

    def instance(self, kind, rng, M=None, with_generators=False):
        M = int(rng.integers(2, 6)) if M is None else M
        f = int(rng.integers(0, len(self.sets[(kind, M)])))
        family = self.sets[(kind, M)][f]
        cons = [
            RobustConstraintData(epsilon=float(rng.uniform(0.3, 3.0)), uncertainty_set=s) for s in family
        ]
        prob = EvidenceProblem(
            x_tilde=rng.normal(scale=1.5, size=M), rho_L=0.5, rho_U=2.0, sigma2=1.0, constraints=cons
        )
        if with_generators:
            return prob, self.generators[(kind, M, f)]
        return prob


class ClosedFormTestCase(unittest.TestCase):
    def setUp(self):
        self.prob = loose_problem(np.array([1.0, 0.2]), rho_L=0.5, rho_U=2.0)

    def test_two_coordinate_example(self):
        """x = (1, 0.2), band [0.5, 2]: mu = (1, 0), objective -0.5."""
        sol = solve_bruteforce(self.prob)
        np.testing.assert_allclose(sol.mu, [1.0, 0.0], atol=1e-9)
        np.testing.assert_array_equal(sol.u, [1.0, 0.0])
        self.assertAlmostEqual(sol.objective, -0.5, places=9)
        self.assertAlmostEqual(grid_minimum(self.prob), -0.5, places=9)

    def test_example_evidence(self):
        """v_t of the two-coordinate example is 0.5 with either method."""
        self.assertAlmostEqual(v_t_exact(self.prob), 0.5, places=7)
        self.assertAlmostEqual(v_t_exact(self.prob, ExactSolverConfig(method="bruteforce")), 0.5, places=9)

    def test_zero_slack_forces_zero(self):
        """epsilon = 0 with a ball of positive radius leaves only mu = 0."""
        con = RobustConstraintData(epsilon=0.0, uncertainty_set=EllipsoidSet(center=np.array([1.0, -1.0]), radius=0.5))
        prob = EvidenceProblem(
            x_tilde=np.array([2.0, -1.5]), rho_L=0.5, rho_U=2.0, sigma2=1.0, constraints=[con]
        )
        for sol in (solve_bruteforce(prob), branch_and_bound(prob)):
            np.testing.assert_array_equal(sol.u, [0.0, 0.0])
            self.assertEqual(sol.objective, 0.0)
            self.assertEqual(sol.v_t, 0.0)

    def test_zero_observation(self):
        """x_tilde = 0 gives zero evidence."""
        prob = loose_problem(np.zeros(3), 1.0, 3.0)
        self.assertEqual(v_t_exact(prob), 0.0)

    def test_upper_bound(self):
        """The objective never drops below -||x||^2 / (2 sigma2)."""
        rng = np.random.default_rng(2)
        for _ in range(20):
            prob = loose_problem(rng.normal(scale=2.0, size=3), 0.5, 3.0, sigma2=0.7)
            v = v_t_exact(prob, ExactSolverConfig(method="bruteforce"))
            self.assertGreaterEqual(v, 0.0)
            self.assertLessEqual(v, prob.upper_bound() + 1e-9)

    def test_skewed_triangle(self):
        """Leaning against the long side of a skewed triangle is capped at |mu_1| <= 0.5."""
        prob = triangle_problem()
        for sol in (solve_bruteforce(prob), branch_and_bound(prob)):
            np.testing.assert_allclose(sol.mu, [-0.5, 0.0], atol=1e-6)
            self.assertAlmostEqual(sol.v_t, 0.875, delta=1e-6)
            self.assertEqual(check_solution(prob, sol), [])


class OracleEquivalenceTestCase(unittest.TestCase):
    def setUp(self):
        self.families = SetFamilies(seed=0)
        self.cfg = ExactSolverConfig(gap_tol=1e-7)

    def _compare(self, kind, count, seed):
        rng = np.random.default_rng(seed)
        for k in range(count):
            prob = self.families.instance(kind, rng)
            brute = solve_bruteforce(prob, self.cfg)
            bnb = branch_and_bound(prob, cfg=self.cfg)
            self.assertEqual(bnb.status, SolveStatus.OPTIMAL)
            self.assertAlmostEqual(bnb.objective, brute.objective, delta=1e-5, msg=f"{kind} instance {k}")
            self.assertLessEqual(bnb.bound, bnb.objective + 1e-9)
            self.assertEqual(check_solution(prob, bnb), [], msg=f"{kind} instance {k}")

    def test_polyhedral(self):
        """Branch-and-bound matches enumeration on polyhedral instances."""
        self._compare("polyhedral", 200, 10)

    def test_ellipsoid(self):
        """Branch-and-bound matches enumeration on ellipsoid instances."""
        self._compare("ellipsoid", 200, 11)

    def test_dnorm(self):
        """Branch-and-bound matches enumeration on D-norm instances."""
        self._compare("dnorm", 200, 12)

    def test_hull(self):
        """Branch-and-bound matches enumeration on skewed convex-hull instances."""
        self._compare("hull", 100, 13)


class LargerDimensionTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.families = SetFamilies(seed=6, per_kind=2, dims=range(6, 9))
        cls.cfg = ExactSolverConfig(gap_tol=1e-7)

    def test_branch_and_bound_matches_enumeration(self):
        """Agreement holds for M = 6, 7, 8 across every set family."""
        rng = np.random.default_rng(14)
        for M in (6, 7, 8):
            for kind in SetFamilies.KINDS:
                for k in range(2):
                    prob = self.families.instance(kind, rng, M=M)
                    brute = solve_bruteforce(prob, self.cfg)
                    bnb = branch_and_bound(prob, cfg=self.cfg)
                    msg = f"{kind} M={M} instance {k}"
                    self.assertEqual(bnb.status, SolveStatus.OPTIMAL, msg=msg)
                    self.assertAlmostEqual(bnb.objective, brute.objective, delta=1e-5, msg=msg)
                    self.assertEqual(check_solution(prob, bnb), [], msg=msg)


class GridOracleTestCase(unittest.TestCase):
    """Exact solvers against a dense grid whose feasibility test only uses hull points."""

    STEPS = 801
    # grid spacing times the objective's Lipschitz constant on the band
    GRID_TOL = 0.05

    def _check(self, prob, generators, msg=""):
        grid = grid_minimum(prob, generators, steps=self.STEPS)
        for sol in (solve_bruteforce(prob), branch_and_bound(prob, cfg=ExactSolverConfig(gap_tol=1e-7))):
            self.assertLessEqual(sol.objective, grid + 1e-6, msg=msg)
            self.assertGreaterEqual(sol.objective, grid - self.GRID_TOL, msg=msg)

    def test_triangle(self):
        """The skewed triangle agrees with the grid."""
        self._check(triangle_problem(), [TRIANGLE_POINTS])

    def test_random_hulls(self):
        """Two-dimensional hull instances agree with the grid."""
        families = SetFamilies(seed=15, per_kind=2, dims=[2])
        rng = np.random.default_rng(16)
        for k in range(12):
            prob, generators = families.instance("hull", rng, M=2, with_generators=True)
            self._check(prob, generators, msg=f"hull instance {k}")


class EvidencePropertyTestCase(unittest.TestCase):
    def setUp(self):
        self.families = SetFamilies(seed=18)
        self.rng = np.random.default_rng(19)

    def _with(self, prob, sigma2=None, factor=1.0):
        cons = [con.model_copy(update={"epsilon": con.epsilon * factor}) for con in prob.constraints]
        return EvidenceProblem(
            x_tilde=prob.x_tilde,
            rho_L=prob.rho_L,
            rho_U=prob.rho_U,
            sigma2=prob.sigma2 if sigma2 is None else sigma2,
            constraints=cons,
        )

    def test_larger_slack_never_lowers_evidence(self):
        """Enlarging every epsilon keeps or raises v_t."""
        for kind in SetFamilies.KINDS:
            for k in range(10):
                prob = self.families.instance(kind, self.rng)
                values = [solve_bruteforce(self._with(prob, factor=f)).v_t for f in (0.5, 1.0, 1.7, 4.0)]
                for lower, higher in zip(values, values[1:]):
                    self.assertGreaterEqual(higher, lower - 1e-6, msg=f"{kind} instance {k}: {values}")

    def test_noise_scaling(self):
        """Scaling sigma2 by c divides v_t by c and leaves the minimizer in place."""
        for kind in SetFamilies.KINDS:
            for k in range(6):
                prob = self.families.instance(kind, self.rng)
                base = solve_bruteforce(prob)
                for c in (0.25, 3.0):
                    scaled = solve_bruteforce(self._with(prob, sigma2=c * prob.sigma2))
                    msg = f"{kind} instance {k}, c={c}"
                    self.assertAlmostEqual(scaled.v_t, base.v_t / c, delta=1e-6 * (1.0 + base.v_t), msg=msg)
                    np.testing.assert_allclose(scaled.mu, base.mu, atol=1e-5, err_msg=msg)


class BruteForceTestCase(unittest.TestCase):
    def test_too_large(self):
        """Enumeration refuses M above the cap."""
        prob = loose_problem(np.ones(9), 0.5, 2.0)
        with self.assertRaises(TooLarge):
            solve_bruteforce(prob)

    def test_pattern_count(self):
        """3^M sign patterns."""
        self.assertEqual(len(all_patterns(4)), 81)

    def test_solution_passes_checker(self):
        """An enumerated optimum satisfies every constraint row."""
        rng = np.random.default_rng(5)
        families = SetFamilies(seed=1, per_kind=2)
        for kind in ("polyhedral", "ellipsoid", "dnorm"):
            prob = families.instance(kind, rng)
            self.assertEqual(check_solution(prob, solve_bruteforce(prob)), [])

    def test_checker_flags_violations(self):
        """A point outside the band is reported."""
        prob = loose_problem(np.array([1.0, 0.2]), 0.5, 2.0)
        sol = solve_bruteforce(prob)
        bad = sol.model_copy(update={"mu_plus": np.array([0.1, 0.0]), "phi": np.array([0.01, 0.0])})
        messages = check_solution(prob, bad)
        self.assertTrue(any("rho_L" in m for m in messages))


class BranchAndBoundTestCase(unittest.TestCase):
    def setUp(self):
        families = SetFamilies(seed=3, per_kind=1)
        self.prob = families.instance("ellipsoid", np.random.default_rng(9))

    def test_infinite_gap_returns_root_bound(self):
        """gap_tol = inf stops at the root relaxation."""
        sol = branch_and_bound(self.prob, gap_tol=math.inf)
        self.assertEqual(sol.status, SolveStatus.BOUND_ONLY)
        exact = solve_bruteforce(self.prob)
        self.assertLessEqual(sol.bound, exact.objective + 1e-6)

    def test_node_budget(self):
        """A one-node budget returns a valid incumbent and bound."""
        sol = branch_and_bound(self.prob, cfg=ExactSolverConfig(node_limit=1))
        self.assertIn(sol.status, (SolveStatus.OPTIMAL, SolveStatus.ITER_LIMIT))
        self.assertLessEqual(sol.bound, sol.objective + 1e-9)
        self.assertEqual(check_solution(self.prob, sol), [])

    def test_initial_pattern(self):
        """Starting from the optimal pattern changes nothing."""
        exact = solve_bruteforce(self.prob)
        warm = branch_and_bound(self.prob, initial_pattern=exact.pattern)
        self.assertAlmostEqual(warm.objective, exact.objective, delta=1e-6)

    def test_single_row_perspective(self):
        """The single-row relaxation still yields the exact optimum."""
        exact = solve_bruteforce(self.prob)
        sol = branch_and_bound(self.prob, cfg=ExactSolverConfig(perspective="single"))
        self.assertAlmostEqual(sol.objective, exact.objective, delta=1e-5)


class ProblemTestCase(unittest.TestCase):
    def test_set_dimension_mismatch(self):
        """Sets must live in the observation dimension."""
        con = RobustConstraintData(epsilon=1.0, uncertainty_set=EllipsoidSet(center=np.zeros(3), radius=0.1))
        with self.assertRaises(DimMismatch):
            EvidenceProblem(x_tilde=np.zeros(2), rho_L=1.0, rho_U=2.0, sigma2=1.0, constraints=[con])

    def test_band_order(self):
        """rho_U below rho_L is rejected."""
        with self.assertRaises(ValueError):
            loose_problem(np.zeros(2), 2.0, 1.0)

    def test_guideline_slack(self):
        """Bare sets take epsilon from the diameter guideline at rho_U."""
        model = SystemModel(H=IEEE14_REGION4_H, sigma2=1.0)
        sets = [EllipsoidSet(center=IEEE14_REGION4_H[:, i], radius=0.36) for i in range(3)]
        prob = build_problem(model, sets, np.zeros(5), EvidenceConfig(rho_L=1.0, rho_U=3.0))
        np.testing.assert_allclose(prob.epsilons, 0.72 * 3.0 * np.sqrt(5))

    def test_nominal_columns_follow_H(self):
        """Columns of H inside their sets become the nominal; others fall back to the center."""
        model = SystemModel(H=IEEE14_REGION4_H, sigma2=1.0)
        H = IEEE14_REGION4_H
        sets = [
            EllipsoidSet(center=H[:, 0] + 0.1, radius=0.5),
            EllipsoidSet(center=H[:, 1] + 1.0, radius=0.5),
            box_set(H[:, 2], 0.2),
        ]
        prob = build_problem(model, sets, np.zeros(5), EvidenceConfig(epsilon=1.0))
        np.testing.assert_array_equal(prob.constraints[0].nominal, H[:, 0])
        np.testing.assert_array_equal(prob.constraints[1].nominal, H[:, 1] + 1.0)
        np.testing.assert_array_equal(prob.constraints[2].nominal, H[:, 2])

    def test_set_count_mismatch(self):
        """One set per column of H."""
        model = SystemModel(H=IEEE14_REGION4_H, sigma2=1.0)
        with self.assertRaises(DimMismatch):
            build_problem(model, [box_set(np.zeros(5), 0.1)], np.zeros(5), EvidenceConfig())


class ExactEvidenceTestCase(unittest.TestCase):
    def setUp(self):
        self.spec = ieee14_region4()
        self.solver = ExactEvidence(self.spec.model, self.spec.sets, self.spec.evidence)

    def test_column_space_observation(self):
        """x in C(H) carries no evidence."""
        x = self.spec.model.H @ np.array([0.3, -0.2, 1.0])
        self.assertEqual(self.solver(x), 0.0)

    def test_injected_change(self):
        """A noiseless in-band change yields at least ||mu||^2 / (2 sigma2)."""
        mu = self.spec.model.projector.P @ np.array([3.0, 0.0, 0.0, 0.0, 0.0])
        mu = mu * (2.0 / np.abs(mu).max())
        x = self.spec.model.H @ np.array([0.5, 0.5, 0.5]) + mu
        v = self.solver(x)
        self.assertGreater(v, 0.0)
        self.assertLessEqual(v, float(mu @ mu) / 2.0 + 1e-6)
        self.assertEqual(check_solution(self.solver.problem(x), self.solver.last), [])

    def test_bruteforce_method(self):
        """Both methods agree through the solver wrapper."""
        brute = ExactEvidence(
            self.spec.model, self.spec.sets, self.spec.evidence, ExactSolverConfig(method="bruteforce")
        )
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.normal(scale=2.0, size=5)
            self.assertAlmostEqual(self.solver(x), brute(x), delta=1e-5)

    def test_reset(self):
        """reset clears the carried support."""
        self.solver(np.ones(5) * 3.0)
        self.solver.reset()
        self.assertIsNone(self.solver.last)
