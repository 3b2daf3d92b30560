import unittest

import numpy as np

from rosguard.config import ScheduleConfig
from rosguard.exceptions import Diverged
from rosguard.gllr_exact import EvidenceProblem, SolveStatus, solve_bruteforce
from rosguard.gllr_relaxed import (
    LagrangianBatch,
    RelaxedEvidence,
    SocpRelaxation,
    SolverSchedule,
    _batch_from_instances,
    box_relaxation_bound,
    build_socp,
    lift,
    run_lagrangian,
    solve_lagrangian,
    v_t_relaxed,
)
from rosguard.scenarios import ieee14_region4
from rosguard.tests.test_gllr_exact import SetFamilies, loose_problem, triangle_problem
from rosguard.uncertainty import EllipsoidSet, RobustConstraintData, robust_violation


def schedule(**overrides):
    return SolverSchedule.geometric(ScheduleConfig(**overrides))


class SocpInstanceTestCase(unittest.TestCase):
    def setUp(self):
        self.prob = loose_problem(np.array([1.0, -0.3, 2.5]), 0.5, 2.0)
        self.inst = build_socp(self.prob)

    def test_unit_u_reduces_to_square(self):
        """At u = 1 the cone row is mu^2 <= phi."""
        mu = np.array([0.7, -1.2, 0.0])
        phi = mu * mu
        rows = self.inst.soc_rows(phi, np.ones(3), np.maximum(mu, 0), np.maximum(-mu, 0))
        self.assertTrue(np.all(rows <= 1e-12))
        rows = self.inst.soc_rows(phi - 0.01, np.ones(3), np.maximum(mu, 0), np.maximum(-mu, 0))
        self.assertTrue(np.all(rows[:2] > 0))

    def test_zero_u_forces_zero(self):
        """At u = 0 only mu = 0 satisfies the cone row."""
        rows = self.inst.soc_rows(np.array([1.0]), np.array([0.0]), np.array([0.1]), np.array([0.0]))
        self.assertGreater(rows[0], 0.0)
        rows = self.inst.soc_rows(np.array([0.0]), np.array([0.0]), np.array([0.0]), np.array([0.0]))
        self.assertLessEqual(rows[0], 0.0)

    def test_integral_point_is_feasible_with_equal_objective(self):
        """An integral band point lifts to a feasible relaxed point with the same objective."""
        mu = np.array([1.0, 0.0, -2.0])
        for perspective in ("split", "single"):
            parts = lift(mu, self.prob.rho_L, self.prob.rho_U, perspective)
            inst = build_socp(self.prob, perspective)
            values = inst.constraint_values(parts["phi"], parts["u"], parts["b"], parts["mu_plus"], parts["mu_minus"])
            for name, rows in values.items():
                self.assertTrue(np.all(rows <= 1e-9), msg=f"{perspective} {name}")
            self.assertAlmostEqual(inst.objective(parts["phi"], mu), self.prob.objective(mu), places=12)

    def test_envelope(self):
        """The split envelope is max(mu^2, rho_L |mu|)."""
        mu = np.array([0.2, -1.0, 3.0])
        np.testing.assert_allclose(self.inst.envelope(mu), [0.1, 1.0, 9.0])

    def test_perspective_ratio_zero_over_zero(self):
        """0 / 0 counts as 0."""
        self.assertEqual(self.inst.perspective_ratio(np.zeros(1), np.zeros(1))[0], 0.0)


class RelaxationOrderingTestCase(unittest.TestCase):
    def setUp(self):
        self.families = SetFamilies(seed=4)
        self.rng = np.random.default_rng(21)

    def test_box_le_socp_le_exact(self):
        """box bound <= perspective bound <= exact minimum on random instances."""
        split = SocpRelaxation("split")
        for kind in ("polyhedral", "ellipsoid", "dnorm"):
            for _ in range(15):
                prob = self.families.instance(kind, self.rng)
                exact = solve_bruteforce(prob).objective
                socp = split.bound(prob)
                box = box_relaxation_bound(prob)
                self.assertLessEqual(box, socp + 1e-6)
                self.assertLessEqual(socp, exact + 1e-6)

    def test_strict_gap(self):
        """rho_L = rho_U = 1 and x = 0.4: box is strictly weaker than the perspective."""
        prob = loose_problem(np.full(3, 0.4), 1.0, 1.0)
        box = box_relaxation_bound(prob)
        socp = SocpRelaxation("split").bound(prob)
        exact = solve_bruteforce(prob).objective
        self.assertAlmostEqual(box, -0.16 * 3 / 2.0, places=5)
        self.assertAlmostEqual(socp, 0.0, places=5)
        self.assertEqual(exact, 0.0)
        self.assertLess(box, socp - 1e-3)

    def test_single_row_is_valid(self):
        """The single-row relaxation lies between box and exact."""
        single = SocpRelaxation("single")
        for _ in range(10):
            prob = self.families.instance("ellipsoid", self.rng)
            bound = single.bound(prob)
            self.assertLessEqual(box_relaxation_bound(prob), bound + 1e-6)
            self.assertLessEqual(bound, solve_bruteforce(prob).objective + 1e-6)

    def test_zero_observation(self):
        """x = 0 gives a zero box bound."""
        self.assertAlmostEqual(box_relaxation_bound(loose_problem(np.zeros(3), 0.5, 2.0)), 0.0, places=7)


class LagrangianTestCase(unittest.TestCase):
    def setUp(self):
        self.families = SetFamilies(seed=5)
        self.rng = np.random.default_rng(8)
        self.tight = schedule(eps_stop=1e-5, max_outer=500, shortcut=False, polish=False)

    def test_zero_batch(self):
        """x = 0 converges to mu = 0 within five outer rounds."""
        sched = schedule(shortcut=False, polish=False)
        prob = loose_problem(np.zeros(4), 0.5, 2.0)
        inst = build_socp(prob)
        sols = solve_lagrangian([inst] * 3, sched)
        for sol in sols:
            np.testing.assert_array_equal(sol.mu, np.zeros(4))
            self.assertEqual(sol.objective, 0.0)
        result = run_lagrangian(_batch_from_instances([inst], sched), sched)
        self.assertLessEqual(int(result.rounds[0]), 5)

    def test_batch_purity(self):
        """64 copies of one instance return the single-instance answer bitwise."""
        sched = schedule(shortcut=False, polish=False)
        prob = self.families.instance("ellipsoid", self.rng)
        inst = build_socp(prob)
        single = solve_lagrangian(inst, sched)[0]
        batch = solve_lagrangian([inst] * 64, sched)
        for sol in batch:
            np.testing.assert_array_equal(sol.mu, single.mu)
            self.assertEqual(sol.objective, single.objective)

    def test_mixed_batch_matches_individual(self):
        """Different observations in one batch are solved independently."""
        sched = schedule(shortcut=False, polish=False)
        base = self.families.instance("ellipsoid", self.rng)
        probs = [base.with_x(self.rng.normal(scale=1.5, size=base.M)) for _ in range(6)]
        insts = [build_socp(p) for p in probs]
        together = solve_lagrangian(insts, sched)
        for inst, sol in zip(insts, together):
            alone = solve_lagrangian(inst, sched)[0]
            np.testing.assert_array_equal(sol.mu, alone.mu)

    def test_mismatched_batch(self):
        """Instances with different sets cannot share a batch."""
        a = loose_problem(np.ones(3), 0.5, 2.0)
        con = RobustConstraintData(epsilon=1.0, uncertainty_set=EllipsoidSet(center=np.ones(3), radius=0.2))
        b = EvidenceProblem(x_tilde=np.ones(3), rho_L=0.5, rho_U=2.0, sigma2=1.0, constraints=[con])
        with self.assertRaises(ValueError):
            solve_lagrangian([build_socp(a), build_socp(b)])

    def test_close_to_interior_point(self):
        """Relaxed evidence is within 1e-3 of the conic optimum with the default schedule."""
        split = SocpRelaxation("split")
        sched = schedule()
        for kind in SetFamilies.KINDS:
            for k in range(4):
                prob = self.families.instance(kind, self.rng)
                sol = solve_lagrangian(build_socp(prob), sched)[0]
                ip = split.bound(prob)
                msg = f"{kind} instance {k}"
                self.assertGreaterEqual(sol.objective, ip - 1e-6, msg=msg)
                self.assertLessEqual(sol.bound, ip + 1e-6, msg=msg)
                self.assertAlmostEqual(max(0.0, -sol.bound), max(0.0, -ip), delta=1e-3, msg=msg)
                self.assertEqual(sol.status, SolveStatus.OPTIMAL, msg=msg)

    def test_certified_without_polish(self):
        """The dual bound alone stays below the conic optimum and the returned point stays feasible."""
        split = SocpRelaxation("split")
        sched = schedule(polish=False, shortcut=False)
        for kind in SetFamilies.KINDS:
            for k in range(4):
                prob = self.families.instance(kind, self.rng)
                sol = solve_lagrangian(build_socp(prob), sched)[0]
                msg = f"{kind} instance {k}"
                self.assertLessEqual(sol.bound, split.bound(prob) + 1e-6, msg=msg)
                self.assertLessEqual(sol.bound, sol.objective, msg=msg)
                self.assertTrue(np.all(robust_violation(prob.constraints, sol.mu) <= 1e-7), msg=msg)

    def test_multipliers_and_boxes(self):
        """Multipliers stay >= 0 and iterates stay in |mu| <= rho_U."""
        prob = self.families.instance("dnorm", self.rng)
        seen = []

        def watch(state):
            seen.append(state)
            self.assertTrue(np.all(state.multipliers >= 0.0))
            self.assertTrue(np.all(np.abs(state.mu) <= prob.rho_U + 1e-12))
            for key in ("u", "b"):
                self.assertTrue(np.all((state.primal[key] >= 0.0) & (state.primal[key] <= 1.0)))

        solve_lagrangian(build_socp(prob), schedule(shortcut=False, max_outer=20), callback=watch)
        self.assertTrue(seen)

    def test_loss_non_increasing_at_fixed_multipliers(self):
        """With backtracking every primal step keeps or lowers the loss."""
        prob = self.families.instance("polyhedral", self.rng)
        previous = []

        def watch(state):
            if state.phase == "primal" and previous:
                self.assertTrue(np.all(state.loss <= previous[-1] + 1e-9))
            previous.append(state.loss)

        solve_lagrangian(build_socp(prob), schedule(shortcut=False, max_outer=20), callback=watch)

    def test_diverged(self):
        """Huge steps without backtracking blow the loss up."""
        con = RobustConstraintData(epsilon=0.0, uncertainty_set=EllipsoidSet(center=np.zeros(2), radius=1.0))
        prob = EvidenceProblem(x_tilde=np.full(2, 3.0), rho_L=1.0, rho_U=3.0, sigma2=1.0, constraints=[con])
        sched = schedule(shortcut=False, backtracking=False, penalty=1e6, diverge_at=1e3)
        with self.assertRaises(Diverged):
            solve_lagrangian(build_socp(prob), sched)

    def test_status(self):
        """Instances report Optimal or IterLimit with a finite bound below the returned value."""
        prob = self.families.instance("ellipsoid", self.rng)
        sol = solve_lagrangian(build_socp(prob), self.tight)[0]
        self.assertIn(sol.status, (SolveStatus.OPTIMAL, SolveStatus.ITER_LIMIT))
        self.assertTrue(np.isfinite(sol.bound))
        self.assertLessEqual(sol.bound, sol.objective)


class RelaxedEvidenceTestCase(unittest.TestCase):
    def test_zero_observation(self):
        """x = 0 gives v = 0."""
        self.assertEqual(v_t_relaxed(loose_problem(np.zeros(3), 0.5, 2.0)), 0.0)

    def test_two_coordinate_example(self):
        """The x = (1, 0.2) example gives 0.5."""
        self.assertAlmostEqual(v_t_relaxed(loose_problem(np.array([1.0, 0.2]), 0.5, 2.0)), 0.5, places=9)

    def test_relaxed_bounds_exact(self):
        """v_relaxed >= v_exact on loose random instances, where the envelope is exact."""
        rng = np.random.default_rng(30)
        for _ in range(30):
            prob = loose_problem(rng.normal(scale=2.0, size=int(rng.integers(2, 6))), 0.5, 2.0)
            self.assertGreaterEqual(v_t_relaxed(prob), solve_bruteforce(prob).v_t - 1e-3)

    def test_never_below_exact_on_tight_instances(self):
        """v_relaxed >= v_exact - 1e-3 when the robust rows bind, with and without polishing."""
        families = SetFamilies(seed=31)
        rng = np.random.default_rng(32)
        schedules = [schedule(), schedule(polish=False)]
        for kind in SetFamilies.KINDS:
            for k in range(12):
                prob = families.instance(kind, rng)
                exact = solve_bruteforce(prob).v_t
                for sched in schedules:
                    relaxed = v_t_relaxed(prob, sched)
                    self.assertGreaterEqual(relaxed, exact - 1e-3, msg=f"{kind} instance {k}, polish={sched.polish}")

    def test_skewed_triangle(self):
        """The skewed triangle gives 0.875, not the 2.0 of a symmetric check."""
        prob = triangle_problem()
        self.assertAlmostEqual(v_t_relaxed(prob), 0.875, delta=1e-3)
        self.assertGreaterEqual(v_t_relaxed(prob, schedule(polish=False)), 0.875 - 1e-6)
        sol = solve_lagrangian(build_socp(prob), schedule())[0]
        self.assertLessEqual(robust_violation(prob.constraints, sol.mu)[0], 1e-7)
        np.testing.assert_allclose(sol.mu, [-0.5, 0.0], atol=5e-3)

    def test_batch_of_triangles(self):
        """The vectorized path agrees with the single-instance answer on the triangle."""
        prob = triangle_problem()
        sched = schedule()
        X = np.tile(prob.x_tilde, (3, 1))
        batch = LagrangianBatch(prob.constraints, X, prob.epsilons, prob.rho_L, prob.rho_U, prob.sigma2, sched)
        result = run_lagrangian(batch, sched)
        np.testing.assert_allclose(-result.bound, 0.875, atol=1e-3)
        self.assertTrue(np.all(result.objective >= result.bound))

    def test_evidence_bounds_on_stream(self):
        """0 <= v <= ||x_tilde||^2 / (2 sigma2) over 10^4 draws."""
        spec = ieee14_region4().with_sigma2(0.5)
        solver = RelaxedEvidence(spec.model, spec.sets, spec.evidence, ScheduleConfig(max_outer=10, polish=False))
        rng = np.random.default_rng(1)
        X = spec.model.H @ rng.uniform(-1, 1, size=(3, 10_000)) + rng.normal(scale=2.0, size=(5, 10_000))
        X = X.T
        v = solver.batch(X)
        upper = (spec.model.residual(X) ** 2).sum(axis=1) / (2.0 * spec.model.sigma2)
        self.assertTrue(np.all(v >= 0.0))
        self.assertTrue(np.all(v <= upper + 1e-9))

    def test_call_matches_batch(self):
        """Single calls agree with batch rows."""
        spec = ieee14_region4()
        solver = RelaxedEvidence(spec.model, spec.sets, spec.evidence)
        X = np.random.default_rng(2).normal(scale=2.0, size=(4, 5))
        batch = solver.batch(X)
        for x, v in zip(X, batch):
            self.assertAlmostEqual(solver(x), float(v), places=12)
