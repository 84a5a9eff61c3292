"""LQ solver end to end: cost, Riccati oracle, Picard fixed point, optimality."""

import numpy as np
import pytest
from scipy.integrate import quad

from fbmcontrol.adjoint import stationarity_residual
from fbmcontrol.errors import DomainError, UnsupportedModelError
from fbmcontrol.fbm import TimeGrid, fbm_from_kernel, generate_bm
from fbmcontrol.lq import (LqSpec, PicardOptions, convexity_check,
                           direct_scenario, independent_bm_scenario, lq_cost,
                           lq_model, lq_picard_solve, optimality_sweep,
                           random_adapted_directions, riccati_oracle)
from fbmcontrol.sde import ControlProcess, euler_mixed

N_PATHS = 6000
N_STEPS = 128


@pytest.fixture(scope="module")
def paths():
    return fbm_from_kernel(generate_bm(TimeGrid(1.0, N_STEPS), 1, N_PATHS,
                                       seed=4242), 0.75)


@pytest.fixture(scope="module")
def paths_m2():
    return fbm_from_kernel(generate_bm(TimeGrid(1.0, N_STEPS), 2, N_PATHS,
                                       seed=4242), 0.75)


def brownian_spec():
    return LqSpec(A=-1.0, A_tilde=1.0, M=0.2, M_tilde=0.0, N=0.0)


def mixed_spec():
    return LqSpec(A=-1.0, A_tilde=1.0, M=0.2, M_tilde=0.0, N=0.3)


@pytest.fixture(scope="module")
def solved(paths):
    return lq_picard_solve(brownian_spec(), paths,
                           PicardOptions(tol=1e-5, max_iter=30))


@pytest.fixture(scope="module")
def solved_mixed(paths):
    return lq_picard_solve(mixed_spec(), paths,
                           PicardOptions(tol=1e-5, max_iter=30))


class TestSpecValidation:
    def test_negative_q_rejected(self, paths):
        with pytest.raises(DomainError):
            LqSpec(Q=-0.5).validate_on(paths.grid)

    def test_zero_r_rejected(self, paths):
        with pytest.raises(DomainError):
            LqSpec(R=0.0).validate_on(paths.grid)

    def test_nonpositive_g_rejected(self, paths):
        with pytest.raises(DomainError):
            LqSpec(G=0.0).validate_on(paths.grid)

    def test_time_dependent_coefficients_accepted(self, paths):
        spec = LqSpec(Q=lambda t: 1 + t, R=lambda t: 0.5 + 0.1 * np.sin(t))
        assert spec.validate_on(paths.grid) > 0


class TestLqCost:
    def test_pure_terminal_cost(self, paths):
        spec = LqSpec(A=0.0, A_tilde=0.0, M=0.0, M_tilde=0.0, N=0.0, Q=0.0,
                      G=2.0, x0=1.5)
        est = lq_cost(spec, ControlProcess.constant(0.0), paths)
        assert est.J == pytest.approx(0.5 * 2.0 * 1.5 ** 2)
        assert est.stderr == 0.0

    def test_nonnegative(self, paths, solved):
        assert solved.J >= 0.0
        assert np.all(lq_cost(brownian_spec(), solved.u, paths,
                              x=solved.problem.x).per_path >= 0.0)

    def test_deterministic_ode_oracle(self, paths):
        # M = N = 0, u = c: X solves a linear ODE; J by closed-form quadrature
        a, at, c = -0.8, 0.5, 0.3
        spec = LqSpec(A=a, A_tilde=at, M=0.0, M_tilde=0.0, N=0.0, Q=1.0,
                      R=2.0, G=1.0, x0=1.0)
        est = lq_cost(spec, ControlProcess.constant(c), paths)

        def x_exact(t):
            return np.exp(a * t) * 1.0 + at * c * (np.exp(a * t) - 1) / a

        run, _ = quad(lambda t: x_exact(t) ** 2 + 2.0 * c ** 2, 0, 1)
        expected = 0.5 * (run + x_exact(1.0) ** 2)
        assert est.J == pytest.approx(expected, rel=2e-2)  # O(dt) Euler bias


class TestRiccatiOracle:
    def test_zero_cost_weights(self, paths):
        spec = LqSpec(Q=0.0, G=1e-12, M_tilde=0.0, N=0.0)
        # G must be positive; use a tiny value and expect ~0 throughout
        sol = riccati_oracle(spec, paths.grid)
        assert np.all(np.abs(sol.P) < 1e-10)
        assert np.all(np.abs(sol.K) < 1e-10)
        assert sol.J == pytest.approx(0.0, abs=1e-12)

    def test_requires_n_zero(self, paths):
        with pytest.raises(UnsupportedModelError):
            riccati_oracle(mixed_spec(), paths.grid)

    def test_dual_implementation_deterministic_lqr(self, paths):
        # independent textbook Riccati right-hand side, same RK4 driver
        spec = LqSpec(A=-0.5, A_tilde=1.0, M=0.0, M_tilde=0.0, N=0.0,
                      Q=2.0, R=1.0, G=0.5)
        sol = riccati_oracle(spec, paths.grid, n_fine=4096)

        def textbook_rhs(p):
            return -(2 * (-0.5) * p + 2.0 - 1.0 ** 2 * p ** 2 / 1.0)

        ts = np.linspace(0, 1, 4097)
        h = -1.0 / 4096
        P = np.empty(4097)
        P[-1] = 0.5
        for i in range(4096, 0, -1):
            p0 = P[i]
            k1 = textbook_rhs(p0)
            k2 = textbook_rhs(p0 + h / 2 * k1)
            k3 = textbook_rhs(p0 + h / 2 * k2)
            k4 = textbook_rhs(p0 + h * k3)
            P[i - 1] = p0 + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        assert np.max(np.abs(P - sol.P)) < 1e-8

    def test_oracle_dominates_suboptimal_controls(self, paths):
        spec = brownian_spec()
        ric = riccati_oracle(spec, paths.grid)
        for c in (0.0, -1.0, 0.5):
            sub = lq_cost(spec, ControlProcess.constant(c), paths)
            assert ric.J <= sub.J + 3 * sub.stderr


class TestPicardSolve:
    def test_no_actuation_gives_zero_control(self, paths):
        spec = LqSpec(A=-1.0, A_tilde=0.0, M=0.2, M_tilde=0.0, N=0.0)
        sol = lq_picard_solve(spec, paths, PicardOptions(max_iter=5))
        assert sol.converged and len(sol.iterations) == 1
        assert np.all(sol.u.values == 0.0)

    def test_riccati_agreement(self, paths, solved):
        ric = riccati_oracle(brownian_spec(), paths.grid)
        assert solved.converged
        assert abs(solved.J - ric.J) <= 3 * solved.J_stderr + 0.02 * solved.J

    def test_p0_matches_riccati_costate(self, paths, solved):
        # p(0) = P(0) x0 at the optimum, within MC noise + O(dt) allowance
        ric = riccati_oracle(brownian_spec(), paths.grid)
        p0 = solved.estimate.p[:, 0].mean()
        se = solved.estimate.p_stderr()[0]
        assert abs(p0 - ric.P[0] * 1.0) <= 3 * se + 0.02 * ric.P[0]

    def test_cost_non_increasing(self, solved):
        js = [row["J"] for row in solved.iterations]
        ses = [row["J_stderr"] for row in solved.iterations]
        for i in range(len(js) - 1):
            assert js[i + 1] <= js[i] + 3 * ses[i]

    def test_fixed_point_extra_step(self, paths, solved):
        # one extra sweep from the returned control moves it by < tol
        spec = brownian_spec()
        f = spec.fns()
        t = paths.grid.nodes
        r_nodes = np.array([f["R"](ti) for ti in t])
        at_nodes = np.array([f["A_tilde"](ti) for ti in t])
        target = -at_nodes * solved.estimate.p / r_nodes
        du = 0.5 * (target - solved.u.values)  # theta = 0.5 damped step
        change = np.sqrt((du[:, :-1] ** 2).sum(axis=1).mean() * paths.grid.dt)
        assert change < 1e-5

    def test_uniqueness_two_initializations(self, paths, solved):
        other = lq_picard_solve(brownian_spec(), paths,
                                PicardOptions(tol=1e-5, max_iter=30, u0=1.0))
        assert other.converged
        assert solved.control_l2_distance(other) < 5 * 1e-5

    def test_non_convergence_flagged(self, paths):
        sol = lq_picard_solve(brownian_spec(), paths,
                              PicardOptions(tol=1e-12, max_iter=2))
        assert not sol.converged

    def test_stationarity_at_brownian_optimum(self, solved):
        rep = stationarity_residual(solved.problem, solved.estimate)
        assert rep.max_abs_z() <= 3.0

    def test_stationarity_at_mixed_optimum(self, solved_mixed):
        assert solved_mixed.converged
        rep = stationarity_residual(solved_mixed.problem, solved_mixed.estimate)
        assert rep.max_abs_z() <= 3.0

    def test_perturbed_control_detected(self, paths, solved_mixed):
        # 20% perturbation: residual exceeds 5 stderr somewhere
        from fbmcontrol.lq import lq_adjoint_problem
        from fbmcontrol.adjoint import estimate_p, estimate_q_formula
        spec = mixed_spec()
        u_bad = ControlProcess.from_values(1.2 * solved_mixed.u.values)
        prob = lq_adjoint_problem(spec, lq_model(spec), u_bad, solved_mixed.problem.paths)
        est = estimate_q_formula(prob, estimate_p(prob))
        rep = stationarity_residual(prob, est)
        assert rep.max_abs_z() > 5.0


class TestOptimalitySweep:
    def test_zero_direction_exact_zero(self, paths, solved):
        rows = optimality_sweep(brownian_spec(), solved.u,
                                [ControlProcess.constant(0.0)], [0.1], paths)
        assert rows[0].dJ == 0.0 and rows[0].deriv == 0.0

    def test_random_directions_pass(self, paths, solved):
        directions = random_adapted_directions(paths, 8, seed=99)
        rows = optimality_sweep(brownian_spec(), solved.u, directions,
                                [0.05, 0.1, 0.2], paths)
        assert len(rows) == 24
        for r in rows:
            assert r.diff_ok(), f"dir {r.direction} eps {r.eps}: dJ={r.dJ}"
            assert r.deriv_ok(), f"dir {r.direction} eps {r.eps}: deriv={r.deriv}"

    def test_wrong_control_detected(self, paths, solved):
        bad = ControlProcess.from_values(solved.u.values + 1.0)
        directions = random_adapted_directions(paths, 8, seed=99)
        rows = optimality_sweep(brownian_spec(), bad, directions, [0.1], paths)
        assert any(abs(r.deriv) > 5 * r.deriv_stderr for r in rows)


class TestConvexity:
    def test_equal_controls(self, paths, solved):
        rep = convexity_check(brownian_spec(), solved.u, solved.u, paths)
        assert rep.margin_mean == pytest.approx(0.0, abs=1e-12)
        assert rep.J1 == rep.J2 == rep.J_mid

    def test_random_pair_margin_holds(self, paths):
        rng = np.random.default_rng(17)
        shape = (paths.n_paths, paths.grid.n_nodes)
        u1 = ControlProcess.from_values(rng.standard_normal(shape) * 0.5)
        u2 = ControlProcess.from_values(rng.standard_normal(shape) * 0.5)
        rep = convexity_check(brownian_spec(), u1, u2, paths)
        assert rep.holds()

    def test_state_midpoint_linearity(self, paths):
        u1 = ControlProcess.constant(1.0)
        u2 = ControlProcess.constant(-0.5)
        rep = convexity_check(mixed_spec(), u1, u2, paths)
        assert rep.state_midpoint_gap < 1e-12


class TestIndependentDriverScenario:
    def test_reduction_to_single_driver(self, paths, paths_m2):
        # sigma == 0: the stacked model reproduces the direct one bit for bit
        spec = LqSpec(A=-1.0, A_tilde=1.0, M=0.0, M_tilde=0.0, N=0.3)
        u = ControlProcess.constant(0.2)
        x_direct = euler_mixed(lq_model(spec, direct_scenario()), u, 1.0, paths)
        x_stacked = euler_mixed(lq_model(spec, independent_bm_scenario()), u,
                                1.0, paths_m2)
        assert np.array_equal(x_direct.X, x_stacked.X)

    def test_independent_drivers_uncorrelated(self, paths_m2):
        # corr(B^H of driver 1, W = driver 2) ~ 0
        bh = paths_m2.BH[:, 0, -1]
        w = paths_m2.B[:, 1, -1]
        r = np.corrcoef(bh, w)[0, 1]
        assert abs(r) < 4.0 / np.sqrt(paths_m2.n_paths)

    def test_stacked_solve_stationarity(self, paths_m2):
        sol = lq_picard_solve(mixed_spec(), paths_m2,
                              PicardOptions(tol=1e-5, max_iter=30),
                              scenario=independent_bm_scenario())
        assert sol.converged
        rep = stationarity_residual(sol.problem, sol.estimate)
        assert rep.max_abs_z() <= 3.0
