"""Adjoint pair estimation, Malliavin closed form and the residual checks."""

import numpy as np
import pytest

from fbmcontrol.adjoint import (adjoint_problem, bsde_residual,
                                constraint_residual_gamma, estimate_p,
                                estimate_q_bump, estimate_q_formula,
                                malliavin_dx, stationarity_residual)
from fbmcontrol.errors import UnsupportedModelError, UnsupportedRegimeError
from fbmcontrol.fbm import PathSet, kernel_weights
from fbmcontrol.lq import LqSpec, lq_model
from fbmcontrol.lq import lq_adjoint_problem
from fbmcontrol.sde import CoefficientModel, ControlProcess, euler_mixed


def zero(t, x, u):
    return np.zeros_like(np.asarray(x, dtype=float))


def one(t, x, u):
    return np.ones_like(np.asarray(x, dtype=float))


def trivial_model():
    return CoefficientModel(m=1, b=zero, sigma=[zero], gamma=[zero], b_x=zero,
                            b_u=zero, sigma_x=[zero], sigma_u=[zero],
                            gamma_x=[zero], gamma_u=[zero], linear_in_state=True)


def lq_fixture():
    return LqSpec(A=-1.0, A_tilde=1.0, M=0.2, M_tilde=0.0, N=0.0)


@pytest.fixture(scope="module")
def lq_problem(coupled_paths_256):
    """LQ fixture along an exogenous (frozen) control process."""
    spec = lq_fixture()
    n = coupled_paths_256.n_paths
    u = ControlProcess.from_values(np.zeros((n, coupled_paths_256.grid.n_nodes)))
    prob = lq_adjoint_problem(spec, lq_model(spec), u, coupled_paths_256)
    est = estimate_q_formula(prob, estimate_p(prob))
    return spec, prob, est


class TestEstimateP:
    def test_constant_terminal_gradient(self, coupled_paths_256):
        # f_x = 0, g_x = c, zero linearization: p(t) = c everywhere
        prob = adjoint_problem(trivial_model(), ControlProcess.constant(0.0),
                               1.0, coupled_paths_256,
                               fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: np.full_like(x, 3.25))
        est = estimate_p(prob)
        assert np.allclose(est.p, 3.25, atol=1e-10)

    def test_deterministic_running_gradient(self, coupled_paths_256):
        # f_x = 1, g_x = 0, Phi = Psi = 1: p(t) = T - t exactly
        prob = adjoint_problem(trivial_model(), ControlProcess.constant(0.0),
                               1.0, coupled_paths_256,
                               fx_fn=one, fu_fn=zero,
                               gx_fn=lambda x: np.zeros_like(x))
        est = estimate_p(prob)
        t = coupled_paths_256.grid.nodes
        assert np.allclose(est.p, (1.0 - t)[None, :], atol=1e-10)

    def test_lq_p0_matches_riccati_costate(self, lq_problem, coupled_paths_256):
        # u = 0 exogenous: p solves the linear (Lyapunov) adjoint; at t=0 the
        # state is deterministic, so compare against the analytic value
        spec, prob, est = lq_problem
        lam = 2 * (-1.0) + 0.2 ** 2
        gamma0 = 1.0 * (np.exp(lam) - 1) / lam + 1.0 * np.exp(lam)
        se = est.p_stderr()[0]
        assert abs(est.p[:, 0].mean() - gamma0 * spec.x0) < 3 * se + 2e-3

    def test_terminal_exact(self, lq_problem):
        _, prob, est = lq_problem
        assert np.array_equal(est.p[:, -1], prob.gx_T)

    def test_tower_property(self, lq_problem):
        # regression with intercept: fitted means equal target means per node
        _, _, est = lq_problem
        assert np.allclose(est.p.mean(axis=0), est.p_raw.mean(axis=0),
                           atol=1e-8)


class TestMalliavinDx:
    def test_zero_before_bump(self, lq_problem):
        _, prob, _ = lq_problem
        assert np.all(malliavin_dx(prob, 0, r=10, s=5) == 0.0)

    def test_constant_sigma_no_drift(self, coupled_paths_256):
        model = CoefficientModel(m=1, b=zero,
                                 sigma=[lambda t, x, u: np.full_like(x, 0.7)],
                                 gamma=[zero], b_x=zero, b_u=zero,
                                 sigma_x=[zero], sigma_u=[zero],
                                 gamma_x=[zero], gamma_u=[zero],
                                 linear_in_state=True)
        prob = adjoint_problem(model, ControlProcess.constant(0.0), 1.0,
                               coupled_paths_256, fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: x)
        d = malliavin_dx(prob, 0, r=30, s=200)
        assert np.allclose(d, 0.7, atol=1e-12)

    def test_requires_linear_model(self, coupled_paths_256):
        model = CoefficientModel(m=1, b=lambda t, x, u: np.sin(x), sigma=[zero],
                                 gamma=[zero], b_x=lambda t, x, u: np.cos(x),
                                 b_u=zero, sigma_x=[zero], sigma_u=[zero],
                                 gamma_x=[zero], gamma_u=[zero])
        prob = adjoint_problem(model, ControlProcess.constant(0.0), 1.0,
                               coupled_paths_256, fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: x)
        with pytest.raises(UnsupportedModelError):
            malliavin_dx(prob, 0, r=1, s=2)

    def test_matches_path_bump_oracle(self, lq_problem, coupled_paths_256):
        # central difference of the re-integrated state (frozen control)
        spec, prob, _ = lq_problem
        paths = coupled_paths_256
        grid = paths.grid
        r, s = 64, 192
        h = 1e-3 * np.sqrt(grid.dt)
        W = kernel_weights(grid, paths.hurst)
        model = lq_model(spec)
        u = ControlProcess.from_values(np.zeros_like(prob.x.X))

        def integrate(bump):
            dB = paths.dB.copy()
            dB[:, 0, r] += bump
            BH = paths.BH.copy()
            BH[..., r + 1:] += bump * W[r + 1:, r][None, None, :]
            bumped = PathSet(grid, paths.m, paths.n_paths, paths.seed,
                             paths.hurst, dB, paths.B, BH)
            return euler_mixed(model, u, spec.x0, bumped).X[:, s]

        fd = (integrate(+h) - integrate(-h)) / (2 * h)
        closed = malliavin_dx(prob, 0, r=r, s=s)
        rel = np.abs(fd - closed) / np.maximum(np.abs(fd), 1e-12)
        assert np.median(rel) < 1e-2


class TestQEstimation:
    def test_no_brownian_sensitivity_gives_zero_q(self, coupled_paths_256):
        # f_x, g_x path-independent and sigma_x = 0: q vanishes
        prob = adjoint_problem(trivial_model(), ControlProcess.constant(0.0),
                               1.0, coupled_paths_256, fx_fn=one, fu_fn=zero,
                               gx_fn=lambda x: np.full_like(x, 2.0),
                               fxx_fn=zero, gxx_fn=lambda x: np.zeros_like(x))
        est = estimate_q_formula(prob, estimate_p(prob))
        assert np.allclose(est.q, 0.0, atol=1e-12)

    def test_formula_needs_linear_model(self, coupled_paths_256):
        model = CoefficientModel(m=1, b=zero, sigma=[lambda t, x, u: np.sin(x)],
                                 gamma=[zero], b_x=zero, b_u=zero,
                                 sigma_x=[lambda t, x, u: np.cos(x)], sigma_u=[zero],
                                 gamma_x=[zero], gamma_u=[zero],
                                 linear_in_state=True)
        prob = adjoint_problem(model, ControlProcess.constant(0.0), 1.0,
                               coupled_paths_256, fx_fn=one, fu_fn=zero,
                               gx_fn=lambda x: x, fxx_fn=zero,
                               gxx_fn=lambda x: np.ones_like(x))
        with pytest.raises(UnsupportedModelError):
            estimate_q_formula(prob, estimate_p(prob))

    def test_formula_matches_bump_on_brownian_fixture(self, lq_problem):
        _, prob, est = lq_problem
        qb = estimate_q_bump(prob, est)
        n = est.p.shape[0]
        for k in range(0, prob.paths.grid.n_steps, 16):
            mf = est.q[0][:, k].mean()
            mb = np.nanmean(qb.q[0, :, k])
            se_f = est.q_raw[0][:, k].std(ddof=1) / np.sqrt(n)
            z = abs(mf - mb) / np.hypot(se_f, qb.mean_stderr[0, k])
            assert z <= 3.5, f"node {k}: z={z:.2f}"

    def test_bump_h_refinement_stable(self, lq_problem):
        _, prob, est = lq_problem
        h = 1e-3 * np.sqrt(prob.paths.grid.dt)
        qa = estimate_q_bump(prob, est, h=h)
        qb = estimate_q_bump(prob, est, h=h / 2)
        k = prob.paths.grid.n_steps // 2
        se = np.hypot(qa.mean_stderr[0, k], qb.mean_stderr[0, k])
        assert abs(np.nanmean(qa.q[0, :, k]) - np.nanmean(qb.q[0, :, k])) \
            <= max(3 * se, 1e-10)

    def test_bump_zero_for_constant_p(self, coupled_paths_256):
        prob = adjoint_problem(trivial_model(), ControlProcess.constant(0.0),
                               1.0, coupled_paths_256, fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: np.full_like(x, 3.0),
                               fxx_fn=zero, gxx_fn=lambda x: np.zeros_like(x))
        est = estimate_q_formula(prob, estimate_p(prob))
        qb = estimate_q_bump(prob, est)
        assert np.nanmax(np.abs(qb.q)) < 1e-10


class TestResiduals:
    def test_gamma_constraint_zero_for_lq(self, lq_problem):
        _, prob, est = lq_problem
        rep = constraint_residual_gamma(prob, est)
        assert np.all(rep.mean == 0.0)

    def test_gamma_constraint_flags_nonzero(self, coupled_paths_256):
        # gamma_u = c with p from a non-optimal fixture: nonzero and flagged
        c = 0.4
        model = CoefficientModel(m=1, b=zero, sigma=[zero],
                                 gamma=[lambda t, x, u: c * u], b_x=zero,
                                 b_u=zero, sigma_x=[zero], sigma_u=[zero],
                                 gamma_x=[zero],
                                 gamma_u=[lambda t, x, u: np.full_like(x, c)],
                                 linear_in_state=True)
        prob = adjoint_problem(model, ControlProcess.constant(1.0), 1.0,
                               coupled_paths_256, fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: np.full_like(x, 2.0))
        est = estimate_p(prob)
        rep = constraint_residual_gamma(prob, est)
        assert rep.max_abs_z() > 5

    def test_stationarity_rejects_gamma_u(self, coupled_paths_256):
        model = CoefficientModel(m=1, b=zero, sigma=[zero],
                                 gamma=[lambda t, x, u: 0.1 * u], b_x=zero,
                                 b_u=zero, sigma_x=[zero], sigma_u=[zero],
                                 gamma_x=[zero],
                                 gamma_u=[lambda t, x, u: np.full_like(x, 0.1)],
                                 linear_in_state=True)
        prob = adjoint_problem(model, ControlProcess.constant(0.0), 1.0,
                               coupled_paths_256, fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: x, fxx_fn=zero,
                               gxx_fn=lambda x: np.zeros_like(x))
        est = estimate_q_formula(prob, estimate_p(prob))
        with pytest.raises(UnsupportedRegimeError):
            stationarity_residual(prob, est)

    def test_stationarity_zero_by_construction(self, lq_problem):
        # f_u = -(b_u p + sigma_u q) pathwise: residual identically zero
        _, prob, est = lq_problem
        prob.fu = -(prob.lin.bu * est.p_raw
                    + (prob.lin.su * est.q_raw).sum(axis=0))
        rep = stationarity_residual(prob, est)
        assert np.allclose(rep.mean, 0.0, atol=1e-14)

    def test_bsde_zero_for_trivial_model(self, coupled_paths_256):
        prob = adjoint_problem(trivial_model(), ControlProcess.constant(0.0),
                               1.0, coupled_paths_256, fx_fn=zero, fu_fn=zero,
                               gx_fn=lambda x: np.full_like(x, 2.0),
                               fxx_fn=zero, gxx_fn=lambda x: np.zeros_like(x))
        est = estimate_q_formula(prob, estimate_p(prob))
        rep = bsde_residual(prob, est)
        assert np.allclose(rep.mean, 0.0, atol=1e-12)
        assert np.allclose(rep.mean_sq, 0.0, atol=1e-20)

    def test_bsde_terminal_identity(self, lq_problem):
        _, prob, est = lq_problem
        assert np.array_equal(est.p[:, -1], prob.gx_T)

    def test_bsde_unbiased_on_lq_fixture(self, lq_problem):
        _, prob, est = lq_problem
        rep = bsde_residual(prob, est)
        assert rep.max_abs_z() < 4.0

    def test_csv_export(self, lq_problem, tmp_path):
        _, prob, est = lq_problem
        rep = bsde_residual(prob, est)
        f = tmp_path / "resid.csv"
        rep.to_csv(f)
        header = f.read_text().splitlines()[0]
        assert header == "node,t,mean,stderr,mean_sq"
        est.to_csv(tmp_path / "adj.csv")
        assert (tmp_path / "adj.csv").read_text().splitlines()[0] == \
            "node,t,p_mean,p_stderr,q_mean,q_stderr"
