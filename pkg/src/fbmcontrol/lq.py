"""Linear-quadratic control under mixed fractional noise, solved end to end.

The first-order condition u = -R^{-1}(A~ p + M~ q) is iterated to a damped
fixed point with the adjoint pair re-estimated each sweep; a classical
Riccati oracle covers the Brownian-only sub-case (fractional coefficient
N == 0), and optimality / convexity checks run on common random numbers so
the comparisons resolve at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import (AdjointEstimate, AdjointProblem, RegressionBasis,
                      adjoint_problem, estimate_p, estimate_q_formula)
from .errors import DomainError, UnsupportedModelError
from .fbm import PathSet, TimeGrid
from .sde import CoefficientModel, ControlProcess, StatePath, euler_mixed

__all__ = [
    "LqSpec",
    "LqScenario",
    "LqSolution",
    "PicardOptions",
    "lq_model",
    "independent_bm_scenario",
    "lq_cost",
    "lq_picard_solve",
    "riccati_oracle",
    "RiccatiSolution",
    "optimality_sweep",
    "convexity_check",
    "random_adapted_directions",
]


def as_timefn(c):
    """Lift constants to time functions; pass callables through."""
    if callable(c):
        return c
    val = float(c)
    return lambda t: val


@dataclass(frozen=True)
class LqSpec:
    """Coefficient tuple (A, A~, M, M~, N, Q, R, G, x0, T), functions of time.

    Constants are accepted anywhere a function is; Q >= 0, R >= delta > 0 and
    G > 0 are checked on the working grid before any computation.
    """

    A: object = -1.0
    A_tilde: object = 1.0
    M: object = 0.2
    M_tilde: object = 0.0
    N: object = 0.0
    Q: object = 1.0
    R: object = 1.0
    G: float = 1.0
    x0: float = 1.0
    T: float = 1.0

    def fns(self):
        return {name: as_timefn(getattr(self, name))
                for name in ("A", "A_tilde", "M", "M_tilde", "N", "Q", "R")}

    def validate_on(self, grid: TimeGrid) -> float:
        """Check the definiteness invariants on grid nodes; returns delta = min R."""
        if abs(grid.horizon - self.T) > 1e-12:
            raise DomainError(f"grid horizon {grid.horizon} != spec horizon {self.T}")
        f = self.fns()
        t = grid.nodes
        q = np.array([f["Q"](ti) for ti in t])
        r = np.array([f["R"](ti) for ti in t])
        if q.min() < 0:
            raise DomainError(f"Q(t) must be >= 0 on [0,T]; min {q.min():.3e}")
        delta = float(r.min())
        if delta <= 0:
            raise DomainError(f"R(t) must be positive on [0,T]; min {delta:.3e}")
        if not self.G > 0:
            raise DomainError(f"G must be positive, got {self.G}")
        return delta

    def is_brownian_only(self, grid: TimeGrid) -> bool:
        n = self.fns()["N"]
        return max(abs(n(ti)) for ti in grid.nodes) == 0.0


@dataclass(frozen=True)
class LqScenario:
    """Driver wiring of an LQ model: which drivers carry M x + M~ u and N x."""

    m: int
    sigma_driver: int  # index of the Brownian-diffusion driver
    gamma_driver: int  # index of the fractional-diffusion driver
    label: str


def direct_scenario() -> LqScenario:
    """Single driver: the fractional path rides on the same Brownian motion."""
    return LqScenario(1, 0, 0, "underlying")


def independent_bm_scenario() -> LqScenario:
    """Stacked two-driver model for an independent Brownian motion W.

    sigma~ = (0, sigma) and gamma~ = (gamma, 0) over drivers (B, W) with
    coupled (B^H, W^H); every downstream operation runs unchanged on m = 2.
    """
    return LqScenario(2, 1, 0, "independent")


def lq_model(spec: LqSpec, scenario: LqScenario = direct_scenario()) -> CoefficientModel:
    """Coefficient model of the LQ state equation under the given wiring."""
    f = spec.fns()
    A, At, M, Mt, N = f["A"], f["A_tilde"], f["M"], f["M_tilde"], f["N"]
    zero = lambda t, x, u: np.zeros_like(np.asarray(x, dtype=float))

    def sigma_fn(t, x, u):
        return M(t) * x + Mt(t) * u

    def gamma_fn(t, x, u):
        return N(t) * x

    sig = [zero] * scenario.m
    gam = [zero] * scenario.m
    sig_x = [zero] * scenario.m
    sig_u = [zero] * scenario.m
    gam_x = [zero] * scenario.m
    gam_u = [zero] * scenario.m
    sig[scenario.sigma_driver] = sigma_fn
    sig_x[scenario.sigma_driver] = lambda t, x, u: M(t) * np.ones_like(x)
    sig_u[scenario.sigma_driver] = lambda t, x, u: Mt(t) * np.ones_like(x)
    gam[scenario.gamma_driver] = gamma_fn
    gam_x[scenario.gamma_driver] = lambda t, x, u: N(t) * np.ones_like(x)

    return CoefficientModel(
        m=scenario.m,
        b=lambda t, x, u: A(t) * x + At(t) * u,
        sigma=sig, gamma=gam,
        b_x=lambda t, x, u: A(t) * np.ones_like(x),
        b_u=lambda t, x, u: At(t) * np.ones_like(x),
        sigma_x=sig_x, sigma_u=sig_u, gamma_x=gam_x, gamma_u=gam_u,
        linear_in_state=True)


@dataclass(frozen=True)
class CostEstimate:
    J: float
    stderr: float
    per_path: np.ndarray


def _cost_per_path(spec: LqSpec, x: StatePath, u_values: np.ndarray) -> np.ndarray:
    f = spec.fns()
    t = x.grid.nodes
    qv = np.array([f["Q"](ti) for ti in t[:-1]])
    rv = np.array([f["R"](ti) for ti in t[:-1]])
    run = ((qv * x.X[:, :-1] ** 2 + rv * u_values[:, :-1] ** 2)
           * x.grid.dt).sum(axis=1)
    return 0.5 * (run + spec.G * x.X[:, -1] ** 2)


def lq_cost(spec: LqSpec, u: ControlProcess, paths: PathSet,
            scenario: LqScenario = direct_scenario(),
            x: StatePath | None = None) -> CostEstimate:
    """Monte Carlo cost J(u) = (1/2) E[ int (Q X^2 + R u^2) dt + G X(T)^2 ]."""
    spec.validate_on(paths.grid)
    if x is None:
        x = euler_mixed(lq_model(spec, scenario), u, spec.x0, paths)
    per_path = _cost_per_path(spec, x, u.materialize(x))
    return CostEstimate(float(per_path.mean()),
                        float(per_path.std(ddof=1) / np.sqrt(len(per_path))),
                        per_path)


def lq_adjoint_problem(spec: LqSpec, model: CoefficientModel,
                       u: ControlProcess, paths: PathSet) -> AdjointProblem:
    """Adjoint inputs for an LQ spec along the pair driven by ``u``."""
    f = spec.fns()
    Q, R, G = f["Q"], f["R"], spec.G
    return adjoint_problem(
        model, u, spec.x0, paths,
        fx_fn=lambda t, x, uu: Q(t) * x,
        fu_fn=lambda t, x, uu: R(t) * uu,
        gx_fn=lambda x: G * x,
        fxx_fn=lambda t, x, uu: Q(t) * np.ones_like(x),
        gxx_fn=lambda x: G * np.ones_like(x))


@dataclass
class PicardOptions:
    theta: float = 0.5          # damping; undamped iteration can oscillate when M~ != 0
    tol: float = 1e-3           # mean-L2 control change
    max_iter: int = 50
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    u0: float = 0.0


@dataclass
class LqSolution:
    spec: LqSpec
    scenario: LqScenario
    u: ControlProcess
    problem: AdjointProblem
    estimate: AdjointEstimate
    J: float
    J_stderr: float
    iterations: list  # rows {iter, change, J, J_stderr}
    converged: bool

    def control_l2_distance(self, other: "LqSolution") -> float:
        du = self.u.values - other.u.values
        return float(np.sqrt((du[:, :-1] ** 2).sum(axis=1).mean()
                             * self.problem.paths.grid.dt))


def _mean_l2(du: np.ndarray, dt: float) -> float:
    return float(np.sqrt((du[:, :-1] ** 2).sum(axis=1).mean() * dt))


def lq_picard_solve(spec: LqSpec, paths: PathSet,
                    options: PicardOptions | None = None,
                    scenario: LqScenario = direct_scenario()) -> LqSolution:
    """Damped fixed-point iteration on u = -R^{-1}(A~ p + sum_j M~_j q_j).

    Each sweep simulates the state under the current control, re-estimates
    (p, q) from the explicit representations, and moves the control a step
    theta toward the first-order-condition target.  Non-convergence is
    returned as a flagged solution, never silently.
    """
    options = options or PicardOptions()
    delta = spec.validate_on(paths.grid)
    assert delta > 0
    model = lq_model(spec, scenario)
    f = spec.fns()
    t = paths.grid.nodes
    r_nodes = np.array([f["R"](ti) for ti in t])
    at_nodes = np.array([f["A_tilde"](ti) for ti in t])
    mt_nodes = np.array([f["M_tilde"](ti) for ti in t])

    u = ControlProcess.from_values(
        np.full((paths.n_paths, paths.grid.n_nodes), float(options.u0)))
    log = []
    converged = False
    prob = est = None
    for it in range(options.max_iter):
        prob = lq_adjoint_problem(spec, model, u, paths)
        est = estimate_q_formula(prob, estimate_p(prob, options.basis))
        target = -(at_nodes * est.p
                   + mt_nodes * est.q[scenario.sigma_driver]) / r_nodes
        change = options.theta * _mean_l2(target - u.values, paths.grid.dt)
        cost = _cost_per_path(spec, prob.x, u.values)
        log.append({"iter": it, "change": change,
                    "J": float(cost.mean()),
                    "J_stderr": float(cost.std(ddof=1) / np.sqrt(len(cost)))})
        u = ControlProcess.from_values(
            (1 - options.theta) * u.values + options.theta * target)
        if change < options.tol:
            converged = True
            break
    # final estimates at the returned control
    prob = lq_adjoint_problem(spec, model, u, paths)
    est = estimate_q_formula(prob, estimate_p(prob, options.basis))
    cost = _cost_per_path(spec, prob.x, u.values)
    return LqSolution(spec, scenario, u, prob, est,
                      float(cost.mean()),
                      float(cost.std(ddof=1) / np.sqrt(len(cost))),
                      log, converged)


@dataclass(frozen=True)
class RiccatiSolution:
    t: np.ndarray
    P: np.ndarray
    K: np.ndarray
    J: float

    def feedback(self) -> ControlProcess:
        t, K = self.t, self.K
        return ControlProcess.from_feedback(
            lambda ti, x: -np.interp(ti, t, K) * x)

    def P_at(self, ti):
        return np.interp(ti, self.t, self.P)


def riccati_oracle(spec: LqSpec, grid: TimeGrid, n_fine: int = 4096) -> RiccatiSolution:
    """Classical stochastic-LQ Riccati solution for the N == 0 sub-case.

    Solves -P' = 2AP + M^2 P + Q - (A~ P + M M~ P)^2 / (R + M~^2 P), P(T) = G
    backward with RK4 on a fine grid; returns the feedback gain
    K = (A~ P + M M~ P)/(R + M~^2 P) and the closed-form cost J = P(0) x0^2 / 2.
    """
    if not spec.is_brownian_only(grid):
        raise UnsupportedModelError("Riccati oracle requires N == 0")
    spec.validate_on(grid)
    f = spec.fns()
    A, At, M, Mt, Q, R = (f[k] for k in ("A", "A_tilde", "M", "M_tilde", "Q", "R"))

    def rhs(t, p):
        gain_num = At(t) * p + M(t) * Mt(t) * p
        denom = R(t) + Mt(t) ** 2 * p
        return -(2 * A(t) * p + M(t) ** 2 * p + Q(t) - gain_num ** 2 / denom)

    ts = np.linspace(0.0, spec.T, n_fine + 1)
    h = -spec.T / n_fine
    P = np.empty(n_fine + 1)
    P[-1] = spec.G
    for i in range(n_fine, 0, -1):
        t0, p0 = ts[i], P[i]
        k1 = rhs(t0, p0)
        k2 = rhs(t0 + h / 2, p0 + h / 2 * k1)
        k3 = rhs(t0 + h / 2, p0 + h / 2 * k2)
        k4 = rhs(t0 + h, p0 + h * k3)
        P[i - 1] = p0 + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(P[i - 1]) or abs(P[i - 1]) > 1e12:
            raise DomainError(f"Riccati blow-up at t = {ts[i-1]:.4f}")
    K = np.array([(At(ti) * pi + M(ti) * Mt(ti) * pi) / (R(ti) + Mt(ti) ** 2 * pi)
                  for ti, pi in zip(ts, P)])
    return RiccatiSolution(ts, P, K, float(0.5 * P[0] * spec.x0 ** 2))


def random_adapted_directions(paths: PathSet, n_directions: int, seed: int,
                              dim: int = 0) -> list[ControlProcess]:
    """Bounded adapted perturbation directions built from the path prefix."""
    rng = np.random.default_rng(seed)
    directions = []
    for _ in range(n_directions):
        a, b = rng.uniform(-1, 1, 2)
        omega = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)

        def fn(k, t, b_prefix, a=a, b=b, omega=omega, phase=phase):
            drive = b_prefix[:, dim, -1]  # B(t_k): adapted
            return a * np.sin(2 * np.pi * omega * t + phase) + b * np.tanh(drive)

        directions.append(ControlProcess.from_prefix(paths, fn))
    return directions


@dataclass(frozen=True)
class SweepRow:
    direction: int
    eps: float
    dJ: float
    dJ_stderr: float
    deriv: float
    deriv_stderr: float

    def diff_ok(self) -> bool:
        return self.dJ >= -3 * self.dJ_stderr

    def deriv_ok(self) -> bool:
        return abs(self.deriv) <= 3 * self.deriv_stderr


def optimality_sweep(spec: LqSpec, u_star: ControlProcess,
                     directions: list[ControlProcess], eps_list,
                     paths: PathSet,
                     scenario: LqScenario = direct_scenario()) -> list[SweepRow]:
    """Cost differences and directional derivatives around u*, common random numbers.

    For each direction v and eps: J(u* + eps v) - J(u*) (must not be
    significantly negative at an optimum) and the central difference
    [J(u* + eps v) - J(u* - eps v)]/(2 eps) (exact directional derivative for
    this quadratic cost), both with paired-path standard errors.
    """
    model = lq_model(spec, scenario)
    x_star = euler_mixed(model, u_star, spec.x0, paths)
    u_mat = u_star.materialize(x_star)
    base = _cost_per_path(spec, x_star, u_mat)
    n = len(base)
    rows = []
    for i, v in enumerate(directions):
        v_mat = v.materialize(x_star)
        for eps in eps_list:
            up = ControlProcess.from_values(u_mat + eps * v_mat)
            um = ControlProcess.from_values(u_mat - eps * v_mat)
            cp = _cost_per_path(spec, euler_mixed(model, up, spec.x0, paths), up.values)
            cm = _cost_per_path(spec, euler_mixed(model, um, spec.x0, paths), um.values)
            diff = cp - base
            deriv = (cp - cm) / (2 * eps)
            rows.append(SweepRow(
                i, float(eps),
                float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n)),
                float(deriv.mean()), float(deriv.std(ddof=1) / np.sqrt(n))))
    return rows


@dataclass(frozen=True)
class ConvexityReport:
    J1: float
    J2: float
    J_mid: float
    margin_mean: float      # J1 + J2 - 2 J_mid - (delta/4) E int |u1-u2|^2
    margin_stderr: float
    state_midpoint_gap: float

    def holds(self) -> bool:
        return self.margin_mean >= -3 * self.margin_stderr


def convexity_check(spec: LqSpec, u1: ControlProcess, u2: ControlProcess,
                    paths: PathSet,
                    scenario: LqScenario = direct_scenario()) -> ConvexityReport:
    """Strict-convexity margin J(u1) + J(u2) - 2 J((u1+u2)/2) >= (delta/4) E int |u1-u2|^2.

    delta = min R(t) on the grid; everything on common random numbers.  Also
    verifies that the midpoint control drives the midpoint state pathwise
    (linearity of the dynamics).
    """
    delta = spec.validate_on(paths.grid)
    model = lq_model(spec, scenario)
    x1 = euler_mixed(model, u1, spec.x0, paths)
    u1_mat = u1.materialize(x1)
    u2_mat = u2.materialize(x1)
    x2 = euler_mixed(model, ControlProcess.from_values(u2_mat), spec.x0, paths)
    u_mid = ControlProcess.from_values(0.5 * (u1_mat + u2_mat))
    x_mid = euler_mixed(model, u_mid, spec.x0, paths)
    c1 = _cost_per_path(spec, x1, u1_mat)
    c2 = _cost_per_path(spec, x2, u2_mat)
    cm = _cost_per_path(spec, x_mid, u_mid.values)
    du_sq = ((u1_mat[:, :-1] - u2_mat[:, :-1]) ** 2).sum(axis=1) * paths.grid.dt
    stat = c1 + c2 - 2 * cm - 0.25 * delta * du_sq
    gap = float(np.abs(x_mid.X - 0.5 * (x1.X + x2.X)).max())
    n = len(stat)
    return ConvexityReport(float(c1.mean()), float(c2.mean()), float(cm.mean()),
                           float(stat.mean()),
                           float(stat.std(ddof=1) / np.sqrt(n)), gap)
