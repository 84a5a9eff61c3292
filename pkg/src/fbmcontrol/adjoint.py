"""Adjoint pair (p, q) by least-squares Monte Carlo on the explicit representations.

p(t) is Psi(t) times the conditional expectation of the pathwise payoff
S1 = int_t^T f_x Phi ds + g_x(X_T) Phi(T), estimated by cross-sectional
regression on polynomials of X*(t).  q_j comes either from the closed-form
Malliavin expansion (linear-in-state models) or from a central-difference
bump of a single Brownian increment with frozen regression coefficients.

Standard errors reported for p, q and the residual diagnostics are computed
from the *unsmoothed* pathwise targets: regression fits have cross-path
dispersion far below the estimator's true Monte Carlo uncertainty, while the
raw targets are unbiased for the same conditional means (tower property) and
carry honest O(1/sqrt(n)) noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (RegressionError, UnsupportedModelError,
                     UnsupportedRegimeError)
from .fbm import PathSet, kernel_weights
from .sde import ControlProcess, CoefficientModel, Linearization, StatePath, \
    euler_mixed, fundamental_phi, fundamental_psi, linearize

__all__ = [
    "RegressionBasis",
    "NodeFit",
    "AdjointProblem",
    "AdjointEstimate",
    "adjoint_problem",
    "estimate_p",
    "estimate_q_formula",
    "estimate_q_bump",
    "malliavin_dx",
    "constraint_residual_gamma",
    "stationarity_residual",
    "bsde_residual",
    "ResidualReport",
]


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis in the current state with trace-scaled ridge."""

    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("basis degree must be >= 1")


@dataclass
class NodeFit:
    """Frozen per-node regression: centered/scaled powers of X*(t).

    ``apply`` smooths a new target through the frozen normal-equation solve;
    ``predict`` evaluates a fitted coefficient vector at new state values
    (both are what the bump oracle needs to keep the projection frozen).
    """

    center: float
    scale: float
    degree: int
    solve_matrix: np.ndarray  # (degree+1, n_paths): coeffs = solve_matrix @ y
    design: np.ndarray        # (n_paths, degree+1)
    cond: float

    def coeffs(self, y: np.ndarray) -> np.ndarray:
        return self.solve_matrix @ y

    def apply(self, y: np.ndarray) -> np.ndarray:
        return self.design @ self.coeffs(y)

    def features(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.center) / self.scale if self.scale > 0 else np.zeros_like(x)
        return np.vander(z, self.degree + 1, increasing=True)

    def predict(self, c: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ c


def fit_node(x: np.ndarray, basis: RegressionBasis) -> NodeFit:
    center = float(x.mean())
    scale = float(x.std())
    if scale > 0:
        z = (x - center) / scale
    else:
        z = np.zeros_like(x)  # degenerate node (e.g. t = 0): regression = plain mean
    A = np.vander(z, basis.degree + 1, increasing=True)
    gram = A.T @ A
    lam = basis.ridge * np.trace(gram) / gram.shape[0]
    penalty = lam * np.eye(gram.shape[0])
    penalty[0, 0] = 0.0  # unpenalized intercept: constants reproduce exactly
    gram_r = gram + penalty
    try:
        solve_matrix = np.linalg.solve(gram_r, A.T)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"normal equations singular despite ridge {lam:.3e}") from exc
    cond = float(np.linalg.cond(gram_r))
    return NodeFit(center, scale, basis.degree, solve_matrix, A, cond)


@dataclass
class AdjointProblem:
    """Everything the adjoint estimators need, evaluated along one pair."""

    paths: PathSet
    x: StatePath
    u_values: np.ndarray
    lin: Linearization
    phi: StatePath
    psi: StatePath
    fx: np.ndarray            # f_x along the pair, (n_paths, n_nodes)
    fu: np.ndarray
    gx_T: np.ndarray          # g_x(X_T), (n_paths,)
    sigma_vals: np.ndarray    # sigma_j(t, X, u), (m, n_paths, n_nodes)
    gamma_vals: np.ndarray
    fxx: np.ndarray | None = None
    gxx_T: np.ndarray | None = None
    linear_in_state: bool = False

    @property
    def m(self) -> int:
        return self.sigma_vals.shape[0]

    def sigma_x_deterministic(self) -> np.ndarray:
        """Per-node sigma_x values, (m, n_nodes); requires a linear-in-state model."""
        if not self.linear_in_state:
            raise UnsupportedModelError(
                "closed-form Malliavin expansion needs a linear-in-state model")
        spread = np.ptp(self.lin.sx, axis=1).max()
        if spread > 1e-10:
            raise UnsupportedModelError(
                f"sigma_x varies across paths (spread {spread:.2e}); "
                "model is not linear in state")
        return self.lin.sx[:, 0, :]


def adjoint_problem(model: CoefficientModel, u: ControlProcess, x0: float,
                    paths: PathSet, fx_fn, fu_fn, gx_fn, fxx_fn=None,
                    gxx_fn=None, x: StatePath | None = None) -> AdjointProblem:
    """Integrate the pair and package the adjoint inputs.

    ``fx_fn(t, x, u)`` etc. are running-cost partials; ``gx_fn(x)`` the
    terminal-cost gradient.
    """
    if x is None:
        x = euler_mixed(model, u, x0, paths)
    uv = u.materialize(x)
    lin = linearize(model, x, u)
    phi = fundamental_phi(lin, paths)
    psi = fundamental_psi(lin, paths)
    t = paths.grid.nodes
    n_paths, n_nodes = x.X.shape

    def along(fn):
        return np.stack([np.broadcast_to(
            np.asarray(fn(t[k], x.X[:, k], uv[:, k]), dtype=float), (n_paths,))
            for k in range(n_nodes)], axis=1)

    sigma_vals = np.stack([along(model.sigma[j]) for j in range(model.m)])
    gamma_vals = np.stack([along(model.gamma[j]) for j in range(model.m)])
    return AdjointProblem(
        paths=paths, x=x, u_values=uv, lin=lin, phi=phi, psi=psi,
        fx=along(fx_fn), fu=along(fu_fn),
        gx_T=np.asarray(gx_fn(x.X[:, -1]), dtype=float),
        sigma_vals=sigma_vals, gamma_vals=gamma_vals,
        fxx=along(fxx_fn) if fxx_fn is not None else None,
        gxx_T=np.broadcast_to(np.asarray(gxx_fn(x.X[:, -1]), dtype=float),
                              (n_paths,)).copy() if gxx_fn is not None else None,
        linear_in_state=model.linear_in_state)


def _tail_trapezoid(values: np.ndarray, dt: float) -> np.ndarray:
    """int_{t_k}^T of node values by trapezoid, for every k (reverse cumsum)."""
    seg = 0.5 * (values[:, :-1] + values[:, 1:]) * dt
    out = np.zeros_like(values)
    out[:, :-1] = seg[:, ::-1].cumsum(axis=1)[:, ::-1]
    return out


@dataclass
class AdjointEstimate:
    """Per-path adjoint estimates plus the raw targets behind their errors."""

    grid: object
    p: np.ndarray                 # (n_paths, n_nodes), smoothed
    p_raw: np.ndarray             # unsmoothed targets, same conditional means
    fits: list                    # NodeFit per node (None at terminal node)
    p_coeffs: list                # frozen S1 coefficients per node
    basis: RegressionBasis
    q: np.ndarray | None = None   # (m, n_paths, n_nodes)
    q_raw: np.ndarray | None = None

    @property
    def cond(self) -> np.ndarray:
        return np.array([f.cond if f is not None else 1.0 for f in self.fits])

    def p_mean(self) -> np.ndarray:
        return self.p_raw.mean(axis=0)

    def p_stderr(self) -> np.ndarray:
        return self.p_raw.std(axis=0, ddof=1) / np.sqrt(self.p_raw.shape[0])

    def q_mean(self) -> np.ndarray:
        return self.q_raw.mean(axis=1)

    def q_stderr(self) -> np.ndarray:
        return self.q_raw.std(axis=1, ddof=1) / np.sqrt(self.q_raw.shape[1])

    def to_csv(self, path, dim: int = 0) -> None:
        t = self.grid.nodes
        pm, ps = self.p_mean(), self.p_stderr()
        if self.q is not None:
            qm, qs = self.q_mean()[dim], self.q_stderr()[dim]
        else:
            qm = qs = np.full_like(pm, float("nan"))
        with open(path, "w", newline="") as fh:
            fh.write("node,t,p_mean,p_stderr,q_mean,q_stderr\n")
            for k in range(len(t)):
                fh.write(f"{k},{t[k]:.17g},{pm[k]:.17g},{ps[k]:.17g},"
                         f"{qm[k]:.17g},{qs[k]:.17g}\n")


def estimate_p(prob: AdjointProblem, basis: RegressionBasis = RegressionBasis()) -> AdjointEstimate:
    """Estimate p(t) = Psi(t) E^{F_t}[ int_t^T f_x Phi ds + g_x(X_T) Phi(T) ].

    The F_t-measurable factor Psi(t) is pulled *inside* the conditional
    expectation before smoothing: the regression target is Psi(t) S1(t),
    whose conditional mean is exactly p(t) and, for the linear fixtures, a
    polynomial in X*(t) (regressing S1 alone and rescaling by Psi afterwards
    would project onto the wrong sigma-algebra and bias p).  The terminal
    node is imposed exactly as g_x(X*(T)) with no regression.
    """
    grid = prob.paths.grid
    n_nodes = grid.n_nodes
    payoff = _tail_trapezoid(prob.fx * prob.phi.X, grid.dt) \
        + (prob.gx_T * prob.phi.X[:, -1])[:, None]
    p_raw = prob.psi.X * payoff
    p_raw[:, -1] = prob.gx_T
    p = np.empty_like(p_raw)
    fits: list = [None] * n_nodes
    coeffs: list = [None] * n_nodes
    for k in range(n_nodes - 1):
        fit = fit_node(prob.x.X[:, k], basis)
        c = fit.coeffs(p_raw[:, k])
        p[:, k] = fit.design @ c
        fits[k] = fit
        coeffs[k] = c
    p[:, -1] = prob.gx_T  # terminal condition, exact
    return AdjointEstimate(grid, p, p_raw, fits, coeffs, basis)


def estimate_q_formula(prob: AdjointProblem, est: AdjointEstimate) -> AdjointEstimate:
    """Fill q_j(t) from the closed-form Malliavin expansion (linear models).

    The representation is q_j(t) = -sigma_x^j(t) p(t) + Psi(t) E^{F_t}[D_t^j S1]
    with D_t^j X(s) = Phi(s) Psi(t) sigma_j(t) and D_t^j Phi(s) = sigma_x^j(t) Phi(s).
    Expanding D_t^j S1 and moving the F_t-measurable factors inside the
    expectation, the -sigma_x p term cancels the sigma_x E_t[Psi S1] leg
    pathwise, leaving

        q_j(t) = E^{F_t}[ Psi(t)^2 sigma_j(t) S2(t) ],
        S2 = int_t^T f_xx Phi^2 ds + g_xx(X_T) Phi(T)^2,

    estimated with the same per-node regressions as p.
    """
    if prob.fxx is None or prob.gxx_T is None:
        raise UnsupportedModelError("q formula needs f_xx and g_xx along the pair")
    prob.sigma_x_deterministic()  # raises unless the model is linear in state
    grid = prob.paths.grid
    s2 = _tail_trapezoid(prob.fxx * prob.phi.X ** 2, grid.dt) \
        + (prob.gxx_T * prob.phi.X[:, -1] ** 2)[:, None]
    psi = prob.psi.X
    n_nodes = grid.n_nodes
    m = prob.m
    q = np.empty((m, *psi.shape))
    q_raw = np.empty_like(q)
    for j in range(m):
        q_raw[j] = psi ** 2 * prob.sigma_vals[j] * s2
        for k in range(n_nodes - 1):
            q[j, :, k] = est.fits[k].apply(q_raw[j, :, k])
        q[j, :, -1] = q_raw[j, :, -1]
    est.q = q
    est.q_raw = q_raw
    return est


def malliavin_dx(prob: AdjointProblem, j: int, r: int, s: int) -> np.ndarray:
    """Closed-form D_r^j X(s) = Phi(s) Psi(r) sigma_j(r) for s >= r, 0 below.

    Valid for linear-in-state coefficient models only.
    """
    if not prob.linear_in_state:
        raise UnsupportedModelError("closed-form Malliavin derivative needs a "
                                    "linear-in-state model")
    if s < r:
        return np.zeros(prob.x.n_paths)
    return prob.phi.X[:, s] * prob.psi.X[:, r] * prob.sigma_vals[j, :, r]


@dataclass
class BumpEstimate:
    """Bump-oracle q values with standard errors of their per-node means.

    ``mean_stderr`` combines the cross-path dispersion of the bump field with
    the frozen-regression coefficient noise (the dominant uncertainty early
    on, when the state has barely dispersed and the fitted slope is poorly
    identified).
    """

    q: np.ndarray            # (m, n_paths, n_nodes); NaN at the terminal node
    mean_stderr: np.ndarray  # (m, n_nodes)

    def q_mean(self) -> np.ndarray:
        return np.nanmean(self.q, axis=1)


def estimate_q_bump(prob: AdjointProblem, est: AdjointEstimate,
                    h: float | None = None) -> BumpEstimate:
    """Finite-difference Malliavin oracle for q, frozen regression coefficients.

    The Brownian increment of driver j leaving node k is bumped by +-h; the
    fractional path co-moves through the kernel weight of that cell, so the
    bumped state one step later is X(t_{k+1}) +- h (sigma_j + gamma_j W[k+1,k]).
    p at t_{k+1} is re-evaluated through the *frozen* node-(k+1) regression
    and q_j(t_k) = [p^+ - p^-]/(2h) per path.  The fractional co-move weight
    W[k+1,k] ~ dt^{H-1/2} vanishes under refinement, matching the vanishing
    diagonal of the Volterra kernel.  The terminal node is reported as NaN
    (no increment leaves it).
    """
    paths = prob.paths
    grid = paths.grid
    if h is None:
        h = 1e-3 * np.sqrt(grid.dt)
    W = kernel_weights(grid, paths.hurst)
    m = prob.m
    n_paths, n_nodes = prob.x.X.shape
    q = np.full((m, n_paths, n_nodes), np.nan)
    se = np.full((m, n_nodes), np.nan)
    for k in range(n_nodes - 1):
        fit = est.fits[k + 1]
        if fit is not None:
            c = est.p_coeffs[k + 1]
            resid = est.p_raw[:, k + 1] - fit.design @ c
            cov_c = float(resid @ resid) / max(n_paths - fit.degree - 1, 1) \
                * (fit.solve_matrix @ fit.solve_matrix.T)
        for j in range(m):
            w_diag = W[k + 1, k]
            dx = h * (prob.sigma_vals[j, :, k] + prob.gamma_vals[j, :, k] * w_diag)
            x_plus, x_minus = prob.x.X[:, k + 1] + dx, prob.x.X[:, k + 1] - dx
            if fit is not None:
                fplus, fminus = fit.features(x_plus), fit.features(x_minus)
                p_plus, p_minus = fplus @ c, fminus @ c
                wvec = (fplus - fminus).mean(axis=0) / (2 * h)
                var_coeff = float(wvec @ cov_c @ wvec)
            else:
                # terminal node: p = g_x(X_T); finite-difference g_x directly
                p_plus = _gx_bumped(prob, x_plus)
                p_minus = _gx_bumped(prob, x_minus)
                var_coeff = 0.0
            q[j, :, k] = (p_plus - p_minus) / (2 * h)
            var_disp = q[j, :, k].var(ddof=1) / n_paths
            se[j, k] = np.sqrt(var_coeff + var_disp)
    return BumpEstimate(q, se)


def _gx_bumped(prob: AdjointProblem, x_T: np.ndarray) -> np.ndarray:
    # linearize g_x around the realized terminal state via g_xx when available
    if prob.gxx_T is not None:
        return prob.gx_T + prob.gxx_T * (x_T - prob.x.X[:, -1])
    return np.interp(x_T, *_sorted_pair(prob.x.X[:, -1], prob.gx_T))


def _sorted_pair(x, y):
    order = np.argsort(x)
    return x[order], y[order]


@dataclass(frozen=True)
class ResidualReport:
    """Per-node residual means with honest Monte Carlo standard errors."""

    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    mean_sq: np.ndarray
    label: str

    def max_abs_z(self) -> float:
        z = np.abs(self.mean) / np.where(self.stderr > 0, self.stderr, np.inf)
        return float(z.max())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("node,t,mean,stderr,mean_sq\n")
            for k in range(len(self.t)):
                fh.write(f"{k},{self.t[k]:.17g},{self.mean[k]:.17g},"
                         f"{self.stderr[k]:.17g},{self.mean_sq[k]:.17g}\n")


def _report(t, field: np.ndarray, label: str) -> ResidualReport:
    n = field.shape[0]
    return ResidualReport(
        t=np.asarray(t), mean=field.mean(axis=0),
        stderr=field.std(axis=0, ddof=1) / np.sqrt(n),
        mean_sq=(field ** 2).mean(axis=0), label=label)


def constraint_residual_gamma(prob: AdjointProblem, est: AdjointEstimate) -> ResidualReport:
    """Residual sum_j gamma_u^j(t) p(t); identically zero when gamma_u == 0.

    Reported on the acting nodes 0..n-1 (left-point convention: the terminal
    control value enters neither the dynamics nor the cost).
    """
    field = (prob.lin.gu[:, :, :-1] * est.p_raw[None, :, :-1]).sum(axis=0)
    return _report(prob.paths.grid.nodes[:-1], field, "gamma_constraint")


def stationarity_residual(prob: AdjointProblem, est: AdjointEstimate) -> ResidualReport:
    """First-order condition b_u p + sum_j sigma_u^j q_j + f_u on the acting nodes.

    Only the gamma_u == 0 regime is implemented; with control-dependent
    fractional noise the condition acquires fractional-derivative correction
    terms that are outside this package's scope.  Means and standard errors
    come from the raw (unsmoothed) adjoint targets, which are unbiased for
    the same conditional means and carry honest Monte Carlo noise.  Nodes
    0..n-1 are reported: in the left-point discretization the terminal
    control value is a costless degree of freedom with no residual meaning.
    """
    if np.abs(prob.lin.gu).max() > 0:
        raise UnsupportedRegimeError(
            "stationarity residual implemented for gamma_u == 0 only; the "
            "correction terms involving the fractional Malliavin derivative "
            "of the terminal functionals are out of scope")
    if est.q_raw is None:
        raise ValueError("estimate q before evaluating the stationarity residual")
    field = prob.lin.bu[:, :-1] * est.p_raw[:, :-1] \
        + (prob.lin.su[:, :, :-1] * est.q_raw[:, :, :-1]).sum(axis=0) \
        + prob.fu[:, :-1]
    return _report(prob.paths.grid.nodes[:-1], field, "stationarity")


def bsde_residual(prob: AdjointProblem, est: AdjointEstimate) -> ResidualReport:
    """Discrete residual of the adjoint backward equation.

    r_k = p_{k+1} - p_k + [b_x p + sum sigma_x q + f_x]_k dt
          + sum_j gamma_x^j p_k dB^H_j - sum_j q_j,k dB_j.

    Means come from the smoothed adapted pair; standard errors from the same
    field with the raw targets substituted for p (the smoothed field's
    cross-path spread grossly understates the estimator's uncertainty).  The
    last step closes against the representation's own terminal payoff
    Psi(T) Phi(T) g_x(X_T): the imposed exact terminal value g_x(X_T) differs
    from it by the discrete product defect Phi Psi - 1, which is tracked by
    the fundamental-pair invariant, not smuggled into this residual.
    """
    if est.q is None:
        raise ValueError("estimate q before evaluating the BSDE residual")
    grid = prob.paths.grid
    dt = grid.dt
    dbh = np.diff(prob.paths.BH, axis=-1)
    p_term = prob.psi.X[:, -1] * prob.phi.X[:, -1] * prob.gx_T

    def field(p_nodes):
        p_eff = np.concatenate([p_nodes[:, :-1], p_term[:, None]], axis=1)
        r = p_eff[:, 1:] - p_eff[:, :-1] \
            + (prob.lin.bx[:, :-1] * p_nodes[:, :-1]
               + (prob.lin.sx[:, :, :-1] * est.q[:, :, :-1]).sum(axis=0)
               + prob.fx[:, :-1]) * dt
        for j in range(prob.m):
            r = r + prob.lin.gx[j, :, :-1] * p_nodes[:, :-1] * dbh[:, j, :] \
                  - est.q[j, :, :-1] * prob.paths.dB[:, j, :]
        return r

    r_hat = field(est.p)
    r_raw = field(est.p_raw)
    n = r_hat.shape[0]
    return ResidualReport(
        t=grid.nodes[:-1], mean=r_hat.mean(axis=0),
        stderr=r_raw.std(axis=0, ddof=1) / np.sqrt(n),
        mean_sq=(r_hat ** 2).mean(axis=0), label="bsde")
