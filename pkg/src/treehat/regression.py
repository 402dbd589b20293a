"""Node p-values for aggregating regression coefficients.

Pipeline per data set:

1. ``fit_rare``: tree-regularised lasso with latent node coefficients
   ``gamma`` and ``theta = A @ gamma``, solved by ADMM.
2. ``scaled_lasso_sigma``: noise level from the scaled lasso.
3. ``debias_node``: for each internal node, a projection direction from a
   small QP and a debiased estimate of ``sum_i (theta_i - mean)^2`` over the
   node's leaves, turned into a two-sided normal p-value.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .pvalues import PValueAssignment, normal_cdf

logger = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RegressionData:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("X must be n x p and y of length n")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("X and y must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, rows):
        return RegressionData(self.X[rows], self.y[rows])


@dataclass(frozen=True)
class TreeExpansion:
    """``A[i, j] = 1`` iff leaf position ``i`` lies below node ``j`` (columns in node-id order)."""

    A: np.ndarray
    root: int = 0

    @property
    def penalized(self):
        mask = np.ones(self.A.shape[1], dtype=bool)
        mask[self.root] = False
        return mask


def build_expansion(t):
    A = np.zeros((t.p, t.n_nodes))
    for u in range(t.n_nodes):
        start, length = t.leaf_range(u)
        A[start:start + length, u] = 1.0
    return TreeExpansion(A, t.root)


# ----------------------------------------------------------------------
# tree-regularised estimator


@dataclass
class RareFit:
    theta_hat: np.ndarray
    gamma_hat: np.ndarray
    lam: float
    nu: float
    objective: float
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    kkt_residual: float
    history: list = field(default_factory=list, repr=False)


def rare_objective(data, a, gamma, lam, nu):
    theta = a.A @ gamma
    resid = data.y - data.X @ theta
    return (resid @ resid / (2 * data.n)
            + lam * nu * np.abs(gamma[a.penalized]).sum()
            + lam * (1 - nu) * np.abs(theta).sum())


def _soft(x, k):
    return np.sign(x) * np.maximum(np.abs(x) - k, 0.0)


def fit_rare(data, a, lam, nu, rho=None, max_iter=5000, tol=1e-7, warm_start=None):
    """Minimise ``|y - XA g|^2/(2n) + lam*nu*|g_-root|_1 + lam*(1-nu)*|A g|_1``.

    ADMM with one auxiliary block per l1 term and residual-balanced penalty.
    ``warm_start`` is an earlier :class:`RareFit` or ``(gamma, z1, z2, u1, u2, rho)``
    state.  On hitting ``max_iter`` the last iterate is returned with
    ``converged=False`` and a :class:`ConvergenceWarning`.
    """
    if lam < 0 or not 0 <= nu <= 1:
        raise ValueError("need lam >= 0 and nu in [0, 1]")
    A = a.A
    n = data.n
    Z = data.X @ A
    ZtZ = Z.T @ Z / n
    Zty = Z.T @ data.y / n
    pen = a.penalized
    k = A.shape[1]
    DtD = np.diag(pen.astype(float))
    AtA = A.T @ A
    if rho is None:
        rho = max(float(np.trace(ZtZ)) / k, 1e-3)

    if isinstance(warm_start, RareFit):
        warm_start = warm_start.history[-1] if warm_start.history else None
    if warm_start is not None:
        gamma, z1, z2, u1, u2, rho = (np.array(x, copy=True) if np.ndim(x) else x
                                      for x in warm_start)
    else:
        gamma = np.zeros(k)
        z1 = np.zeros(int(pen.sum()))
        z2 = np.zeros(A.shape[0])
        u1 = np.zeros_like(z1)
        u2 = np.zeros_like(z2)

    def factor(r):
        return linalg.inv(ZtZ + r * (DtD + AtA), overwrite_a=True, check_finite=False)

    Minv = factor(rho)
    t1 = lam * nu
    t2 = lam * (1 - nu)
    converged = False
    it = 0
    r_norm = s_norm = np.inf
    for it in range(1, max_iter + 1):
        rhs = Zty + rho * A.T @ (z2 - u2)
        rhs[pen] += rho * (z1 - u1)
        gamma = Minv @ rhs
        g_pen = gamma[pen]
        theta = A @ gamma
        z1_old, z2_old = z1, z2
        z1 = _soft(g_pen + u1, t1 / rho)
        z2 = _soft(theta + u2, t2 / rho)
        r1 = g_pen - z1
        r2 = theta - z2
        u1 = u1 + r1
        u2 = u2 + r2
        s = rho * (A.T @ (z2 - z2_old))
        s[pen] += rho * (z1 - z1_old)
        r_norm = max(np.abs(r1).max(initial=0.0), np.abs(r2).max())
        s_norm = np.abs(s).max()
        if r_norm <= tol and s_norm <= tol:
            converged = True
            break
        if it % 10 == 0:
            if r_norm > 10 * s_norm:
                rho *= 2.0
                u1 /= 2.0
                u2 /= 2.0
                Minv = factor(rho)
            elif s_norm > 10 * r_norm:
                rho /= 2.0
                u1 *= 2.0
                u2 *= 2.0
                Minv = factor(rho)

    # report the sparse iterate: penalised coordinates from z1
    gamma_hat = gamma.copy()
    gamma_hat[pen] = z1
    theta_hat = A @ gamma_hat
    # KKT at (gamma, z): rho*u are exact subgradients at z, so stationarity
    # and the coupling gaps are what remain
    grad = ZtZ @ gamma - Zty
    stat = grad + rho * (A.T @ u2)
    stat[pen] += rho * u1
    kkt = max(np.abs(stat).max(), r_norm)
    if not converged:
        warnings.warn(f"fit_rare did not converge in {max_iter} iterations "
                      f"(primal {r_norm:.2e}, dual {s_norm:.2e})", ConvergenceWarning,
                      stacklevel=2)
    return RareFit(
        theta_hat=theta_hat, gamma_hat=gamma_hat, lam=lam, nu=nu,
        objective=float(rare_objective(data, a, gamma_hat, lam, nu)),
        iterations=it, converged=converged, primal_residual=float(r_norm),
        dual_residual=float(s_norm), kkt_residual=float(kkt),
        history=[(gamma, z1, z2, u1, u2, rho)],
    )


def default_grid(data, n_lambda=10, nus=(0.5, 0.9), min_ratio=1e-3):
    """Log-spaced lambdas from ``|X'y|_inf / n`` down by ``min_ratio``, crossed with ``nus``."""
    lam_max = np.abs(data.X.T @ data.y).max() / data.n
    lam_max = max(lam_max, 1e-8)
    lambdas = lam_max * np.logspace(0, np.log10(min_ratio), n_lambda)
    return [(float(lam), float(nu)) for nu in nus for lam in lambdas]


def fold_ids(n, folds, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC5]))
    ids = np.arange(n) % folds
    return ids[rng.permutation(n)]


def cross_validate_rare(data, a, grid, folds=10, seed=0, **fit_kw):
    """Grid point with the smallest mean held-out squared error.

    ``grid`` is a sequence of ``(lambda, nu)``; ties go to the earliest entry.
    Returns ``(lam, nu, errors)`` with ``errors`` aligned to ``grid``.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty tuning grid")
    if folds < 2:
        raise ValueError("need at least two folds")
    if len(grid) == 1:
        lam, nu = grid[0]
        return lam, nu, np.array([np.nan])
    ids = fold_ids(data.n, folds, seed)
    errors = np.zeros(len(grid))
    # duplicates are fitted once so exact ties resolve to the earliest entry
    first = {}
    for i, g in enumerate(grid):
        first.setdefault(tuple(g), i)
    # warm starts follow decreasing lambda within each nu
    order = sorted(set(first.values()), key=lambda i: (grid[i][1], -grid[i][0]))
    fit_kw.setdefault("tol", 1e-6)
    for f in range(folds):
        train = data.subset(ids != f)
        test = data.subset(ids == f)
        prev = None
        prev_nu = None
        for i in order:
            lam, nu = grid[i]
            if nu != prev_nu:
                prev = None
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                fit = fit_rare(train, a, lam, nu, warm_start=prev, **fit_kw)
            prev, prev_nu = fit, nu
            resid = test.y - test.X @ fit.theta_hat
            errors[i] += resid @ resid
    errors /= data.n
    errors = errors[[first[tuple(g)] for g in grid]]
    best = int(np.argmin(errors))  # first minimum in grid order
    return grid[best][0], grid[best][1], errors


# ----------------------------------------------------------------------
# noise level


@dataclass
class ScaledLassoResult:
    sigma: float
    coef: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool


def scaled_lasso(data, lam0=None, tol=1e-6, max_iter=100):
    """Alternate a lasso fit at penalty ``lam0*sigma`` with ``sigma = |y - Xb| / sqrt(n)``."""
    from sklearn.exceptions import ConvergenceWarning as SkConvergenceWarning
    from sklearn.linear_model import Lasso

    n, p = data.X.shape
    if n < 2:
        raise ValueError("scaled lasso needs n >= 2")
    if lam0 is None:
        lam0 = np.sqrt(2 * np.log(max(p, 2)) / n)
    sigma = np.linalg.norm(data.y) / np.sqrt(n)
    coef = np.zeros(p)
    if sigma <= 1e-12:
        return ScaledLassoResult(sigma=max(sigma, np.finfo(float).tiny), coef=coef,
                                 iterations=0, converged=True, degenerate=True)
    model = Lasso(alpha=lam0 * sigma, fit_intercept=False, warm_start=True,
                  max_iter=10000, tol=1e-8)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        model.set_params(alpha=lam0 * sigma)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SkConvergenceWarning)
            model.fit(data.X, data.y)
        coef = model.coef_.copy()
        new_sigma = np.linalg.norm(data.y - data.X @ coef) / np.sqrt(n)
        done = abs(new_sigma - sigma) < tol
        sigma = new_sigma
        if done or sigma <= 1e-12:
            converged = done
            break
    degenerate = sigma <= 1e-12
    if not converged and not degenerate:
        warnings.warn("scaled lasso did not converge", ConvergenceWarning, stacklevel=2)
    return ScaledLassoResult(sigma=max(float(sigma), np.finfo(float).tiny), coef=coef,
                             iterations=it, converged=converged, degenerate=degenerate)


def scaled_lasso_sigma(data, **kw):
    return scaled_lasso(data, **kw).sigma


# ----------------------------------------------------------------------
# debiasing


def centering_quadratic(theta):
    """``theta' G theta`` with ``G = I - 11'/l``, i.e. the sum of squared deviations."""
    theta = np.asarray(theta, dtype=float)
    return float(np.sum((theta - theta.mean()) ** 2))


def projection_target(t, theta_hat, u):
    """``w``: centred ``theta_hat`` on the leaves of ``u``, zero elsewhere."""
    start, length = t.leaf_range(u)
    w = np.zeros(len(theta_hat))
    seg = theta_hat[start:start + length]
    w[start:start + length] = seg - seg.mean()
    return w


@dataclass
class ProjectionResult:
    b: np.ndarray
    objective: float
    max_violation: float
    radius: float
    sweeps: int
    converged: bool


def solve_projection_qp(Sigma, w, lambda_n, tol=1e-10, max_sweeps=20000):
    """Minimise ``b' Sigma b`` subject to ``|<c, Sigma b - w>| <= |w| lambda_n``
    for ``c`` in ``{e_1..e_p, w/|w|}``.

    Coordinate descent on the dual ``min_mu mu'M mu/4 + mu'Cw + kappa|mu|_1``
    with ``M = C Sigma C'``; the primal point is ``b = -C'mu/2`` and the dual
    gradient equals the constraint values, so the stopping rule bounds the
    constraint violation directly.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    w = np.asarray(w, dtype=float)
    p = len(w)
    wn = np.linalg.norm(w)
    kappa = wn * lambda_n
    if wn == 0:
        return ProjectionResult(np.zeros(p), 0.0, 0.0, 0.0, 0, True)
    C = np.vstack([np.eye(p), w / wn])
    M = C @ Sigma @ C.T
    c = C @ w
    diag = np.diag(M).copy()
    mu = np.zeros(p + 1)
    grad = c.copy()  # M mu / 2 + c
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        for j in range(p + 1):
            mj = diag[j]
            if mj <= 0:
                continue
            old = mu[j]
            a_j = grad[j] - 0.5 * mj * old
            if a_j > kappa:
                new = -(a_j - kappa) / (0.5 * mj)
            elif a_j < -kappa:
                new = -(a_j + kappa) / (0.5 * mj)
            else:
                new = 0.0
            if new != old:
                grad += 0.5 * M[:, j] * (new - old)
                mu[j] = new
        viol = np.abs(grad).max() - kappa
        # complementary slackness: active coordinates must sit on the boundary
        act = mu != 0
        gap = np.abs(np.abs(grad[act]) - kappa).max(initial=0.0)
        if viol <= tol and gap <= max(tol, 1e-8 * kappa):
            converged = True
            break
    b = -0.5 * (C.T @ mu)
    cons = C @ (Sigma @ b - w)
    return ProjectionResult(b=b, objective=float(b @ Sigma @ b),
                            max_violation=float(np.abs(cons).max() - kappa),
                            radius=float(kappa), sweeps=sweeps, converged=converged)


def solve_projection(data, t, fit, u, lambda_n, Sigma=None):
    if Sigma is None:
        Sigma = data.X.T @ data.X / data.n
    w = projection_target(t, fit.theta_hat, t.node(u))
    return solve_projection_qp(Sigma, w, lambda_n).b


@dataclass
class DebiasResult:
    Q_hat: float
    b_hat: np.ndarray
    Q_d: float
    var_hat: float
    pvalue: float
    tau: float
    lambda_n: float


def debiased_pvalue(Q_d, var_hat):
    z = abs(Q_d) / np.sqrt(var_hat)
    return float(min(1.0, 2.0 * (1.0 - normal_cdf(z))))


def debias_node(data, t, fit, u, sigma_hat, tau=1.0, lambda_n=None, Sigma=None, b_hat=None):
    """Debiased estimate of the node's centred quadratic form and its p-value."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    n = data.n
    u = t.node(u)
    if lambda_n is None:
        lambda_n = np.sqrt(np.log(data.p) / n)
    if Sigma is None:
        Sigma = data.X.T @ data.X / n
    start, length = t.leaf_range(u)
    Q_hat = centering_quadratic(fit.theta_hat[start:start + length])
    if b_hat is None:
        w = projection_target(t, fit.theta_hat, u)
        b_hat = solve_projection_qp(Sigma, w, lambda_n).b
    resid = data.y - data.X @ fit.theta_hat
    Q_d = Q_hat + 2.0 / n * (b_hat @ (data.X.T @ resid))
    var_hat = 4.0 * sigma_hat**2 / n * (b_hat @ Sigma @ b_hat) + tau / n
    return DebiasResult(Q_hat=Q_hat, b_hat=b_hat, Q_d=float(Q_d), var_hat=float(var_hat),
                        pvalue=debiased_pvalue(Q_d, var_hat), tau=tau, lambda_n=float(lambda_n))


@dataclass(frozen=True)
class RegressionConfig:
    lambda_n_c: float = 1.0
    tau: float = 1.0
    folds: int = 10
    seed: int = 0
    n_lambda: int = 10
    nus: tuple = (0.5, 0.9)
    lambda_min_ratio: float = 1e-3
    grid: tuple | None = None
    max_iter: int = 5000
    tol: float = 1e-7


@dataclass
class RegressionDiagnostics:
    sigma_hat: float
    lam: float
    nu: float
    lambda_n: float
    fit_converged: bool
    sigma_converged: bool
    projections_converged: bool
    nodes: dict


def node_pvalues_regression(data, t, cfg=RegressionConfig()):
    """Run CV tuning, the final fit, the noise estimate and per-node debiasing.

    Returns ``(PValueAssignment, RegressionDiagnostics)``.
    """
    if data.p != t.p:
        raise ValueError(f"X has {data.p} columns but the tree has {t.p} leaves")
    a = build_expansion(t)
    grid = list(cfg.grid) if cfg.grid else default_grid(
        data, cfg.n_lambda, cfg.nus, cfg.lambda_min_ratio)
    lam, nu, _ = cross_validate_rare(data, a, grid, folds=cfg.folds, seed=cfg.seed,
                                     max_iter=cfg.max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fit = fit_rare(data, a, lam, nu, max_iter=cfg.max_iter, tol=cfg.tol)
    sl = scaled_lasso(data)
    lambda_n = cfg.lambda_n_c * np.sqrt(np.log(data.p) / data.n)
    Sigma = data.X.T @ data.X / data.n
    values = np.full(t.n_nodes, np.nan)
    nodes = {}
    proj_ok = True
    for u in t.internal:
        w = projection_target(t, fit.theta_hat, u)
        proj = solve_projection_qp(Sigma, w, lambda_n)
        proj_ok &= proj.converged
        res = debias_node(data, t, fit, u, sl.sigma, cfg.tau, lambda_n, Sigma, b_hat=proj.b)
        values[u] = res.pvalue
        nodes[t.labels[u]] = {"Q_hat": res.Q_hat, "Q_d": res.Q_d, "var_hat": res.var_hat,
                              "pvalue": res.pvalue}
    diag = RegressionDiagnostics(sigma_hat=sl.sigma, lam=lam, nu=nu, lambda_n=float(lambda_n),
                                 fit_converged=fit.converged, sigma_converged=sl.converged,
                                 projections_converged=bool(proj_ok), nodes=nodes)
    return PValueAssignment(values, "debiased"), diag
