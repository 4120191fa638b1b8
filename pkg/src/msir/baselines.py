"""Comparison methods: vectorized regression (plain and lasso), low-rank
bilinear regression (plain and lasso), single-source TV regression, and
pooled TV regression.

Every method reduces to per-source (beta, C) pairs consumed by the shared
prediction path in core.predict; nothing here implements its own
predictor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import HyperParams, PairParams, SourceDataset, predict, seeded_rng
from .metrics import rmse
from .solver import FitReport, grid_search, init_params

__all__ = [
    "BaselineFit",
    "lasso_cd",
    "fit_vr",
    "fit_rvr",
    "fit_tr",
    "fit_rtr",
    "fit_sirtv",
    "fit_pool",
    "sirtv_init",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BaselineFit:
    """Per-source coefficients produced by one method, plus tuning metadata."""

    method: str
    betas: np.ndarray          # (T, d)
    coefficients: np.ndarray   # (T, p, q)
    tuning: dict = field(default_factory=dict)


def _ols(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, _, _, _ = np.linalg.lstsq(a, y, rcond=None)
    return coef


def fit_vr(ds: SourceDataset, marginal: bool = False) -> BaselineFit:
    """Vectorized regression on [covariates | pixels].

    The default solves the joint minimum-norm least squares on the full
    design, which stays well defined (and interpolates) when pixels
    outnumber samples.  With `marginal=True` the coefficient map is instead
    the per-pixel simple-regression slope against the response (the
    mass-univariate map used for coefficient figures) with covariate
    coefficients from OLS on the covariates alone.
    """
    if marginal:
        beta = _ols(ds.z, ds.y)
        xm = ds.x_mat - ds.x_mat.mean(axis=0)
        yc = ds.y - ds.y.mean()
        var = (xm ** 2).sum(axis=0)
        slope = np.where(var > 0, (xm.T @ yc) / np.where(var > 0, var, 1.0), 0.0)
        c = slope.reshape(ds.p, ds.q)
        return BaselineFit("vr", beta[np.newaxis], c[np.newaxis],
                           {"marginal": True})
    design = np.hstack([ds.z, ds.x_mat])
    coef = _ols(design, ds.y)
    beta = coef[:ds.d]
    c = coef[ds.d:].reshape(ds.p, ds.q)
    return BaselineFit("vr", beta[np.newaxis], c[np.newaxis], {"marginal": False})


def lasso_cd(a: np.ndarray, y: np.ndarray, alpha: float, *,
             theta: np.ndarray | None = None, max_sweeps: int = 1000,
             tol: float = 1e-6):
    """Cyclic coordinate descent for (2n)^-1 ||y - A theta||^2 + alpha ||theta||_1.

    Each coordinate update is the exact scalar minimizer (soft
    thresholding), so the objective never increases.  Stops when the
    largest coefficient change in a sweep is at most `tol`.

    Returns (theta, converged).
    """
    n, m = a.shape
    col_sq = (a ** 2).sum(axis=0)
    if theta is None:
        theta = np.zeros(m)
    else:
        theta = np.asarray(theta, dtype=np.float64).copy()
    r = y - a @ theta
    thresh = alpha * n
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(m):
            if col_sq[j] == 0.0:
                continue
            old = theta[j]
            rho = a[:, j] @ r + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - thresh, 0.0) / col_sq[j]
            if new != old:
                r += a[:, j] * (old - new)
                theta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol:
            return theta, True
    return theta, False


def _rvr_objective(ds, beta, c_vec, alpha):
    r = ds.y - ds.z @ beta - ds.x_mat @ c_vec
    return float(r @ r) / (2.0 * ds.n) + alpha * float(np.abs(c_vec).sum())


def _rvr_solve(ds: SourceDataset, alpha: float, max_rounds: int = 1000,
               tol: float = 1e-6):
    """Alternate exact covariate solves with one pixel sweep per round."""
    beta = np.zeros(ds.d)
    c_vec = np.zeros(ds.p * ds.q)
    trace = []
    converged = False
    for _ in range(max_rounds):
        beta = _ols(ds.z, ds.y - ds.x_mat @ c_vec)
        prev = c_vec.copy()
        c_vec, _ = lasso_cd(ds.x_mat, ds.y - ds.z @ beta, alpha,
                            theta=c_vec, max_sweeps=1, tol=0.0)
        trace.append(_rvr_objective(ds, beta, c_vec, alpha))
        if np.max(np.abs(c_vec - prev), initial=0.0) <= tol:
            converged = True
            break
    if not converged:
        logger.warning("lasso regression did not converge within %d rounds "
                       "(alpha=%g)", max_rounds, alpha)
    return beta, c_vec, trace, converged


def fit_rvr(ds: SourceDataset, lasso_grid, val: SourceDataset) -> BaselineFit:
    """Lasso-penalized vectorized regression (covariates unpenalized).

    The penalty weight is chosen by RMSE on the validation source.
    """
    lasso_grid = list(lasso_grid)
    if not lasso_grid:
        raise ValueError("lasso_grid is empty")
    best = None
    for alpha in lasso_grid:
        beta, c_vec, trace, converged = _rvr_solve(ds, float(alpha))
        c = c_vec.reshape(ds.p, ds.q)
        score = rmse(predict(val, beta, c), val.y)
        if best is None or score < best[0]:
            best = (score, alpha, beta, c, trace, converged)
    score, alpha, beta, c, trace, converged = best
    return BaselineFit("rvr", beta[np.newaxis], c[np.newaxis], {
        "alpha": float(alpha), "val_rmse": score,
        "objective_trace": trace, "converged": converged,
    })


def _bilinear_design_u(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    # (n, K*p): features X_i @ v_k laid out k-major
    n = x.shape[0]
    f = np.tensordot(x, v, axes=([2], [0]))    # (n, p, K)
    return f.transpose(0, 2, 1).reshape(n, -1)


def _bilinear_design_v(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    f = np.tensordot(x, u, axes=([1], [0]))    # (n, q, K)
    return f.transpose(0, 2, 1).reshape(n, -1)


def _bilinear_objective(ds, beta, u, v, alpha):
    c = u @ v.T
    r = ds.y - ds.z @ beta - ds.x_mat @ c.reshape(-1)
    obj = float(r @ r) / (2.0 * ds.n)
    if alpha > 0:
        obj += alpha * float(np.abs(u).sum() + np.abs(v).sum())
    return obj


def _fit_bilinear(ds: SourceDataset, rank: int, alpha: float,
                  max_cycles: int = 200, tol: float = 1e-6):
    """Block-coordinate fit of C = sum_k u_k v_k^T (lasso on factors when
    alpha > 0).  Returns (beta, u, v, trace)."""
    if rank < 1:
        raise ValueError("rank must be at least 1")
    p, q = ds.p, ds.q
    # top-rank factors of the vectorized-regression map stabilize the start
    c0 = fit_vr(ds).coefficients[0]
    uu, ss, vvt = np.linalg.svd(c0, full_matrices=False)
    k = min(rank, ss.shape[0])
    u = np.zeros((p, rank))
    v = np.zeros((q, rank))
    u[:, :k] = uu[:, :k] * np.sqrt(ss[:k])
    v[:, :k] = vvt[:k].T * np.sqrt(ss[:k])

    beta = np.zeros(ds.d)
    trace = []
    best = None
    prev_obj = np.inf
    for _ in range(max_cycles):
        c = u @ v.T
        beta = _ols(ds.z, ds.y - ds.x_mat @ c.reshape(-1))
        y_adj = ds.y - ds.z @ beta

        f_u = _bilinear_design_u(ds.x, v)
        if alpha > 0:
            u_stack, _ = lasso_cd(f_u, y_adj, alpha, theta=u.T.reshape(-1),
                                  max_sweeps=50, tol=1e-8)
        else:
            u_stack = _ols(f_u, y_adj)
        u = u_stack.reshape(-1, p).T

        f_v = _bilinear_design_v(ds.x, u)
        if alpha > 0:
            v_stack, _ = lasso_cd(f_v, y_adj, alpha, theta=v.T.reshape(-1),
                                  max_sweeps=50, tol=1e-8)
        else:
            v_stack = _ols(f_v, y_adj)
        v = v_stack.reshape(-1, q).T

        obj = _bilinear_objective(ds, beta, u, v, alpha)
        trace.append(obj)
        if best is None or obj < best[0]:
            best = (obj, beta.copy(), u.copy(), v.copy())
        if prev_obj - obj < tol * max(1.0, abs(prev_obj)):
            break
        prev_obj = obj

    if trace and trace[-1] > best[0] + 1e-12:
        logger.warning("bilinear fit oscillated; returning the best iterate")
    _, beta, u, v = best
    return beta, u, v, trace


def _fit_lowrank(method: str, ds: SourceDataset, rank_grid, lasso_grid,
                 val: SourceDataset) -> BaselineFit:
    rank_grid = list(rank_grid)
    lasso_grid = list(lasso_grid)
    if not rank_grid or not lasso_grid:
        raise ValueError("rank and lasso grids must be nonempty")
    best = None
    for rank in rank_grid:
        for alpha in lasso_grid:
            beta, u, v, trace = _fit_bilinear(ds, int(rank), float(alpha))
            c = u @ v.T
            score = rmse(predict(val, beta, c), val.y)
            if best is None or score < best[0]:
                best = (score, rank, alpha, beta, u, v, trace)
    score, rank, alpha, beta, u, v, trace = best
    c = u @ v.T
    tuning = {"rank": int(rank), "val_rmse": score, "objective_trace": trace,
              "factors": (u, v)}
    if method == "rtr":
        tuning["alpha"] = float(alpha)
    return BaselineFit(method, beta[np.newaxis], c[np.newaxis], tuning)


def fit_tr(ds: SourceDataset, rank_grid, val: SourceDataset) -> BaselineFit:
    """Bilinear low-rank regression; the rank is chosen on validation RMSE."""
    return _fit_lowrank("tr", ds, rank_grid, [0.0], val)


def fit_rtr(ds: SourceDataset, rank_grid, lasso_grid,
            val: SourceDataset) -> BaselineFit:
    """Bilinear low-rank regression with lasso-penalized factor vectors."""
    if not list(lasso_grid):
        raise ValueError("lasso_grid is empty")
    return _fit_lowrank("rtr", ds, rank_grid, lasso_grid, val)


def sirtv_init(hp: HyperParams, d: int, p: int, q: int) -> PairParams:
    """Single-source starting point with the component weight pinned at 1."""
    params = init_params(1, 1, d, p, q, hp.init_sd, seeded_rng(hp.seed))
    return PairParams(betas=params.betas, components=params.components,
                      weights=np.ones((1, 1)))


def fit_sirtv(ds: SourceDataset, tv_grid, val: SourceDataset,
              hp_base: HyperParams) -> BaselineFit:
    """Single-source TV-penalized regression: the shared solver restricted
    to one source and one component with its weight frozen at 1 and no
    integration penalty.  The TV weight is chosen on validation loss."""
    tv_grid = list(tv_grid)
    if not tv_grid:
        raise ValueError("tv_grid is empty")
    grid = [hp_base.with_(r_components=1, lambda_tv=float(lam), gamma_sip=0.0)
            for lam in tv_grid]
    result = grid_search(
        [ds], [val], grid, freeze_weights=True,
        init_factory=lambda hp: sirtv_init(hp, ds.d, ds.p, ds.q),
    )
    report = result.best_cell.report
    c = report.params.weights @ report.params.components.reshape(1, -1)
    return BaselineFit(
        "sirtv",
        report.params.betas,
        c.reshape(1, ds.p, ds.q),
        {"lambda_tv": result.best_cell.hp.lambda_tv,
         "val_loss": result.best_cell.val_loss,
         "report": report},
    )


def _pool_sources(bundle, stage_indicator: bool) -> SourceDataset:
    y = np.concatenate([ds.y for ds in bundle])
    x = np.concatenate([ds.x for ds in bundle])
    z_parts = []
    for t, ds in enumerate(bundle):
        z = ds.z
        if stage_indicator:
            dummies = np.zeros((ds.n, len(bundle) - 1))
            if t > 0:
                dummies[:, t - 1] = 1.0
            z = np.hstack([z, dummies])
        z_parts.append(z)
    return SourceDataset(y=y, z=np.vstack(z_parts), x=x, source_id="pooled")


def fit_pool(bundle, tv_grid, val_bundle, hp_base: HyperParams,
             stage_indicator: bool = False,
             intercept_col: int = 0) -> BaselineFit:
    """Pooled TV regression: all sources concatenated, one shared imaging
    coefficient (and one shared covariate coefficient).

    With `stage_indicator` set, T-1 per-source dummy columns are appended
    to the pooled covariates; their fitted coefficients are folded back
    into each source's intercept coordinate (`intercept_col`), which the
    covariates must therefore contain.
    """
    if len(bundle) < 2:
        raise ValueError("pooling needs at least 2 sources")
    t_sources = len(bundle)
    d = bundle[0].d
    if stage_indicator and not all(
        np.allclose(ds.z[:, intercept_col], 1.0) for ds in bundle
    ):
        raise ValueError(
            "stage_indicator requires a constant intercept column in z "
            f"(column {intercept_col})"
        )
    pooled_train = _pool_sources(bundle, stage_indicator)
    pooled_val = _pool_sources(val_bundle, stage_indicator)
    inner = fit_sirtv(pooled_train, tv_grid, pooled_val, hp_base)

    shared_beta = inner.betas[0][:d]
    betas = np.tile(shared_beta, (t_sources, 1))
    if stage_indicator:
        for t in range(1, t_sources):
            betas[t, intercept_col] += inner.betas[0][d + t - 1]
    coefficients = np.repeat(inner.coefficients, t_sources, axis=0)
    return BaselineFit(
        "pool", betas, coefficients,
        {"lambda_tv": inner.tuning["lambda_tv"],
         "val_loss": inner.tuning["val_loss"],
         "stage_indicator": stage_indicator},
    )
