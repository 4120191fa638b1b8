"""Evaluation metrics: estimation errors, RMSE, explained-variance ratios,
marginal correlations, heterogeneity ratios and replication summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SourceDataset, predict

__all__ = [
    "EvalReport",
    "rmse",
    "ols_covariate_beta",
    "explained_variance",
    "marginal_correlations",
    "heterogeneity_ratio",
    "aggregate_replications",
    "evaluate_method",
]


@dataclass(frozen=True)
class EvalReport:
    """Per-source metrics for one fitted method on one replication."""

    method: str
    source_ids: list[str]
    rmse: np.ndarray                       # (T,)
    beta_err: np.ndarray | None = None     # (T,) l2 errors vs truth
    c_err: np.ndarray | None = None        # (T,) Frobenius errors vs truth
    r_z: np.ndarray | None = None          # (T,) explained-variance ratios
    r_x_given_z: np.ndarray | None = None
    r_zx: np.ndarray | None = None

    METRICS = ("rmse", "beta_err", "c_err", "r_z", "r_x_given_z", "r_zx")


def rmse(y_hat: np.ndarray, y: np.ndarray) -> float:
    """Root mean squared error of predictions against observations."""
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("empty input")
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {y_hat.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def ols_covariate_beta(ds: SourceDataset) -> np.ndarray:
    """Ordinary least squares of the response on the covariates alone."""
    beta, _, _, _ = np.linalg.lstsq(ds.z, ds.y, rcond=None)
    return beta


def explained_variance(ds: SourceDataset, beta_z_only: np.ndarray,
                       beta_full: np.ndarray, c_full: np.ndarray):
    """Explained-variance ratios (covariates, images beyond covariates, joint).

    With y_bar the response mean, y_hat_z the covariate-only prediction and
    y_hat the full-model prediction:

        r_z         = sum (y_hat_z - y_bar)^2 / sum (y - y_bar)^2
        r_x_given_z = sum (y_hat - y_hat_z)^2 / sum (y - y_bar)^2
        r_zx        = sum (y_hat - y_bar)^2   / sum (y - y_bar)^2
    """
    y_bar = float(ds.y.mean())
    tss = float(((ds.y - y_bar) ** 2).sum())
    if tss <= 0:
        raise ValueError("response is constant; explained variance is undefined")
    y_hat_z = ds.z @ np.asarray(beta_z_only, dtype=np.float64).reshape(-1)
    y_hat = predict(ds, beta_full, c_full)
    r_z = float(((y_hat_z - y_bar) ** 2).sum()) / tss
    r_x_given_z = float(((y_hat - y_hat_z) ** 2).sum()) / tss
    r_zx = float(((y_hat - y_bar) ** 2).sum()) / tss
    return r_z, r_x_given_z, r_zx


def _pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; (0, True) when either argument is constant."""
    if a.max() == a.min() or b.max() == b.min():
        return 0.0, True
    a = a - a.mean()
    b = b - b.mean()
    return float((a @ b) / np.sqrt((a @ a) * (b @ b))), False


@dataclass(frozen=True)
class MarginalCorrelations:
    covariate: np.ndarray          # (d,)
    pixel: np.ndarray              # (p, q)
    covariate_constant: np.ndarray  # (d,) bool, True where recorded as 0
    pixel_constant: np.ndarray      # (p, q) bool


def marginal_correlations(ds: SourceDataset) -> MarginalCorrelations:
    """Pearson correlation of the response with each covariate and pixel.

    Constant columns (or a constant response) get correlation 0 with the
    corresponding flag set.
    """
    if ds.n < 3:
        raise ValueError("need at least 3 samples for correlations")
    cov = np.zeros(ds.d)
    cov_flag = np.zeros(ds.d, dtype=bool)
    for j in range(ds.d):
        cov[j], cov_flag[j] = _pearson(ds.z[:, j], ds.y)

    y = ds.y - ds.y.mean()
    y_norm = float(np.sqrt(y @ y))
    xm = ds.x_mat - ds.x_mat.mean(axis=0)
    col_norms = np.sqrt((xm ** 2).sum(axis=0))
    # exact-range test, not the centered norm: centering a constant column
    # leaves rounding residue
    constant = (ds.x_mat.max(axis=0) == ds.x_mat.min(axis=0)) | (y_norm == 0.0)
    denom = np.where(constant, 1.0, col_norms * y_norm)
    flat = np.where(constant, 0.0, (xm.T @ y) / denom)
    flat_flag = constant
    return MarginalCorrelations(
        covariate=cov,
        pixel=flat.reshape(ds.p, ds.q),
        covariate_constant=cov_flag,
        pixel_constant=flat_flag.reshape(ds.p, ds.q),
    )


def heterogeneity_ratio(c_a: np.ndarray, c_b: np.ndarray, pct: float = 99.0) -> np.ndarray:
    """Entrywise |c_a / c_b| - 1, truncated at the pct-percentile.

    The percentile is computed by linear interpolation over the finite
    values; entries above it, and entries where c_b is exactly zero, are
    replaced by the percentile cap.
    """
    c_a = np.asarray(c_a, dtype=np.float64)
    c_b = np.asarray(c_b, dtype=np.float64)
    if c_a.shape != c_b.shape:
        raise ValueError(f"shape mismatch: {c_a.shape} vs {c_b.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(c_a / c_b) - 1.0
    finite = np.isfinite(ratio)
    if not finite.any():
        raise ValueError("no finite ratios; denominator is identically zero")
    cap = float(np.percentile(ratio[finite], pct))
    out = np.where(finite, ratio, cap)
    return np.minimum(out, cap)


def aggregate_replications(reports: list[EvalReport]):
    """Mean and sample standard deviation (n-1) of each metric across reports.

    Returns {metric: (mean (T,), sd (T,))} over the metrics present in every
    report.  Uses two-pass summation so the result does not depend on
    report order.
    """
    if len(reports) < 2:
        raise ValueError("need at least 2 reports to aggregate")
    out = {}
    for name in EvalReport.METRICS:
        values = [getattr(rep, name) for rep in reports]
        if any(v is None for v in values):
            continue
        stacked = np.asarray(values, dtype=np.float64)
        out[name] = (stacked.mean(axis=0), stacked.std(axis=0, ddof=1))
    return out


def evaluate_method(method: str, test_bundle, betas, coefficients,
                    truth=None, train_bundle=None) -> EvalReport:
    """Score one fitted method: test RMSE per source, estimation errors when
    the generating parameters are given, and explained-variance ratios on
    the training data when it is given."""
    t_sources = len(test_bundle)
    rmses = np.zeros(t_sources)
    for t, ds in enumerate(test_bundle):
        rmses[t] = rmse(predict(ds, betas[t], coefficients[t]), ds.y)

    beta_err = c_err = None
    if truth is not None:
        beta_err = np.array([
            float(np.linalg.norm(np.asarray(betas[t]) - truth.betas[t]))
            for t in range(t_sources)
        ])
        true_coeffs = truth.weights @ truth.components.reshape(truth.r_components, -1)
        c_err = np.array([
            float(np.linalg.norm(
                np.asarray(coefficients[t]).reshape(-1) - true_coeffs[t]
            ))
            for t in range(t_sources)
        ])

    r_z = r_xz = r_joint = None
    if train_bundle is not None:
        r_z = np.zeros(t_sources)
        r_xz = np.zeros(t_sources)
        r_joint = np.zeros(t_sources)
        for t, ds in enumerate(train_bundle):
            beta_z = ols_covariate_beta(ds)
            r_z[t], r_xz[t], r_joint[t] = explained_variance(
                ds, beta_z, betas[t], coefficients[t]
            )

    return EvalReport(
        method=method,
        source_ids=[ds.source_id for ds in test_bundle],
        rmse=rmses,
        beta_err=beta_err,
        c_err=c_err,
        r_z=r_z,
        r_x_given_z=r_xz,
        r_zx=r_joint,
    )
