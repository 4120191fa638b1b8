"""Composite objective: averaged squared loss plus TV and integration penalties.

The data term is (1/T) sum_t f_t with f_t the (2 n_t)^-1-normalized squared
loss of source t at its composed imaging coefficient.  Gradients are
analytic; the loss is quadratic so they agree with central finite
differences to rounding away from penalty kinks (asserted in tests).
Summation over sources is a fixed sequential loop, so evaluation is
deterministic by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import HyperParams, PairParams, SourceDataset, validate_bundle
from .penalties import sip_smoothed, tv_subgradient, tv_value

__all__ = ["ObjectiveEval", "source_loss", "data_loss", "evaluate"]


@dataclass(frozen=True)
class ObjectiveEval:
    """Objective value split into terms, with gradients for every parameter."""

    total: float
    data_loss: float
    tv_term: float
    sip_term: float
    grad_betas: np.ndarray | None  # (T, d)
    grad_components: np.ndarray    # (R, p, q)
    grad_weights: np.ndarray       # (T, R)


def source_loss(ds: SourceDataset, beta: np.ndarray, c: np.ndarray) -> float:
    """Squared loss of one source: (2 n)^-1 sum of squared residuals."""
    residual = _residual(ds, beta, c)
    return float(residual @ residual) / (2.0 * ds.n)


def _residual(ds: SourceDataset, beta: np.ndarray, c: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64)
    if beta.shape[0] != ds.d:
        raise ValueError(f"beta length {beta.shape[0]} != d {ds.d}")
    if c.shape != (ds.p, ds.q):
        raise ValueError(f"coefficient shape {c.shape} != ({ds.p}, {ds.q})")
    if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite parameters")
    return ds.y - ds.z @ beta - ds.x_mat @ c.reshape(-1)


def data_loss(bundle, betas: np.ndarray, coefficients) -> float:
    """Unpenalized average loss (1/T) sum_t f_t at the given coefficients."""
    t_sources = len(bundle)
    total = 0.0
    for t, ds in enumerate(bundle):
        total += source_loss(ds, betas[t], coefficients[t])
    return total / t_sources


def evaluate(
    bundle,
    params: PairParams,
    hp: HyperParams,
    with_beta_grads: bool = True,
) -> ObjectiveEval:
    """Evaluate the penalized objective and all parameter gradients.

    Parameters
    ----------
    bundle : list of SourceDataset
        The T sources; shapes must match `params`.
    params : PairParams
        Evaluation point.
    hp : HyperParams
        Supplies lambda_tv, gamma_sip and tau; r_components must equal the
        component count in `params`.
    with_beta_grads : bool
        Skip the (cheap) covariate gradients when False; the solver's inner
        loop only moves the imaging parameters.
    """
    t_sources, d, p, q = validate_bundle(bundle)
    if params.t_sources != t_sources:
        raise ValueError(f"params have T={params.t_sources}, bundle has T={t_sources}")
    if params.shape != (p, q):
        raise ValueError(f"component shape {params.shape} != image shape {(p, q)}")
    if params.betas.shape[1] != d:
        raise ValueError(f"betas have d={params.betas.shape[1]}, bundle has d={d}")
    r = params.r_components

    comp_mat = params.components.reshape(r, p * q)
    grad_coeff = np.zeros((t_sources, p * q))  # d(data term)/dC_t, flattened
    loss_sum = 0.0
    grad_betas = np.zeros((t_sources, d)) if with_beta_grads else None
    for t, ds in enumerate(bundle):
        c_vec = params.weights[t] @ comp_mat
        residual = _residual(ds, params.betas[t], c_vec.reshape(p, q))
        loss_sum += float(residual @ residual) / (2.0 * ds.n)
        scale = -1.0 / (t_sources * ds.n)
        grad_coeff[t] = scale * (ds.x_mat.T @ residual)
        if with_beta_grads:
            grad_betas[t] = scale * (ds.z.T @ residual)

    avg_loss = loss_sum / t_sources
    tv_term = hp.lambda_tv * sum(tv_value(b) for b in params.components)
    sip = sip_smoothed(params.weights, hp.tau)
    sip_term = hp.gamma_sip * sip.value
    total = avg_loss + tv_term + sip_term

    grad_components = (params.weights.T @ grad_coeff).reshape(r, p, q)
    if hp.lambda_tv != 0.0:
        for j in range(r):
            grad_components[j] += hp.lambda_tv * tv_subgradient(params.components[j])
    grad_weights = grad_coeff @ comp_mat.T + hp.gamma_sip * sip.gradient

    return ObjectiveEval(
        total=total,
        data_loss=avg_loss,
        tv_term=tv_term,
        sip_term=sip_term,
        grad_betas=grad_betas,
        grad_components=grad_components,
        grad_weights=grad_weights,
    )
