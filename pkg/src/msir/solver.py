"""Alternating estimation: exact covariate solves plus first-order image steps.

Each epoch solves the per-source covariate coefficients exactly (the
subproblem is linear regression), then takes `inner_steps` adaptive-moment
gradient steps on the component stack and the weight matrix, and finally
scores the unpenalized average loss on the validation bundle.  The best
validation snapshot is returned, with early stopping after `patience`
epochs without improvement.

The inner loop recomputes the same gradients as objective.evaluate but
skips the covariate terms and reuses the covariate-adjusted responses,
which are constant within an epoch; tests pin the two paths against each
other.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    HyperParams,
    PairParams,
    SourceDataset,
    derive_seed,
    seeded_rng,
    validate_bundle,
)
from .objective import data_loss
from .penalties import sip_smoothed, tv_subgradient, tv_value

__all__ = [
    "AdamState",
    "DivergenceError",
    "FitReport",
    "GridCell",
    "GridResult",
    "init_params",
    "solve_betas",
    "fit",
    "grid_search",
    "default_grid",
]

logger = logging.getLogger(__name__)

DIVERGENCE_CAP = 1e12

# Adam moment constants; conventional defaults, overridable per call.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Raised when the objective becomes non-finite or exceeds the cap."""

    def __init__(self, epoch: int, learning_rate: float, total: float):
        super().__init__(
            f"objective diverged at epoch {epoch} "
            f"(total={total!r}, learning_rate={learning_rate!r})"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate
        self.total = total


class AdamState:
    """Adaptive-moment estimation over a list of arrays, one shared step size."""

    def __init__(self, shapes, learning_rate: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params, grads) -> None:
        """Update each array in `params` in place from the matching gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class FitReport:
    """Best-validation snapshot plus the full training trace."""

    params: PairParams
    epoch_log: np.ndarray  # (epochs, 3): train total, train data loss, val data loss
    stopped_epoch: int
    best_epoch: int
    hp: HyperParams
    seed: int

    @property
    def val_loss(self) -> float:
        return float(self.epoch_log[self.best_epoch - 1, 2])


@dataclass(frozen=True)
class GridCell:
    hp: HyperParams
    val_loss: float  # nan when the cell failed
    report: FitReport | None
    error: str | None = None


@dataclass(frozen=True)
class GridResult:
    cells: list[GridCell]
    best: int

    @property
    def best_cell(self) -> GridCell:
        return self.cells[self.best]


def init_params(t_sources: int, r_components: int, d: int, p: int, q: int,
                init_sd: float, rng: np.random.Generator) -> PairParams:
    """Draw all parameters i.i.d. Normal(0, init_sd^2) from one stream.

    Draw order is fixed (betas, components, weights) so that identical
    seeds give bitwise-identical parameters.
    """
    if init_sd <= 0:
        raise ValueError("init_sd must be positive")
    betas = rng.normal(0.0, init_sd, size=(t_sources, d))
    components = rng.normal(0.0, init_sd, size=(r_components, p, q))
    weights = rng.normal(0.0, init_sd, size=(t_sources, r_components))
    return PairParams(betas=betas, components=components, weights=weights)


def solve_betas(bundle, components: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Exact least-squares covariate coefficients at fixed imaging parameters.

    Rank-deficient designs fall back to the minimum-norm solution (SVD
    pseudo-inverse) with a logged warning.
    """
    t_sources, d, p, q = validate_bundle(bundle)
    weights = np.asarray(weights, dtype=np.float64)
    comp_mat = np.asarray(components, dtype=np.float64).reshape(-1, p * q)
    betas = np.zeros((t_sources, d))
    for t, ds in enumerate(bundle):
        target = ds.y - ds.x_mat @ (weights[t] @ comp_mat)
        beta, _, rank, _ = np.linalg.lstsq(ds.z, target, rcond=None)
        if rank < d:
            logger.warning(
                "source %s: covariate design is rank deficient (rank %d < %d); "
                "using the minimum-norm solution", ds.source_id, rank, d
            )
        betas[t] = beta
    return betas


def _imaging_grads(y_adj, x_mats, comp_flat, weights, shape, hp, freeze_weights):
    """Gradients of the penalized objective w.r.t. components and weights.

    `y_adj` holds the covariate-adjusted responses for the current epoch;
    `comp_flat` is the (R, p*q) component stack and `shape` its 2-D image
    shape.  Returns (total, data loss, component gradient, weight gradient
    or None).
    """
    t_sources = len(y_adj)
    r, pq = comp_flat.shape
    grad_coeff = np.empty((t_sources, pq))
    loss_sum = 0.0
    for t in range(t_sources):
        residual = y_adj[t] - x_mats[t] @ (weights[t] @ comp_flat)
        n_t = residual.shape[0]
        loss_sum += (residual @ residual) / (2.0 * n_t)
        grad_coeff[t] = (-1.0 / (t_sources * n_t)) * (x_mats[t].T @ residual)

    avg_loss = loss_sum / t_sources
    grad_comp = weights.T @ grad_coeff
    tv_term = 0.0
    for j in range(r):
        b = comp_flat[j].reshape(shape)
        tv_term += tv_value(b)
        if hp.lambda_tv != 0.0:
            grad_comp[j] += hp.lambda_tv * tv_subgradient(b).reshape(-1)

    sip = sip_smoothed(weights, hp.tau)
    total = avg_loss + hp.lambda_tv * tv_term + hp.gamma_sip * sip.value
    grad_w = None
    if not freeze_weights:
        grad_w = grad_coeff @ comp_flat.T + hp.gamma_sip * sip.gradient
    return total, avg_loss, grad_comp, grad_w


def fit(train_bundle, val_bundle, hp: HyperParams, *,
        freeze_weights: bool = False, init: PairParams | None = None) -> FitReport:
    """Fit the model by alternating exact covariate solves and image steps.

    Parameters
    ----------
    train_bundle, val_bundle : list of SourceDataset
        Must have matching T, d and image shape.
    hp : HyperParams
        All penalty and optimizer settings, including the seed used for
        the Gaussian initialization.
    freeze_weights : bool
        Keep the weight matrix fixed at its initial value (used by the
        single-source TV baseline where the weight is pinned at 1).
    init : PairParams, optional
        Starting point; defaults to init_params draws from hp.seed.

    Returns
    -------
    FitReport with the best-validation snapshot and the per-epoch trace.
    """
    t_sources, d, p, q = validate_bundle(train_bundle)
    tv_val, dv, pv, qv = validate_bundle(val_bundle)
    if (tv_val, dv, pv, qv) != (t_sources, d, p, q):
        raise ValueError(
            f"validation bundle (T, d, p, q) = {(tv_val, dv, pv, qv)} "
            f"does not match training {(t_sources, d, p, q)}"
        )
    r = hp.r_components

    if init is None:
        rng = seeded_rng(hp.seed)
        init = init_params(t_sources, r, d, p, q, hp.init_sd, rng)
    elif init.t_sources != t_sources or init.r_components != r or init.shape != (p, q):
        raise ValueError("init params do not match the bundle and hyperparameters")

    comp_flat = init.components.reshape(r, p * q).copy()
    weights = init.weights.copy()
    x_mats = [ds.x_mat for ds in train_bundle]

    moving = [comp_flat] if freeze_weights else [comp_flat, weights]
    adam = AdamState([a.shape for a in moving], hp.learning_rate)

    log_rows = []
    best_val = np.inf
    best_snapshot = None
    best_epoch = 0
    epochs_since_best = 0
    epoch = 0

    for epoch in range(1, hp.max_epochs + 1):
        betas = solve_betas(train_bundle, comp_flat, weights)
        y_adj = [ds.y - ds.z @ betas[t] for t, ds in enumerate(train_bundle)]

        for _ in range(hp.inner_steps):
            total, _, grad_comp, grad_w = _imaging_grads(
                y_adj, x_mats, comp_flat, weights, (p, q), hp, freeze_weights
            )
            if not np.isfinite(total) or total > DIVERGENCE_CAP:
                raise DivergenceError(epoch, hp.learning_rate, total)
            grads = [grad_comp] if freeze_weights else [grad_comp, grad_w]
            adam.step(moving, grads)

        train_total, train_data, _, _ = _imaging_grads(
            y_adj, x_mats, comp_flat, weights, (p, q), hp, freeze_weights
        )
        if not np.isfinite(train_total) or train_total > DIVERGENCE_CAP:
            raise DivergenceError(epoch, hp.learning_rate, train_total)

        coeffs = (weights @ comp_flat).reshape(t_sources, p, q)
        val_data = data_loss(val_bundle, betas, coeffs)
        log_rows.append((train_total, train_data, val_data))

        if val_data < best_val:
            best_val = val_data
            best_epoch = epoch
            best_snapshot = PairParams(
                betas=betas.copy(),
                components=comp_flat.reshape(r, p, q).copy(),
                weights=weights.copy(),
            )
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= hp.patience:
                break

    return FitReport(
        params=best_snapshot,
        epoch_log=np.asarray(log_rows, dtype=np.float64),
        stopped_epoch=epoch,
        best_epoch=best_epoch,
        hp=hp,
        seed=hp.seed,
    )


def grid_search(train_bundle, val_bundle, grid, *, master_seed: int | None = None,
                jobs: int = 1, freeze_weights: bool = False,
                init_factory=None) -> GridResult:
    """Fit every hyperparameter combination and pick the validation argmin.

    Each cell runs with its own derived seed when `master_seed` is given
    (cell i uses derive_seed(master_seed, 2, i)), so results do not depend
    on the number of workers.  Failed (diverged) cells are recorded and
    excluded from the argmin; ties break toward the lowest grid index.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")

    def run_cell(i: int) -> GridCell:
        hp = grid[i]
        if master_seed is not None:
            hp = hp.with_(seed=derive_seed(master_seed, 2, i))
        init = init_factory(hp) if init_factory is not None else None
        try:
            report = fit(train_bundle, val_bundle, hp,
                         freeze_weights=freeze_weights, init=init)
        except DivergenceError as exc:
            logger.warning("grid cell %d failed: %s", i, exc)
            return GridCell(hp=hp, val_loss=float("nan"), report=None, error=str(exc))
        return GridCell(hp=hp, val_loss=report.val_loss, report=report)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run_cell, range(len(grid))))
    else:
        cells = [run_cell(i) for i in range(len(grid))]

    best = -1
    best_loss = np.inf
    for i, cell in enumerate(cells):
        if cell.report is not None and cell.val_loss < best_loss:
            best_loss = cell.val_loss
            best = i
    if best < 0:
        raise RuntimeError(
            "all grid cells failed: " + "; ".join(c.error or "?" for c in cells)
        )
    return GridResult(cells=cells, best=best)


def default_grid(base: HyperParams) -> list[HyperParams]:
    """Default search grid over (R, lambda, gamma, tau) around a base setting."""
    grid = []
    for r in (2, 3, 4):
        for lam in (0.01, 0.1, 1.0, 10.0):
            for gamma in (0.01, 0.1, 1.0, 10.0):
                for tau in (0.3, 0.5, 0.7):
                    grid.append(base.with_(
                        r_components=r, lambda_tv=lam, gamma_sip=gamma, tau=tau
                    ))
    return grid
