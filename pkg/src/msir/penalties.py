"""Total-variation and selective-integration penalties with (sub)gradients.

TV is the anisotropic (l1) form: absolute horizontal plus vertical pixel
differences, with the first row and column differenced against themselves
(so they contribute nothing).  The integration penalty counts components
used by fewer than two sources; its smoothed surrogate replaces the two
indicators with a clipped piecewise-linear saturation so a first-order
solver can move through it.

Subgradient convention: at every kink (zero difference, |w| in {0, tau},
column saturation at 1 or 2) the reported subgradient entry is 0.  This
keeps the optimizer deterministic; it is the same choice standard autodiff
makes for abs/min/max at ties up to which side of the tie is kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PenaltyEval",
    "tv_value",
    "tv_subgradient",
    "sip_exact",
    "sip_smoothed",
]


@dataclass(frozen=True)
class PenaltyEval:
    """Penalty value with its (sub)gradient at the evaluation point."""

    value: float
    gradient: np.ndarray


def tv_value(b: np.ndarray) -> float:
    """Anisotropic total variation of a 2-D array."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {b.shape}")
    horiz = np.abs(np.diff(b, axis=1)).sum()
    vert = np.abs(np.diff(b, axis=0)).sum()
    return float(horiz + vert)


def tv_subgradient(b: np.ndarray) -> np.ndarray:
    """A member of the TV subdifferential (0 chosen at zero differences).

    Each |u| term with u = b[i, j] - b[i, j-1] contributes sign(u) at
    (i, j) and -sign(u) at (i, j-1); vertical terms likewise.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {b.shape}")
    grad = np.zeros_like(b)
    dh = np.sign(np.diff(b, axis=1))
    grad[:, 1:] += dh
    grad[:, :-1] -= dh
    dv = np.sign(np.diff(b, axis=0))
    grad[1:, :] += dv
    grad[:-1, :] -= dv
    return grad


def sip_exact(w: np.ndarray, zero_tol: float = 0.0) -> int:
    """Number of components appearing in fewer than two sources.

    Counts columns of the weight matrix with fewer than two entries whose
    magnitude exceeds zero_tol.  The default tolerance 0 is meant for
    constructed matrices with exact zeros.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {w.shape}")
    used_by = (np.abs(w) > zero_tol).sum(axis=0)
    return int((used_by < 2).sum())


def sip_smoothed(w: np.ndarray, tau: float) -> PenaltyEval:
    """Smoothed integration penalty and its subgradient.

    Per column r the saturation is Q_r = sum_t min(|w_tr| / tau, 1) and the
    column's contribution is clip(2 - Q_r, 0, 1); entries influence the
    value only while |w| < tau and 1 < Q_r < 2, which is where the gradient
    is -sign(w) / tau.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {w.shape}")
    scaled = np.abs(w) / tau
    q = np.minimum(scaled, 1.0).sum(axis=0)
    value = float(np.clip(2.0 - q, 0.0, 1.0).sum())
    active_col = (q > 1.0) & (q < 2.0)
    active = (scaled < 1.0) & active_col[np.newaxis, :]
    gradient = np.where(active, -np.sign(w) / tau, 0.0)
    return PenaltyEval(value=value, gradient=gradient)
