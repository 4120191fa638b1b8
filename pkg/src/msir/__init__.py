"""Multi-source scalar-on-image regression with shared spatial components.

The model couples T data sources through a common stack of TV-smoothed
spatial components: each source's imaging coefficient is a weighted sum of
the shared components, and a smoothed selective-integration penalty on the
weight matrix pushes components to be used by at least two sources.
"""

from .core import (
    HyperParams,
    PairParams,
    SharingStructure,
    SourceDataset,
    classify_sharing,
    compose_coefficient,
    derive_seed,
    predict,
    seeded_rng,
    split_rng,
)
from .metrics import EvalReport, evaluate_method
from .objective import ObjectiveEval, evaluate, source_loss
from .penalties import PenaltyEval, sip_exact, sip_smoothed, tv_subgradient, tv_value
from .simgen import ShapeKind, ShapeSpec, SimConfig, generate
from .solver import (
    DivergenceError,
    FitReport,
    GridResult,
    fit,
    grid_search,
    init_params,
    solve_betas,
)

__version__ = "0.1.0"

__all__ = [
    "HyperParams",
    "PairParams",
    "SharingStructure",
    "SourceDataset",
    "classify_sharing",
    "compose_coefficient",
    "derive_seed",
    "predict",
    "seeded_rng",
    "split_rng",
    "EvalReport",
    "evaluate_method",
    "ObjectiveEval",
    "evaluate",
    "source_loss",
    "PenaltyEval",
    "sip_exact",
    "sip_smoothed",
    "tv_subgradient",
    "tv_value",
    "ShapeKind",
    "ShapeSpec",
    "SimConfig",
    "generate",
    "DivergenceError",
    "FitReport",
    "GridResult",
    "fit",
    "grid_search",
    "init_params",
    "solve_betas",
    "__version__",
]
