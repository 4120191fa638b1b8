"""Shared containers and the deterministic random-number contract.

Images are plain 2-D float64 arrays of shape (p, q) in C (row-major) order;
every serialization and vectorization in the package flattens them row by
row so that flattened indices agree with the vectorized baselines.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "SourceDataset",
    "PairParams",
    "HyperParams",
    "SharingStructure",
    "as_image",
    "compose_coefficient",
    "classify_sharing",
    "predict",
    "seeded_rng",
    "split_rng",
    "derive_seed",
    "validate_bundle",
]

MAX_SEED = 2**64


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out is a:
        out = out.copy()
    out.setflags(write=False)
    return out


def as_image(a, p: int | None = None, q: int | None = None) -> np.ndarray:
    """Validate and return a 2-D finite float64 image array."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] < 1 or out.shape[1] < 1:
        raise ValueError(f"image must be 2-D and nonempty, got shape {out.shape}")
    if p is not None and out.shape != (p, q):
        raise ValueError(f"image shape {out.shape} does not match ({p}, {q})")
    if not np.all(np.isfinite(out)):
        raise ValueError("image contains non-finite entries")
    return out


@dataclass(frozen=True)
class SourceDataset:
    """One data source: responses y (n,), covariates z (n, d), images x (n, p, q)."""

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    source_id: str = "source"

    def __post_init__(self):
        y = _readonly(np.asarray(self.y, dtype=np.float64).reshape(-1))
        z = _readonly(np.asarray(self.z, dtype=np.float64))
        x = _readonly(np.asarray(self.x, dtype=np.float64))
        if z.ndim != 2:
            raise ValueError(f"z must be 2-D, got shape {z.shape}")
        if x.ndim != 3:
            raise ValueError(f"x must be a 3-D image stack, got shape {x.shape}")
        n = y.shape[0]
        if n == 0:
            raise ValueError("dataset is empty")
        if z.shape[0] != n or x.shape[0] != n:
            raise ValueError(
                f"sample counts disagree: y {n}, z {z.shape[0]}, x {x.shape[0]}"
            )
        if z.shape[1] < 1:
            raise ValueError("z must have at least one column")
        if x.shape[1] < 1 or x.shape[2] < 1:
            raise ValueError(f"images must be nonempty, got shape {x.shape[1:]}")
        for name, arr in (("y", y), ("z", z), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.x.shape[2]

    @property
    def x_mat(self) -> np.ndarray:
        """Images flattened row-major to an (n, p*q) design block (a view)."""
        return self.x.reshape(self.n, self.p * self.q)


def validate_bundle(bundle) -> tuple[int, int, int, int]:
    """Check a list of SourceDataset for consistent (d, p, q); return (T, d, p, q)."""
    if len(bundle) == 0:
        raise ValueError("bundle is empty")
    d, p, q = bundle[0].d, bundle[0].p, bundle[0].q
    for ds in bundle[1:]:
        if (ds.d, ds.p, ds.q) != (d, p, q):
            raise ValueError(
                f"source {ds.source_id!r} has (d, p, q) = {(ds.d, ds.p, ds.q)}, "
                f"expected {(d, p, q)}"
            )
    return len(bundle), d, p, q


@dataclass(frozen=True)
class PairParams:
    """Model parameters: per-source betas (T, d), component stack (R, p, q), weights (T, R)."""

    betas: np.ndarray
    components: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        betas = _readonly(np.asarray(self.betas, dtype=np.float64))
        comps = _readonly(np.asarray(self.components, dtype=np.float64))
        weights = _readonly(np.asarray(self.weights, dtype=np.float64))
        if betas.ndim != 2:
            raise ValueError(f"betas must be (T, d), got shape {betas.shape}")
        if comps.ndim != 3:
            raise ValueError(f"components must be (R, p, q), got shape {comps.shape}")
        if weights.ndim != 2:
            raise ValueError(f"weights must be (T, R), got shape {weights.shape}")
        if weights.shape[0] != betas.shape[0]:
            raise ValueError(
                f"weights rows {weights.shape[0]} != betas rows {betas.shape[0]}"
            )
        if weights.shape[1] != comps.shape[0]:
            raise ValueError(
                f"weights cols {weights.shape[1]} != component count {comps.shape[0]}"
            )
        for name, arr in (("betas", betas), ("components", comps), ("weights", weights)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", weights)

    @property
    def t_sources(self) -> int:
        return self.weights.shape[0]

    @property
    def r_components(self) -> int:
        return self.weights.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.components.shape[1], self.components.shape[2]


@dataclass(frozen=True)
class HyperParams:
    """Fit configuration: component count, penalty weights, optimizer settings."""

    r_components: int = 3
    lambda_tv: float = 0.1
    gamma_sip: float = 1.0
    tau: float = 0.5
    learning_rate: float = 1e-2
    max_epochs: int = 500
    patience: int = 20
    inner_steps: int = 50
    init_sd: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.r_components < 1:
            raise ValueError("r_components must be positive")
        if self.lambda_tv < 0 or self.gamma_sip < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.inner_steps < 1:
            raise ValueError("max_epochs and inner_steps must be positive")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must satisfy 1 <= patience <= max_epochs")
        if self.init_sd <= 0:
            raise ValueError("init_sd must be positive")
        if not 0 <= int(self.seed) < MAX_SEED:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def with_(self, **kwargs) -> "HyperParams":
        return replace(self, **kwargs)


class SharingStructure(enum.Enum):
    """Support pattern of a weight matrix across sources."""

    STL = "STL"  # no component shared by any two sources
    FS = "FS"    # every source uses every component
    JI = "JI"    # one common support plus per-source uniques
    PS = "PS"    # arbitrary partial overlap


def compose_coefficient(params: PairParams, t: int) -> np.ndarray:
    """Imaging coefficient of source t: the weighted sum of the components."""
    if not 0 <= t < params.t_sources:
        raise IndexError(f"source index {t} out of range [0, {params.t_sources})")
    return np.tensordot(params.weights[t], params.components, axes=1)


def classify_sharing(w: np.ndarray, zero_tol: float = 1e-10) -> SharingStructure:
    """Classify the support pattern of a weight matrix.

    Entries with absolute value <= zero_tol count as zero.  The decision is
    purely support-level: STL when all pairs of row supports are disjoint,
    FS when every row support is full, JI when every pairwise intersection
    equals the intersection over all rows (and the pattern is neither STL
    nor FS), PS otherwise.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"weight matrix must be 2-D and nonempty, got shape {w.shape}")
    support = np.abs(w) > zero_tol
    t, r = support.shape
    rows = [frozenset(np.flatnonzero(support[i])) for i in range(t)]

    if all(not (rows[i] & rows[j]) for i in range(t) for j in range(i + 1, t)):
        return SharingStructure.STL
    full = frozenset(range(r))
    if all(row == full for row in rows):
        return SharingStructure.FS
    common = frozenset.intersection(*rows)
    if all(rows[i] & rows[j] == common for i in range(t) for j in range(i + 1, t)):
        return SharingStructure.JI
    return SharingStructure.PS


def predict(ds: SourceDataset, beta: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Shared prediction path for every method: <z, beta> + <x, c> per sample."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    c = as_image(c, ds.p, ds.q)
    if beta.shape[0] != ds.d:
        raise ValueError(f"beta length {beta.shape[0]} != d {ds.d}")
    return ds.z @ beta + ds.x_mat @ c.reshape(-1)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic stream: identical seeds give bitwise-identical draws."""
    if not 0 <= int(seed) < MAX_SEED:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split_rng(seed: int, *key: int) -> np.random.Generator:
    """Child stream addressed by an integer path, independent across paths."""
    if not 0 <= int(seed) < MAX_SEED:
        raise ValueError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Derive a 64-bit child seed; extending the key never reshuffles earlier ones."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(hi) << 32 | int(lo)
