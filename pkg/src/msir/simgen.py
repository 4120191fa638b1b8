"""Synthetic benchmark generation: shape components, weight settings, DGP.

The generator draws covariates, image pixels, covariate coefficients and
noise from one seeded stream, composes per-source imaging coefficients
from three corner-placed shape components, and splits each source
60/20/20 into train/validation/test by leading indices after a seeded
shuffle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from matplotlib.path import Path as _MplPath

from .core import PairParams, SourceDataset, seeded_rng

__all__ = [
    "ShapeKind",
    "ShapeSpec",
    "SimConfig",
    "rasterize",
    "make_components",
    "make_weights",
    "generate",
    "load_image_stack",
]


class ShapeKind(enum.Enum):
    SQUARE = "square"
    TRIANGLE = "triangle"
    STAR = "star"
    CIRCLE = "circle"
    PENTAGON = "pentagon"


@dataclass(frozen=True)
class ShapeSpec:
    """A filled shape on the pixel grid: kind, center (row, col), size, amplitude.

    `size` is the full extent in pixels: the side of the square, the base
    width and height of the triangle, and the bounding-box diameter of the
    circle, pentagon and star.
    """

    kind: ShapeKind
    center: tuple[int, int]
    size: int
    amplitude: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be at least 1 pixel")

    def bounds(self) -> tuple[float, float, float, float]:
        half = self.size / 2.0
        cr, cc = self.center
        return cr - half, cr + half, cc - half, cc + half


def _polygon_mask(vertices, p: int, q: int) -> np.ndarray:
    """Pixels whose integer-coordinate centers fall inside the polygon."""
    rows, cols = np.mgrid[0:p, 0:q]
    pts = np.column_stack([rows.ravel(), cols.ravel()])
    path = _MplPath([(float(r), float(c)) for r, c in vertices])
    inside = path.contains_points(pts, radius=1e-9)
    return inside.reshape(p, q)


def rasterize(spec: ShapeSpec, p: int, q: int) -> np.ndarray:
    """Render a shape to a (p, q) matrix: amplitude on the shape, 0 elsewhere."""
    lo_r, hi_r, lo_c, hi_c = spec.bounds()
    if lo_r < -0.5 or lo_c < -0.5 or hi_r > p - 0.5 or hi_c > q - 0.5:
        raise ValueError(
            f"{spec.kind.value} of size {spec.size} at {spec.center} "
            f"does not fit inside a {p}x{q} canvas"
        )
    cr, cc = spec.center
    half = spec.size / 2.0

    if spec.kind is ShapeKind.SQUARE:
        mask = np.zeros((p, q), dtype=bool)
        r0 = cr - spec.size // 2
        c0 = cc - spec.size // 2
        mask[r0:r0 + spec.size, c0:c0 + spec.size] = True
    elif spec.kind is ShapeKind.CIRCLE:
        rows, cols = np.mgrid[0:p, 0:q]
        mask = (rows - cr) ** 2 + (cols - cc) ** 2 <= half ** 2
    elif spec.kind is ShapeKind.TRIANGLE:
        # isoceles, apex up
        verts = [(cr - half, cc), (cr + half, cc - half), (cr + half, cc + half)]
        mask = _polygon_mask(verts, p, q)
    elif spec.kind is ShapeKind.PENTAGON:
        # regular, one vertex pointing up
        verts = []
        for k in range(5):
            ang = -math.pi / 2.0 + 2.0 * math.pi * k / 5.0
            verts.append((cr + half * math.sin(ang), cc + half * math.cos(ang)))
        mask = _polygon_mask(verts, p, q)
    elif spec.kind is ShapeKind.STAR:
        # five-point star: alternate outer and inner radii
        inner = half * math.sin(math.radians(18)) / math.sin(math.radians(54))
        verts = []
        for k in range(10):
            radius = half if k % 2 == 0 else inner
            ang = -math.pi / 2.0 + math.pi * k / 5.0
            verts.append((cr + radius * math.sin(ang), cc + radius * math.cos(ang)))
        mask = _polygon_mask(verts, p, q)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown shape kind {spec.kind!r}")

    return np.where(mask, float(spec.amplitude), 0.0)


def make_components(p: int = 64, q: int = 64, size: int = 16,
                    amplitude: float = 1.0) -> np.ndarray:
    """The three benchmark components: square top-left, triangle top-right,
    pentagon bottom-right.  Supports are pairwise disjoint by placement."""
    margin = size // 2 + 2
    specs = [
        ShapeSpec(ShapeKind.SQUARE, (margin, margin), size, amplitude),
        ShapeSpec(ShapeKind.TRIANGLE, (margin, q - 1 - margin), size, amplitude),
        ShapeSpec(ShapeKind.PENTAGON, (p - 1 - margin, q - 1 - margin), size, amplitude),
    ]
    return np.stack([rasterize(s, p, q) for s in specs])


def make_weights(setting: str, rng: np.random.Generator,
                 t_sources: int = 3, r_components: int = 3) -> np.ndarray:
    """Draw the weight matrix for one of the three benchmark settings.

    S1: i.i.d. Uniform[0.5, 1.5] entries.
    S2: the T*R evenly spaced values on [0, 2], randomly permuted into the grid.
    S3: as S2, then one uniformly chosen entry per row is set to 0.
    """
    setting = setting.upper()
    if setting == "S1":
        return rng.uniform(0.5, 1.5, size=(t_sources, r_components))
    if setting in ("S2", "S3"):
        values = np.linspace(0.0, 2.0, t_sources * r_components)
        w = rng.permutation(values).reshape(t_sources, r_components)
        if setting == "S3":
            for t in range(t_sources):
                w[t, rng.integers(0, r_components)] = 0.0
        return w
    raise ValueError(f"unknown setting {setting!r}; expected S1, S2 or S3")


@dataclass(frozen=True)
class SimConfig:
    """Benchmark configuration; defaults follow the standard design
    (T=3 sources, R=3 components, d=5 covariates, 64x64 images)."""

    setting: str = "S1"
    n_per_source: int = 300
    t_sources: int = 3
    r_components: int = 3
    d: int = 5
    p: int = 64
    q: int = 64
    noise_sd: float = 1.0
    intercept: bool = False
    component_size: int = 16
    component_amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.setting.upper() not in ("S1", "S2", "S3"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if min(self.n_per_source, self.t_sources, self.d, self.p, self.q) < 1:
            raise ValueError("all dimensions must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")


def _split_sizes(n: int) -> tuple[int, int, int]:
    n_train = math.floor(0.6 * n)
    n_val = math.floor(0.2 * n)
    return n_train, n_val, n - n_train - n_val


def load_image_stack(path, n: int, p: int, q: int) -> np.ndarray:
    """Load n images from an image-stack file, normalized to zero mean and
    unit pixel variance over the sample (so noise_sd=1 keeps the same
    signal-to-noise scale as the Gaussian mode)."""
    from . import fileio

    stack = fileio.read_image_stack(path)
    if stack.shape[1] != p or stack.shape[2] != q:
        raise ValueError(f"image stack shape {stack.shape[1:]} != ({p}, {q})")
    if stack.shape[0] < n:
        raise ValueError(f"need {n} images, file holds only {stack.shape[0]}")
    stack = stack[:n].astype(np.float64)
    stack -= stack.mean()
    sd = stack.std()
    if sd > 0:
        stack /= sd
    return stack


def generate(cfg: SimConfig, image_source: str = "gaussian",
             image_path=None):
    """Generate (train, val, test) bundles plus the true parameters.

    Responses follow y = <z, beta_t> + <x, C_t> + eps with standard-normal
    covariates, coefficients and noise (noise scaled by cfg.noise_sd), and
    C_t composed from the shape components under the configured setting.
    `image_source` is "gaussian" for i.i.d. standard-normal pixels or
    "from_files" to read images via `image_path` (one stack per source is
    sliced from the file in source order).

    Returns
    -------
    (train_bundle, val_bundle, test_bundle, truth) where truth is the
    generating PairParams.
    """
    rng = seeded_rng(cfg.seed)
    t_sources, r = cfg.t_sources, cfg.r_components
    p, q, d, n = cfg.p, cfg.q, cfg.d, cfg.n_per_source

    components = make_components(p, q, cfg.component_size, cfg.component_amplitude)
    if r != components.shape[0]:
        raise ValueError(
            f"r_components={r} is not supported by the benchmark component set "
            f"({components.shape[0]} shapes)"
        )
    weights = make_weights(cfg.setting, rng, t_sources, r)
    betas = rng.normal(size=(t_sources, d))
    truth = PairParams(betas=betas, components=components, weights=weights)

    if image_source == "from_files":
        if image_path is None:
            raise ValueError("image_path is required for from_files mode")
        all_images = load_image_stack(image_path, n * t_sources, p, q)

    train, val, test = [], [], []
    comp_mat = components.reshape(r, p * q)
    for t in range(t_sources):
        z = rng.normal(size=(n, d))
        if cfg.intercept:
            z[:, 0] = 1.0
        if image_source == "gaussian":
            x = rng.normal(size=(n, p, q))
        elif image_source == "from_files":
            x = all_images[t * n:(t + 1) * n]
        else:
            raise ValueError(f"unknown image_source {image_source!r}")
        eps = rng.normal(size=n) * cfg.noise_sd
        c_vec = weights[t] @ comp_mat
        y = z @ betas[t] + x.reshape(n, p * q) @ c_vec + eps

        order = rng.permutation(n)
        n_train, n_val, _ = _split_sizes(n)
        parts = (order[:n_train], order[n_train:n_train + n_val],
                 order[n_train + n_val:])
        for out, idx in zip((train, val, test), parts):
            out.append(SourceDataset(
                y=y[idx], z=z[idx], x=x[idx], source_id=f"source_{t:03d}"
            ))
    return train, val, test, truth
