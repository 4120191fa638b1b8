import numpy as np
import pytest

from msir.core import SourceDataset, seeded_rng


def central_fd(f, x, h=1e-6):
    """Central finite differences of a scalar function at an array point."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        bumped = xf.copy()
        bumped[i] = xf[i] + h
        up = f(bumped.reshape(x.shape))
        bumped[i] = xf[i] - h
        down = f(bumped.reshape(x.shape))
        flat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), floor)


def make_dataset(rng, n, d, p, q, beta=None, c=None, noise_sd=0.0,
                 source_id="source"):
    """Linear-model dataset with known parameters; returns (ds, beta, c)."""
    if beta is None:
        beta = rng.normal(size=d)
    if c is None:
        c = rng.normal(size=(p, q))
    z = rng.normal(size=(n, d))
    x = rng.normal(size=(n, p, q))
    y = z @ beta + x.reshape(n, -1) @ c.reshape(-1)
    if noise_sd > 0:
        y = y + rng.normal(size=n) * noise_sd
    return SourceDataset(y=y, z=z, x=x, source_id=source_id), beta, c


@pytest.fixture
def rng():
    return seeded_rng(20240601)
