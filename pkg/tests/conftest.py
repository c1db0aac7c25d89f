import numpy as np
import pytest


def central_diff(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at array ``x`` (any shape)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b):
    """Entrywise |a - b| / max(1, |a|, |b|): relative for large entries, absolute near zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
