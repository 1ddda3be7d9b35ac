import numpy as np
import pytest

from manifold_mae import tensor


@pytest.fixture(autouse=True)
def _debug_checks():
    # NaN/Inf screening at op boundaries is on for the whole suite.
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


def finite_diff_grad(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        g.ravel()[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * h)
    return g


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Max-norm relative error, safe around zero."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.max(np.abs(want)), 1e-12)
    return float(np.max(np.abs(got - want)) / denom)
