import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(f, array, eps=1e-6):
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``array``.

    ``array`` is perturbed in place entry by entry and restored, so ``f``
    must read it afresh on every call.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + eps
        fp = f()
        array[idx] = orig - eps
        fm = f()
        array[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_error(analytic, numeric):
    """Largest absolute deviation scaled by the numeric gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
