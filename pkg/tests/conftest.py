import numpy as np
import pytest


def fd_gradient(func, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued ``func`` w.r.t. ``x``.

    ``func`` takes no arguments and must re-read ``x`` (mutated in place)
    on every call, i.e. rebuild its forward pass from the same buffer.
    """
    grad = np.zeros_like(x)
    flat = x.ravel()
    grad_flat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = func()
        flat[i] = orig - step
        minus = func()
        flat[i] = orig
        grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference, normalized by the larger gradient scale."""
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
