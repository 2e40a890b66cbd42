import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(f, x, step=1e-5):
    """Central-difference gradient of a scalar function, element by element."""
    grad = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi.flat[i] += step
        lo.flat[i] -= step
        grad.flat[i] = (f(hi) - f(lo)) / (2 * step)
    return grad


def finite_difference_param(f, param, step=1e-5):
    """Like finite_difference but perturbs a parameter array in place."""
    grad = np.zeros_like(param, dtype=np.float64)
    for i in range(param.size):
        orig = param.flat[i]
        param.flat[i] = orig + step
        hi = f()
        param.flat[i] = orig - step
        lo = f()
        param.flat[i] = orig
        grad.flat[i] = (hi - lo) / (2 * step)
    return grad
