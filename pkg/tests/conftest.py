import numpy as np
import pytest

from ministereo import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def f64_dot(x, r):
    """Scalar functional <x, r> accumulated in float64.

    Kernel outputs stay float32; only the test readout is exact, so the
    finite-difference quotient is not polluted by reduction rounding.
    """
    x = ad.lift(x)
    r64 = np.asarray(r, dtype=np.float64).reshape(-1)
    value = np.asarray(np.dot(x.value.reshape(-1).astype(np.float64), r64),
                       dtype=np.float32)

    def vjp(g):
        return ((float(g) * r64).astype(np.float32).reshape(x.value.shape),)

    return ad.custom(value, (x,), vjp, "f64_dot")


def grad_check(fn, params, *, out_shape=None, eps=1e-3, n_coords=None, seed=3,
               func_seed=99):
    """Finite-difference check of op ``fn`` through a fixed random functional."""
    if out_shape is None:
        out_shape = fn(ad.ParamView(params)).value.shape
    r = np.random.default_rng(func_seed).normal(size=out_shape)
    r /= np.sqrt(max(r.size, 1))

    def scalar(view):
        return f64_dot(fn(view), r)

    return ad.finite_diff_check(scalar, params, eps=eps, n_coords=n_coords, seed=seed)
