import numpy as np
import pytest

from fedkd.nn import ClientModel, ModelSpec

FD_STEP = 1e-5
REL_TOL = 1e-4
# coordinates whose true magnitude is below this are compared absolutely
REL_FLOOR = 1e-6


def central_diff(f, x, h=FD_STEP):
    """Central finite-difference gradient of scalar f at x (x is restored)."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=REL_FLOOR):
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_spec(rng, max_params=500, d=None, K=None):
    """Random small MLP spec with at most max_params parameters."""
    while True:
        d_ = d or int(rng.integers(2, 7))
        K_ = K or int(rng.integers(2, 6))
        hidden = tuple(int(h) for h in rng.integers(2, 12, size=rng.integers(0, 3)))
        spec = ModelSpec(d_, hidden, K_)
        if spec.n_params <= max_params:
            return spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(rng, **kw):
    spec = random_spec(rng, **kw)
    m = ClientModel.init(spec, rng)
    # push biases off zero so ReLU kinks stay away from the FD stencil
    m.params += 0.05 * rng.standard_normal(m.params.size)
    return m
