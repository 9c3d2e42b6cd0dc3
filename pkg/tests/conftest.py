import numpy as np
import pytest

from metareg import backend


@pytest.fixture(params=backend.available_backends())
def each_backend(request):
    """Runs the test once per available kernel backend."""
    prev = backend.set_backend(request.param)
    yield request.param
    backend.set_backend(prev)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor=1e-8):
    return np.max(np.abs(analytic - numeric) / (np.abs(analytic) + floor))
