import numpy as np
import pytest

from gswap import backend as backend_mod


def _available_backends():
    names = ["numpy"]
    if backend_mod.numba_available():
        names.append("numba")
    return names


@pytest.fixture(params=_available_backends())
def backend(request):
    """Run a test under each compositing backend, restoring the default after."""
    previous = backend_mod.get_backend()
    backend_mod.set_backend(request.param)
    yield request.param
    backend_mod.set_backend(previous)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
