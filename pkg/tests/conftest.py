import numpy as np
import pytest

from scanet import kernels
from scanet._jit import JIT_AVAILABLE

BACKENDS = ["numpy"] + (["numba"] if JIT_AVAILABLE else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per kernel set by swapping what tensor ops dispatch to."""
    ns = kernels.jit if request.param == "numba" else kernels.numpy_
    monkeypatch.setattr(kernels, "active", ns)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
