import numpy as np
import pytest

from posmlp import tensor as T


@pytest.fixture(autouse=True)
def checked_mode():
    """Fail fast on NaN/Inf everywhere in the suite."""
    T.set_checked(True)
    yield
    T.set_checked(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
