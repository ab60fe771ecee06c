import numpy as np
import pytest

from delibmt.tensor import using_dtype


@pytest.fixture
def f64():
    """Run the engine in float64 for finite-difference verification."""
    with using_dtype(np.float64):
        yield
