import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("sqgnash", max_examples=25, deadline=None)
settings.load_profile("sqgnash")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar(grid, values):
    from sqgnash.grid_spectral import ScalarField

    return ScalarField(grid, np.asarray(values, dtype=float))
