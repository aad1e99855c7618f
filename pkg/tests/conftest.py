import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _printoptions():
    with np.printoptions(precision=17):
        yield
