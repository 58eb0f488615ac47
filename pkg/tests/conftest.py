import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import moelab as m


@pytest.fixture
def small_dims():
    return m.ModelDims(D=2, N=4, E=3, Ne=3, P=3, steps=0, dt=0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(dims, rng, scale=1.0):
    return m.ParamState(
        W0=scale * rng.standard_normal((dims.N, dims.D)),
        W1=scale * rng.standard_normal((dims.E, dims.Ne, dims.N)),
        W2=scale * rng.standard_normal((dims.E, dims.N, dims.Ne)),
        w3=scale * rng.standard_normal(dims.N),
        r=scale * rng.standard_normal((dims.E, dims.N)),
        b=scale * rng.standard_normal(dims.E),
    )


def random_dataset(dims, rng):
    x = rng.standard_normal((dims.P, dims.D))
    y = rng.standard_normal(dims.P)
    return m.Dataset(x=x, y=y)
