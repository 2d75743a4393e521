import functools

import numpy as np
import pytest
from hypothesis import strategies as st

from dualimu.simworld import make_profile
from dualimu.state import SystemState

finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)
vec3 = st.lists(finite, min_size=3, max_size=3).map(np.array)


@st.composite
def unit_quats(draw):
    raw = draw(st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=4, max_size=4))
    q = np.array(raw)
    n = np.linalg.norm(q)
    if n < 1e-3:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return q / n


@functools.lru_cache(maxsize=None)
def cached_profile(cell: str, seed: int = 0):
    return make_profile(cell, seed=seed)


def random_state(rng: np.random.Generator, bias_scale: float = 0.1) -> SystemState:
    q = rng.normal(size=4)
    return SystemState(
        p=rng.normal(size=3),
        v=rng.normal(size=3),
        q=q / np.linalg.norm(q),
        bg1=bias_scale * rng.normal(size=3),
        bg2=bias_scale * rng.normal(size=3),
        ba1=bias_scale * rng.normal(size=3),
        ba2=bias_scale * rng.normal(size=3),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
