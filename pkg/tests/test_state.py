import numpy as np
import pytest

from conftest import random_state
from dualimu.geom import IDENTITY_QUAT, quat_exp, quat_multiply
from dualimu.state import (
    ERROR_BLOCKS,
    ERROR_DIM,
    IDX,
    NoiseParams,
    SystemState,
    initial_covariance,
    state_difference,
    state_retract,
    symmetrize,
)


def test_error_ordering():
    assert ERROR_BLOCKS == ("p", "v", "theta", "bg1", "bg2", "ba1", "ba2")
    assert [IDX[b].start for b in ERROR_BLOCKS] == list(range(0, 21, 3))


def test_state_vector_round_trip(rng):
    x = random_state(rng)
    v = x.to_vector()
    assert v.shape == (22,)
    np.testing.assert_array_equal(SystemState.from_vector(v).to_vector(), v)


def test_state_rejects_non_finite_and_bad_shape():
    with pytest.raises(ValueError):
        SystemState(p=[np.nan, 0, 0])
    with pytest.raises(ValueError):
        SystemState.from_vector(np.zeros(21))


def test_state_normalizes_quaternion():
    x = SystemState(q=[2.0, 0, 0, 0])
    np.testing.assert_array_equal(x.q, IDENTITY_QUAT)


def test_retract_zero_is_identity(rng):
    x = random_state(rng)
    y = state_retract(x, np.zeros(ERROR_DIM))
    np.testing.assert_allclose(y.to_vector(), x.to_vector(), atol=1e-15)


def test_retract_position_only(rng):
    x = random_state(rng)
    dx = np.zeros(ERROR_DIM)
    dx[0] = 1.0
    y = state_retract(x, dx)
    np.testing.assert_allclose(y.p, x.p + [1.0, 0, 0])
    np.testing.assert_allclose(y.to_vector()[3:], x.to_vector()[3:], atol=1e-15)


def test_difference_of_equal_states_is_zero(rng):
    x = random_state(rng)
    np.testing.assert_allclose(state_difference(x, x), np.zeros(ERROR_DIM), atol=1e-15)


def test_yaw_offset():
    eps = 1e-4
    x_hat = SystemState()
    x = SystemState(q=quat_multiply(x_hat.q, quat_exp(np.array([0.0, 0.0, eps]))))
    np.testing.assert_allclose(state_difference(x, x_hat)[IDX["theta"]], [0, 0, eps], atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_retract_difference_round_trip(seed):
    rng = np.random.default_rng(seed)
    x_hat = random_state(rng)
    dx = 1e-3 * rng.normal(size=ERROR_DIM)
    np.testing.assert_allclose(state_difference(state_retract(x_hat, dx), x_hat), dx, atol=1e-10)


def test_initial_covariance_layout():
    P = initial_covariance()
    assert P.shape == (21, 21)
    np.testing.assert_array_equal(np.diag(P)[IDX["ba1"]], [1e-2] * 3)
    np.testing.assert_array_equal(np.diag(P)[IDX["theta"]], [1e-4] * 3)
    with pytest.raises(ValueError):
        initial_covariance((1.0,) * 6)
    with pytest.raises(ValueError):
        initial_covariance((1.0,) * 6 + (-1.0,))


def test_symmetrize():
    A = np.arange(9.0).reshape(3, 3)
    S = symmetrize(A)
    np.testing.assert_array_equal(S, S.T)


def test_noise_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(sigma_g1=-1.0)
    with pytest.raises(ValueError):
        NoiseParams(sigma_a2=np.inf)
    assert NoiseParams.zero().sigma_wa2 == 0.0
    assert NoiseParams().scaled(2.0).sigma_g1 == 2e-3
