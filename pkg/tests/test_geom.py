import numpy as np
import pytest
from hypothesis import given, settings
from scipy.integrate import solve_ivp
from scipy.spatial.transform import Rotation

from conftest import unit_quats, vec3
from dualimu.geom import (
    IDENTITY_QUAT,
    cross,
    normalize,
    quat_conj,
    quat_error_extract,
    quat_error_inject,
    quat_exp,
    quat_integrate,
    quat_left,
    quat_multiply,
    quat_product,
    quat_right,
    quat_to_rot,
    rot_to_quat,
    rotvec_jacobian,
    skew,
)


def _scipy_rot(q):
    # scipy stores quaternions scalar-last
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def test_identity_product():
    q = normalize(np.array([0.3, -0.2, 0.9, 0.1]))
    np.testing.assert_allclose(quat_multiply(IDENTITY_QUAT, q), q, atol=1e-15)
    np.testing.assert_allclose(quat_multiply(q, IDENTITY_QUAT), q, atol=1e-15)


def test_i_times_j_is_k():
    out = quat_multiply(np.array([0.0, 1, 0, 0]), np.array([0.0, 0, 1, 0]))
    np.testing.assert_array_equal(out, [0.0, 0, 0, 1])


@settings(max_examples=200, deadline=None)
@given(unit_quats(), unit_quats())
def test_product_composes_rotations(a, b):
    np.testing.assert_allclose(quat_to_rot(quat_multiply(a, b)), quat_to_rot(a) @ quat_to_rot(b), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(unit_quats(), unit_quats())
def test_left_right_matrices(a, b):
    np.testing.assert_allclose(quat_left(a) @ b, quat_product(a, b), atol=1e-15)
    np.testing.assert_allclose(quat_right(b) @ a, quat_product(a, b), atol=1e-15)


def test_rot_identity_and_quarter_turn():
    np.testing.assert_array_equal(quat_to_rot(IDENTITY_QUAT), np.eye(3))
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(quat_to_rot(q) @ [1.0, 0, 0], [0.0, 1, 0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(unit_quats(), vec3)
def test_rot_matches_sandwich_product(q, v):
    sandwich = quat_product(quat_product(q, np.concatenate(([0.0], v))), quat_conj(q))
    np.testing.assert_allclose(quat_to_rot(q) @ v, sandwich[1:], atol=1e-12 * (1 + np.linalg.norm(v)))


@settings(max_examples=200, deadline=None)
@given(unit_quats())
def test_rot_matches_scipy_and_is_proper(q):
    C = quat_to_rot(q)
    np.testing.assert_allclose(C, _scipy_rot(q), atol=1e-12)
    np.testing.assert_allclose(C.T @ C, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(C) - 1.0) < 1e-9


@settings(max_examples=200, deadline=None)
@given(unit_quats())
def test_rot_to_quat_inverts(q):
    r = rot_to_quat(quat_to_rot(q))
    assert min(np.abs(r - q).max(), np.abs(r + q).max()) < 1e-12
    assert r[0] >= 0.0


def test_skew_examples():
    np.testing.assert_array_equal(skew(np.zeros(3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew(np.array([0.0, 0, 1])) @ [1.0, 0, 0], [0.0, 1, 0])


@settings(max_examples=200, deadline=None)
@given(vec3, vec3)
def test_skew_and_cross_match_component_formula(v, u):
    expected = np.array([v[1] * u[2] - v[2] * u[1], v[2] * u[0] - v[0] * u[2], v[0] * u[1] - v[1] * u[0]])
    # matmul may reorder the sums, so allow one rounding step
    np.testing.assert_allclose(skew(v) @ u, expected, rtol=0, atol=1e-15 * np.abs(v).max() * np.abs(u).max() * 4)
    np.testing.assert_array_equal(cross(v, u), expected)
    np.testing.assert_array_equal(skew(v), -skew(v).T)


def test_integrate_zero_rate_is_identity_map():
    q = normalize(np.array([0.5, 0.5, -0.5, 0.5]))
    np.testing.assert_allclose(quat_integrate(q, np.zeros(3), 0.3), q, atol=1e-15)


def test_integrate_quarter_turn_about_z():
    q = quat_integrate(IDENTITY_QUAT, np.array([0.0, 0.0, np.pi]), 0.5)
    np.testing.assert_allclose(q, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)], atol=1e-15)


def test_integrate_matches_fine_rk4():
    rng = np.random.default_rng(5)
    for _ in range(20):
        q0 = normalize(rng.normal(size=4))
        w = rng.normal(size=3)
        dt = rng.uniform(0.01, 0.5)
        # RK4 of q̇ = ½ q ⊗ (0, ω) at dt/100
        h = dt / 100
        f = lambda q: 0.5 * quat_product(q, np.concatenate(([0.0], w)))
        q = q0.copy()
        for _ in range(100):
            k1 = f(q)
            k2 = f(q + 0.5 * h * k1)
            k3 = f(q + 0.5 * h * k2)
            k4 = f(q + h * k3)
            q = q + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        np.testing.assert_allclose(quat_integrate(q0, w, dt), q, atol=1e-8)


def test_integrate_negative_dt_raises():
    with pytest.raises(ValueError):
        quat_integrate(IDENTITY_QUAT, np.ones(3), -0.1)


def test_inject_examples():
    np.testing.assert_array_equal(quat_error_inject(IDENTITY_QUAT, np.zeros(3)), IDENTITY_QUAT)
    eps = 1e-3
    expected = normalize(np.array([1.0, eps, 0.0, 0.0]))
    np.testing.assert_allclose(quat_error_inject(IDENTITY_QUAT, np.array([2 * eps, 0, 0])), expected, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(unit_quats(), vec3)
def test_inject_extract_round_trip(q_hat, d):
    dtheta = 0.01 * d / max(np.linalg.norm(d), 1.0)
    q = quat_error_inject(q_hat, dtheta)
    np.testing.assert_allclose(quat_error_extract(q, q_hat), dtheta, atol=1e-10)


def test_error_is_local_frame():
    # q = q_hat ⊗ exp(δθ): a body-frame rotation of the estimate
    q_hat = normalize(np.array([0.8, 0.1, -0.4, 0.3]))
    dtheta = np.array([1e-4, -2e-4, 3e-4])
    q = quat_multiply(q_hat, quat_exp(dtheta))
    np.testing.assert_allclose(quat_error_extract(q, q_hat), dtheta, atol=1e-11)


def test_extract_half_turn_raises():
    with pytest.raises(ValueError):
        quat_error_extract(np.array([0.0, 1.0, 0.0, 0.0]), IDENTITY_QUAT)


def test_normalize_zero_raises():
    with pytest.raises(ValueError):
        normalize(np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(unit_quats(), vec3)
def test_rotvec_jacobian_matches_finite_differences(q, w):
    h = 1e-6
    fd = np.column_stack(
        [(quat_to_rot(q + h * e) @ w - quat_to_rot(q - h * e) @ w) / (2 * h) for e in np.eye(4)]
    )
    np.testing.assert_allclose(rotvec_jacobian(q, w), fd, atol=1e-8 * (1 + np.linalg.norm(w)))


def test_batched_rotation_matches_loop():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(4, 6))
    Q /= np.linalg.norm(Q, axis=0)
    batched = quat_to_rot(Q)
    for k in range(6):
        np.testing.assert_allclose(batched[:, :, k], quat_to_rot(Q[:, k]), atol=0)
