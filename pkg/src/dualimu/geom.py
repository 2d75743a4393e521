"""Quaternion and rotation kernel.

Hamilton convention, scalar first: ``q = [w, x, y, z]`` and ``C(a ⊗ b) = C(a) C(b)``.
The attitude error is local (right-multiplicative): ``q = q_hat ⊗ δq`` with
``δq ≈ [1, δθ/2]``.
"""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-9
_SMALL_ANGLE = 1e-8

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ u == np.cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3-vector cross product; much cheaper than ``np.cross`` for single vectors."""
    a0, a1, a2 = a
    b0, b1, b2 = b
    return np.array([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])


def normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw Hamilton product without renormalization (works on any 4-vectors)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two unit quaternions, renormalized."""
    return normalize(quat_product(a, b))


def quat_left(q: np.ndarray) -> np.ndarray:
    """Matrix ``L(q)`` with ``q ⊗ p == L(q) @ p``."""
    w, x, y, z = q
    return np.array(
        [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
    )


def quat_right(q: np.ndarray) -> np.ndarray:
    """Matrix ``R(q)`` with ``p ⊗ q == R(q) @ p``."""
    w, x, y, z = q
    return np.array(
        [[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]]
    )


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion.

    Evaluated as the homogeneous quadratic form, so a non-unit ``q`` yields
    ``|q|² C(q/|q|)``. Callers that need a proper rotation pass unit input.
    """
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def rot_to_quat(C: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a proper rotation matrix (Shepperd's method)."""
    tr = np.trace(C)
    diag = np.diag(C)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array(
            [0.25 * s, (C[2, 1] - C[1, 2]) / s, (C[0, 2] - C[2, 0]) / s, (C[1, 0] - C[0, 1]) / s]
        )
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + C[0, 0] - C[1, 1] - C[2, 2])
        q = np.array(
            [(C[2, 1] - C[1, 2]) / s, 0.25 * s, (C[0, 1] + C[1, 0]) / s, (C[0, 2] + C[2, 0]) / s]
        )
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - C[0, 0] + C[1, 1] - C[2, 2])
        q = np.array(
            [(C[0, 2] - C[2, 0]) / s, (C[0, 1] + C[1, 0]) / s, 0.25 * s, (C[1, 2] + C[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 - C[0, 0] - C[1, 1] + C[2, 2])
        q = np.array(
            [(C[1, 0] - C[0, 1]) / s, (C[0, 2] + C[2, 0]) / s, (C[1, 2] + C[2, 1]) / s, 0.25 * s]
        )
    return canonical(normalize(q))


def canonical(q: np.ndarray) -> np.ndarray:
    """Pick the sign with non-negative scalar part."""
    return -q if q[0] < 0.0 else q


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation vector (axis times angle)."""
    angle = np.linalg.norm(rotvec)
    if angle < _SMALL_ANGLE:
        # second-order Taylor expansion of cos(a/2), sin(a/2)/a
        return normalize(np.concatenate(([1.0 - angle * angle / 8.0], 0.5 * rotvec)))
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) / angle * rotvec))


def rot_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector."""
    return quat_to_rot(quat_exp(rotvec))


def quat_integrate(q: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Advance ``q`` under a constant body rate: ``q ⊗ exp(ω dt / 2)``."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    return quat_multiply(q, quat_exp(np.asarray(omega, dtype=float) * dt))


def quat_error_inject(q_hat: np.ndarray, dtheta: np.ndarray) -> np.ndarray:
    """Apply a small local attitude error: ``q_hat ⊗ normalize([1, δθ/2])``."""
    dq = normalize(np.concatenate(([1.0], 0.5 * np.asarray(dtheta, dtype=float))))
    return quat_multiply(q_hat, dq)


def quat_error_extract(q: np.ndarray, q_hat: np.ndarray) -> np.ndarray:
    """Local attitude error ``δθ`` such that ``quat_error_inject(q_hat, δθ) == q``.

    Uses the scaled Gibbs vector ``2 vec(δq) / w(δq)``, which inverts the
    injection exactly (up to the ±q ambiguity) rather than only to first order.
    """
    dq = quat_product(quat_conj(q_hat), q)
    if dq[0] == 0.0:
        raise ValueError("attitude error of 180 degrees has no small-angle form")
    return 2.0 * dq[1:] / dq[0]


def rotvec_jacobian(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient ``∂(C(q) w)/∂q`` (3x4) of the quadratic-form rotation."""
    qw = q[0]
    qv = q[1:]
    d_w = 2.0 * (qw * w + cross(qv, w))
    d_v = 2.0 * (np.dot(qv, w) * np.eye(3) + np.outer(qv, w) - np.outer(w, qv) - qw * skew(w))
    return np.column_stack((d_w, d_v))
