"""Relative-position and relative-orientation measurement updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualimu.errors import NumericalFailure
from dualimu.geom import UNIT_TOL, canonical, normalize, quat_conj, quat_product, quat_to_rot
from dualimu.state import ERROR_DIM, IDX, SystemState, state_retract, symmetrize

CHI2_GATE_3DOF = 7.81


def _psd_cov(R) -> np.ndarray:
    R = np.asarray(R, dtype=float).reshape(3, 3)
    if not np.allclose(R, R.T, atol=1e-12) or np.min(np.linalg.eigvalsh(symmetrize(R))) < -1e-12:
        raise ValueError("measurement covariance must be symmetric PSD")
    return R


@dataclass(frozen=True)
class RelPositionMeas:
    t: float
    dp: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dp", np.asarray(self.dp, dtype=float).reshape(3))
        object.__setattr__(self, "R", _psd_cov(self.R))


@dataclass(frozen=True)
class RelOrientationMeas:
    t: float
    dq: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.dq, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            q = normalize(q)
        object.__setattr__(self, "dq", q)
        object.__setattr__(self, "R", _psd_cov(self.R))


@dataclass(frozen=True)
class InnovationStats:
    nis: float
    dof: int
    accepted: bool


def residual_and_H_dp(x_hat: SystemState, m: RelPositionMeas):
    H = np.zeros((3, ERROR_DIM))
    H[:, IDX["p"]] = np.eye(3)
    return m.dp - x_hat.p, H


def residual_and_H_dq(x_hat: SystemState, m: RelOrientationMeas):
    # The orientation noise is applied on the left, in the reference frame,
    # so the attitude error appears rotated by C(q_hat).
    err = canonical(quat_product(m.dq, quat_conj(x_hat.q)))
    H = np.zeros((3, ERROR_DIM))
    H[:, IDX["theta"]] = quat_to_rot(x_hat.q)
    return 2.0 * err[1:], H


def ekf_update(x_hat: SystemState, P: np.ndarray, residual, H, R, *, gate: float | None = None):
    """EKF correction with Joseph-form covariance.

    Returns ``(x, P, InnovationStats)``. With ``gate`` set, a measurement whose
    normalized innovation squared exceeds it is rejected and the inputs are
    returned unchanged.
    """
    residual = np.asarray(residual, dtype=float)
    H = np.asarray(H, dtype=float)
    R = np.asarray(R, dtype=float)
    if H.shape != (residual.size, ERROR_DIM) or R.shape != (residual.size, residual.size):
        raise ValueError(f"inconsistent shapes: r {residual.shape}, H {H.shape}, R {R.shape}")
    S = H @ P @ H.T + R
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalFailure(f"innovation covariance is singular (condition {cond:.3g})")
    S_inv_r = np.linalg.solve(S, residual)
    nis = float(residual @ S_inv_r)
    if gate is not None and nis > gate:
        return x_hat, P, InnovationStats(nis, residual.size, False)
    PHt = P @ H.T
    K = np.linalg.solve(S, PHt.T).T
    dx = K @ residual
    A = np.eye(ERROR_DIM) - K @ H
    P_new = symmetrize(A @ P @ A.T + K @ R @ K.T)
    return state_retract(x_hat, dx), P_new, InnovationStats(nis, residual.size, True)
