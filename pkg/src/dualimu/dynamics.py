"""Continuous-time relative dynamics and their error-state Jacobians.

The reference frame {I1} rotates and accelerates, so the relative velocity
picks up Coriolis, centripetal and Euler terms. Bias estimates are held
constant during propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualimu.geom import cross, quat_left, quat_right, quat_to_rot, skew
from dualimu.state import ERROR_DIM, IDX, SystemState

GRAVITY = np.array([0.0, 0.0, -9.81])

NOISE_BLOCKS = ("ng1", "ng2", "na1", "na2", "nwg1", "nwg2", "nwa1", "nwa2", "ndot_g1")
NOISE_DIM = 3 * len(NOISE_BLOCKS)
NIDX = {name: slice(3 * i, 3 * i + 3) for i, name in enumerate(NOISE_BLOCKS)}

_I3 = np.eye(3)


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega_m: np.ndarray
    accel_m: np.ndarray

    def __post_init__(self):
        for name in ("omega_m", "accel_m"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite {name} at t={self.t}")
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class StateDerivative:
    p_dot: np.ndarray
    v_dot: np.ndarray
    q_dot: np.ndarray
    bias_dot: np.ndarray  # 12 zeros: estimates are constant between updates

    def to_vector(self) -> np.ndarray:
        return np.concatenate((self.p_dot, self.v_dot, self.q_dot, self.bias_dot))


@dataclass(frozen=True)
class LinearizedModel:
    F: np.ndarray  # 21x21
    G: np.ndarray  # 21x27, last block column multiplies the gyro-1 noise rate
    K: np.ndarray
    U: np.ndarray


def state_rate(x: np.ndarray, w1m, a1m, w2m, a2m, w1dot) -> np.ndarray:
    """Time derivative of the packed 22-vector under bias-corrected inputs."""
    p, v, q = x[0:3], x[3:6], x[6:10]
    w1 = w1m - x[10:13]
    w2 = w2m - x[13:16]
    a1 = a1m - x[16:19]
    a2 = a2m - x[19:22]
    C = quat_to_rot(q)
    w1xp = cross(w1, p)
    v_dot = C @ a2 - a1 - 2.0 * cross(w1, v) - cross(w1, w1xp) - cross(w1dot, p)
    q_dot = 0.5 * (quat_left(q) @ np.concatenate(([0.0], w2)) - quat_right(q) @ np.concatenate(([0.0], w1)))
    out = np.zeros(22)
    out[0:3] = v
    out[3:6] = v_dot
    out[6:10] = q_dot
    return out


def continuous_dynamics(
    x_hat: SystemState, imu1: ImuSample, imu2: ImuSample, omega1_dot: np.ndarray
) -> StateDerivative:
    """Relative-state derivative with bias-corrected gyro and accel inputs."""
    xd = state_rate(
        x_hat.to_vector(),
        imu1.omega_m,
        imu1.accel_m,
        imu2.omega_m,
        imu2.accel_m,
        np.asarray(omega1_dot, dtype=float),
    )
    return StateDerivative(xd[0:3], xd[3:6], xd[6:10], xd[10:22])


def coupling_K(w1: np.ndarray, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Velocity sensitivity to the reference gyro error."""
    return skew(w1) @ skew(p) + skew(cross(w1, p) + 2.0 * v)


def coupling_U(w1: np.ndarray, w1dot: np.ndarray) -> np.ndarray:
    """Velocity sensitivity to position: centripetal plus Euler terms."""
    S = skew(w1)
    return S @ S + skew(w1dot)


def jacobian_arrays(x: np.ndarray, w1m, a1m, w2m, a2m, w1dot):
    """F, G, K, U for the packed state; array-level core of :func:`jacobian_F`."""
    p, v, q = x[0:3], x[3:6], x[6:10]
    w1 = w1m - x[10:13]
    w2 = w2m - x[13:16]
    a2 = a2m - x[19:22]
    C = quat_to_rot(q)
    K = coupling_K(w1, p, v)
    U = coupling_U(w1, w1dot)

    P, V, T = IDX["p"], IDX["v"], IDX["theta"]
    BG1, BG2, BA1, BA2 = IDX["bg1"], IDX["bg2"], IDX["ba1"], IDX["ba2"]

    F = np.zeros((ERROR_DIM, ERROR_DIM))
    F[P, V] = _I3
    F[V, P] = -U
    F[V, V] = -2.0 * skew(w1)
    F[V, T] = -C @ skew(a2)
    F[V, BG1] = -K
    F[V, BA1] = _I3
    F[V, BA2] = -C
    F[T, T] = -skew(w2)
    F[T, BG1] = C.T
    F[T, BG2] = -_I3

    G = np.zeros((ERROR_DIM, NOISE_DIM))
    px = skew(p)
    G[V, NIDX["ng1"]] = -K
    G[V, NIDX["na1"]] = _I3
    G[V, NIDX["na2"]] = -C
    G[V, NIDX["nwg1"]] = -px
    G[V, NIDX["ndot_g1"]] = -px
    G[T, NIDX["ng1"]] = C.T
    G[T, NIDX["ng2"]] = -_I3
    G[BG1, NIDX["nwg1"]] = _I3
    G[BG2, NIDX["nwg2"]] = _I3
    G[BA1, NIDX["nwa1"]] = _I3
    G[BA2, NIDX["nwa2"]] = _I3
    return F, G, K, U


def jacobian_F(
    x_hat: SystemState, imu1: ImuSample, imu2: ImuSample, omega1_dot: np.ndarray
) -> LinearizedModel:
    """Continuous error-state transition and noise Jacobians at the estimate."""
    F, G, K, U = jacobian_arrays(
        x_hat.to_vector(),
        imu1.omega_m,
        imu1.accel_m,
        imu2.omega_m,
        imu2.accel_m,
        np.asarray(omega1_dot, dtype=float),
    )
    return LinearizedModel(F=F, G=G, K=K, U=U)


def noise_covariance(noise, gyro1_inflation: float = 1.0) -> np.ndarray:
    """Continuous noise spectral density matching the columns of G.

    The gyro-1 noise-rate block is left at zero because no density for it is
    defined; its effect can be absorbed by inflating the gyro-1 density.
    """
    if gyro1_inflation < 0:
        raise ValueError("gyro1_inflation must be non-negative")
    dens = [
        noise.sigma_g1 * gyro1_inflation,
        noise.sigma_g2,
        noise.sigma_a1,
        noise.sigma_a2,
        noise.sigma_wg1,
        noise.sigma_wg2,
        noise.sigma_wa1,
        noise.sigma_wa2,
        0.0,
    ]
    return np.diag(np.repeat(np.square(dens), 3))


def angular_accel_estimate(
    omega_m_prev: np.ndarray,
    omega_m_curr: np.ndarray,
    dt: float,
    *,
    cutoff_hz: float | None = None,
    previous: np.ndarray | None = None,
) -> np.ndarray:
    """Backward-difference angular acceleration, optionally low-passed.

    With ``cutoff_hz`` set, the raw difference is blended into ``previous``
    by a single-pole filter.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    raw = (np.asarray(omega_m_curr, dtype=float) - np.asarray(omega_m_prev, dtype=float)) / dt
    if cutoff_hz is None or previous is None:
        return raw
    if cutoff_hz <= 0:
        raise ValueError("cutoff_hz must be positive")
    tau = 1.0 / (2.0 * np.pi * cutoff_hz)
    gain = dt / (dt + tau)
    return previous + gain * (raw - previous)
