"""Discrete error-state transition, process noise and the EKF prediction step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dualimu.dynamics import ImuSample, LinearizedModel, coupling_K, jacobian_arrays, state_rate
from dualimu.geom import normalize, rot_exp, quat_to_rot, skew
from dualimu.state import ERROR_DIM, IDX, SystemState, symmetrize

_I21 = np.eye(ERROR_DIM)
_I3 = np.eye(3)


@dataclass(frozen=True)
class ImuEpoch:
    """Synchronized samples of both IMUs plus the reference angular acceleration."""

    imu1: ImuSample
    imu2: ImuSample
    omega1_dot: np.ndarray

    def __post_init__(self):
        if abs(self.imu1.t - self.imu2.t) > 1e-9:
            raise ValueError(f"unsynchronized samples: {self.imu1.t} vs {self.imu2.t}")
        object.__setattr__(self, "omega1_dot", np.asarray(self.omega1_dot, dtype=float).reshape(3))

    @property
    def t(self) -> float:
        return self.imu1.t

    def inputs(self):
        return (self.imu1.omega_m, self.imu1.accel_m, self.imu2.omega_m, self.imu2.accel_m, self.omega1_dot)


@dataclass(frozen=True)
class EstimateRecord:
    """One sample of an estimate history used by the closed-form transition."""

    t: float
    x: SystemState
    imu1: ImuSample
    imu2: ImuSample


def _as_F(F) -> np.ndarray:
    return F.F if isinstance(F, LinearizedModel) else np.asarray(F, dtype=float)


def phi_first_order(F, dt: float, second_order: bool = True) -> np.ndarray:
    """One-step transition ``I + F dt (+ F² dt²/2)``."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    A = _as_F(F) * dt
    Phi = _I21 + A
    if second_order:
        Phi = Phi + 0.5 * (A @ A)
    return Phi


def phi_step(F_start, F_end, dt: float, second_order: bool = True) -> np.ndarray:
    """Transition over one IMU interval using the endpoint-averaged F.

    Averaging the endpoints makes the accumulated product second-order
    accurate when the quadratic term is kept.
    """
    return phi_first_order(0.5 * (_as_F(F_start) + _as_F(F_end)), dt, second_order)


def accumulate_phi(steps: Sequence[np.ndarray]) -> np.ndarray:
    """Product ``Φ_n ⋯ Φ_1`` of per-step transitions."""
    Phi = _I21.copy()
    for S in steps:
        Phi = S @ Phi
    return Phi


def discrete_Qd(F, G: np.ndarray, Qc: np.ndarray, dt: float, second_order: bool = True) -> np.ndarray:
    """Trapezoidal discrete process noise over one step."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Phi = phi_first_order(F, dt, second_order)
    GQG = G @ Qc @ G.T
    Qd = 0.5 * dt * (Phi @ GQG @ Phi.T + GQG)
    return symmetrize(Qd)


def _check_uniform(times: np.ndarray) -> float:
    if times.size < 2:
        return 0.0
    steps = np.diff(times)
    dt = steps.mean()
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(1.0, abs(times[-1])):
        raise ValueError("closed-form transition needs a uniformly sampled history without gaps")
    return float(dt)


def _cumtrapz(values: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(values)
    out[1:] = np.cumsum(0.5 * dt * (values[1:] + values[:-1]), axis=0)
    return out


def closed_form_series(records: Sequence[EstimateRecord]) -> np.ndarray:
    """Closed-form transitions ``Φ(t_k, t_0)`` for every sample of a history.

    Each block is built from the rotations ``C'`` and ``C''`` of the two IMU
    frames since ``t_0`` and nested trapezoidal integrals over the samples.
    Blocks that are structurally zero are never written.
    """
    n = len(records)
    if n == 0:
        raise ValueError("empty estimate history")
    times = np.array([r.t for r in records], dtype=float)
    dt = _check_uniform(times)
    tau = times - times[0]

    w1 = np.array([r.imu1.omega_m - r.x.bg1 for r in records])
    w2 = np.array([r.imu2.omega_m - r.x.bg2 for r in records])
    a2 = np.array([r.imu2.accel_m - r.x.ba2 for r in records])
    C = np.array([quat_to_rot(r.x.q) for r in records])
    K = np.array([coupling_K(w1[k], r.x.p, r.x.v) for k, r in enumerate(records)])

    Cp = np.empty((n, 3, 3))
    Cpp = np.empty((n, 3, 3))
    Cp[0] = _I3
    Cpp[0] = _I3
    for k in range(n - 1):
        Cp[k + 1] = rot_exp(-0.5 * (w1[k] + w1[k + 1]) * dt) @ Cp[k]
        Cpp[k + 1] = rot_exp(-0.5 * (w2[k] + w2[k + 1]) * dt) @ Cpp[k]

    CppT = np.transpose(Cpp, (0, 2, 1))
    phi33 = Cpp
    phi34 = np.einsum("kij,kjl->kil", Cpp, _cumtrapz(np.einsum("kij,klj->kil", CppT, C), dt))
    phi35 = -np.einsum("kij,kjl->kil", Cpp, _cumtrapz(CppT, dt))

    CpT = np.transpose(Cp, (0, 2, 1))
    W1 = np.array([skew(w) for w in w1])
    CA = np.einsum("kij,kjl->kil", C, np.array([skew(a) for a in a2]))

    forcing = {
        "theta": -np.einsum("kij,kjl->kil", CA, phi33),
        "bg1": -np.einsum("kij,kjl->kil", CA, phi34) - K,
        "bg2": -np.einsum("kij,kjl->kil", CA, phi35),
        "ba1": np.broadcast_to(_I3, (n, 3, 3)),
        "ba2": -C,
    }

    out = np.zeros((n, ERROR_DIM, ERROR_DIM))
    P, V, T = IDX["p"], IDX["v"], IDX["theta"]
    W0 = skew(w1[0])
    y1 = _I3 + tau[:, None, None] * W0
    out[:, P, P] = np.einsum("kij,kjl->kil", Cp, y1)
    out[:, V, P] = -np.einsum("kij,kjl->kil", W1, out[:, P, P]) + np.einsum("kij,jl->kil", Cp, W0)
    out[:, P, V] = Cp * tau[:, None, None]
    out[:, V, V] = -np.einsum("kij,kjl->kil", W1, out[:, P, V]) + Cp
    for name, f in forcing.items():
        ydot = _cumtrapz(np.einsum("kij,kjl->kil", CpT, f), dt)
        y = _cumtrapz(ydot, dt)
        blk = IDX[name]
        out[:, P, blk] = np.einsum("kij,kjl->kil", Cp, y)
        out[:, V, blk] = -np.einsum("kij,kjl->kil", W1, out[:, P, blk]) + np.einsum("kij,kjl->kil", Cp, ydot)
    out[:, T, T] = phi33
    out[:, T, IDX["bg1"]] = phi34
    out[:, T, IDX["bg2"]] = phi35
    for name in ("bg1", "bg2", "ba1", "ba2"):
        blk = IDX[name]
        out[:, blk, blk] = _I3
    return out


def phi_closed_form(records: Sequence[EstimateRecord], t0: float, t1: float) -> np.ndarray:
    """Closed-form ``Φ(t1, t0)`` from a uniformly sampled estimate history."""
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    times = np.array([r.t for r in records], dtype=float)
    tol = 1e-9 * max(1.0, abs(t1))
    sel = [r for r, t in zip(records, times) if t0 - tol <= t <= t1 + tol]
    if not sel or abs(sel[0].t - t0) > tol or abs(sel[-1].t - t1) > tol:
        raise ValueError(f"history does not cover [{t0}, {t1}] with samples at both ends")
    return closed_form_series(sel)[-1]


def midpoint_inputs(start: ImuEpoch, end: ImuEpoch, before: ImuEpoch | None = None, after: ImuEpoch | None = None):
    """Inputs halfway between two epochs.

    With both neighbours the four-point cubic estimate is used, otherwise the
    linear average.
    """
    u0, u1 = start.inputs(), end.inputs()
    if before is not None and after is not None:
        dt = end.t - start.t
        tol = 1e-9 * max(1.0, abs(end.t))
        if abs(start.t - before.t - dt) > tol or abs(after.t - end.t - dt) > tol:
            before = after = None
    if before is None or after is None:
        return tuple(0.5 * (a + b) for a, b in zip(u0, u1))
    um1, u2 = before.inputs(), after.inputs()
    return tuple((9.0 * (a + b) - (c + d)) / 16.0 for a, b, c, d in zip(u0, u1, um1, u2))


def rk4_state(x: np.ndarray, start: ImuEpoch, end: ImuEpoch, dt: float, mid=None) -> np.ndarray:
    """RK4 step of the packed state; ``mid`` overrides the midpoint inputs."""
    u0 = start.inputs()
    u1 = end.inputs()
    um = midpoint_inputs(start, end) if mid is None else mid
    k1 = state_rate(x, *u0)
    k2 = state_rate(x + 0.5 * dt * k1, *um)
    k3 = state_rate(x + 0.5 * dt * k2, *um)
    k4 = state_rate(x + dt * k3, *u1)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[6:10] = normalize(out[6:10])
    return out


def ekf_predict(
    x_hat: SystemState,
    P: np.ndarray,
    start: ImuEpoch,
    end: ImuEpoch,
    Qc: np.ndarray,
    *,
    second_order: bool = True,
    before: ImuEpoch | None = None,
    after: ImuEpoch | None = None,
    cache: dict | None = None,
):
    """Propagate the estimate and covariance across one IMU interval.

    ``before`` and ``after`` are the neighbouring epochs, used when present to
    interpolate the inputs to third order. ``cache`` (any dict reused across
    calls) lets the end-point Jacobians of one step serve as the start-point
    Jacobians of the next when the state was not updated in between.
    Returns ``(x_next, P_next, Phi)``.
    """
    dt = end.t - start.t
    if not dt > 0:
        raise ValueError(f"non-increasing IMU timestamps: {start.t} -> {end.t}")
    x0 = x_hat.to_vector()
    x1 = rk4_state(x0, start, end, dt, midpoint_inputs(start, end, before, after))
    if cache is not None and cache.get("epoch") is start and np.array_equal(cache.get("x"), x0):
        F0, G0 = cache["F"], cache["G"]
    else:
        F0, G0, _, _ = jacobian_arrays(x0, *start.inputs())
    F1, G1, _, _ = jacobian_arrays(x1, *end.inputs())
    if cache is not None:
        cache.update(epoch=end, x=x1, F=F1, G=G1)
    Phi = phi_first_order(0.5 * (F0 + F1), dt, second_order)
    G = 0.5 * (G0 + G1)
    GQG = G @ Qc @ G.T
    Qd = 0.5 * dt * (Phi @ GQG @ Phi.T + GQG)
    P_next = symmetrize(Phi @ P @ Phi.T + Qd)
    return SystemState.from_vector(x1), P_next, Phi
