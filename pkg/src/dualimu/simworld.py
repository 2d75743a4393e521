"""Ground-truth motion for the table cells, plus IMU and relative-pose synthesis.

Every trajectory is analytic: positions are polynomial-plus-sinusoid signals and
orientations are yaw-pitch-roll compositions of such signals, so velocities,
accelerations, body rates and angular accelerations are exact.

Column tags constrain the reference IMU, row tags constrain the target relative
to it. Relative quantities are expressed in the reference IMU frame, whose
z-axis is aligned with the anchor vector ``alpha`` at ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dualimu.dynamics import GRAVITY, ImuSample
from dualimu.geom import quat_exp, quat_multiply, rot_to_quat, quat_to_rot, skew
from dualimu.state import SystemState
from dualimu.update import RelOrientationMeas, RelPositionMeas

COLUMNS = ("I", "II", "III", "IV", "V", "VI", "VII")
ROWS = ("A", "B", "C", "D", "E", "F", "G", "H", "J", "K", "L", "M", "N", "O", "P", "Q", "R", "S")

# Row tag -> (relative position class, relative velocity class, relative rate class)
ROW_CLASSES = {
    row: (p, v, w)
    for row, (p, v, w) in zip(
        ROWS,
        [
            (p, v, w)
            for p, v in (("zero", "zero"), ("z", "zero"), ("z", "z"), ("free", "zero"), ("free", "z"), ("free", "free"))
            for w in ("zero", "z", "free")
        ],
    )
}

SIM_CELLS = ("I-S", "V-M", "V-K", "III-K", "I-K", "VII-S")

_E = np.eye(3)


@dataclass(frozen=True)
class MotionCell:
    column: str
    row: str

    def __post_init__(self):
        if self.column not in COLUMNS:
            raise ValueError(f"unknown column tag {self.column!r}; expected one of {COLUMNS}")
        if self.row not in ROWS:
            raise ValueError(f"unknown row tag {self.row!r}; expected one of {ROWS}")

    @classmethod
    def parse(cls, tag: str) -> "MotionCell":
        try:
            col, row = tag.strip().upper().split("-")
        except ValueError:
            raise ValueError(f"cell tag must look like 'I-K', got {tag!r}") from None
        return cls(col, row)

    @property
    def tag(self) -> str:
        return f"{self.column}-{self.row}"


@dataclass(frozen=True)
class Signal:
    """``c0 + c1 t + c2 t² + Σ a sin(2π f t + φ)`` with analytic derivatives."""

    poly: tuple = (0.0, 0.0, 0.0)
    sines: tuple = ()  # (amplitude, frequency_hz, phase)

    def eval(self, t: float):
        c0, c1, c2 = self.poly
        x = c0 + c1 * t + c2 * t * t
        dx = c1 + 2.0 * c2 * t
        ddx = 2.0 * c2
        for a, f, ph in self.sines:
            w = 2.0 * np.pi * f
            s, c = np.sin(w * t + ph), np.cos(w * t + ph)
            x += a * s
            dx += a * w * c
            ddx -= a * w * w * s
        return x, dx, ddx

    def zeroed(self) -> "Signal":
        """Same signal shifted so that its value at ``t = 0`` is zero."""
        x0, _, _ = self.eval(0.0)
        c0, c1, c2 = self.poly
        return Signal((c0 - x0, c1, c2), self.sines)

    @property
    def is_constant(self) -> bool:
        return self.poly[1] == 0.0 and self.poly[2] == 0.0 and all(a == 0.0 for a, _, _ in self.sines)


ZERO = Signal()


def constant(c: float) -> Signal:
    return Signal((float(c), 0.0, 0.0))


def multisine(rng: np.random.Generator, amplitude: float, bands=(0.11, 0.23, 0.41), offset: float = 0.0) -> Signal:
    """Three incommensurate sinusoids with seeded frequency jitter and phases."""
    if amplitude == 0.0:
        return constant(offset)
    sines = []
    for k, f in enumerate(bands):
        freq = f * (1.0 + 0.15 * rng.uniform(-1.0, 1.0))
        sines.append((amplitude * (0.6 ** k), freq, rng.uniform(0.0, 2.0 * np.pi)))
    return Signal((offset, 0.0, 0.0), tuple(sines))


@dataclass(frozen=True)
class VectorSignal:
    """``basis @ [s0, s1, s2] + origin``; a constant basis fixes the motion directions."""

    signals: tuple = (ZERO, ZERO, ZERO)
    basis: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def eval(self, t: float):
        vals = np.array([s.eval(t) for s in self.signals])  # 3x3: rows components, cols derivative order
        return (
            self.origin + self.basis @ vals[:, 0],
            self.basis @ vals[:, 1],
            self.basis @ vals[:, 2],
        )


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class RotationSignal:
    """``pre @ Rz(yaw) Ry(pitch) Rx(roll) @ post`` with analytic rates."""

    yaw: Signal = ZERO
    pitch: Signal = ZERO
    roll: Signal = ZERO
    pre: np.ndarray = field(default_factory=lambda: np.eye(3))
    post: np.ndarray = field(default_factory=lambda: np.eye(3))

    def eval(self, t: float):
        """Return ``(R, spatial rate, spatial accel, body rate, body accel)``."""
        psi, dpsi, ddpsi = self.yaw.eval(t)
        th, dth, ddth = self.pitch.eval(t)
        ph, dph, ddph = self.roll.eval(t)
        Rz = _rz(psi)
        Rzy = Rz @ _ry(th)
        E = Rzy @ _rx(ph)
        ez = _E[2]
        ay = Rz @ _E[1]
        ax = Rzy @ _E[0]
        w_partial = dpsi * ez + dth * ay
        ws = w_partial + dph * ax
        wsd = (
            ddpsi * ez
            + ddth * ay
            + dth * np.cross(dpsi * ez, ay)
            + ddph * ax
            + dph * np.cross(w_partial, ax)
        )
        wb = E.T @ ws
        wbd = E.T @ wsd
        R = self.pre @ E @ self.post
        return (
            R,
            self.pre @ ws,
            self.pre @ wsd,
            self.post.T @ wb,
            self.post.T @ wbd,
        )


@dataclass(frozen=True)
class TrajectorySample:
    """Global kinematics of one agent at time ``t``; rates are in the body frame."""

    t: float
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    a: np.ndarray
    omega: np.ndarray
    omega_dot: np.ndarray

    @property
    def C(self) -> np.ndarray:
        return quat_to_rot(self.q)


@dataclass(frozen=True)
class ProfileParams:
    """Amplitudes and geometry knobs for profile generation (SI units)."""

    duration: float = 10.0
    ref_pos_amp: float = 0.5
    ref_rot_amp: float = 0.6
    rel_pos_amp: float = 0.3
    rel_rot_amp: float = 0.5
    rel_offset: tuple = (0.4, -0.3, 0.25)
    ref_velocity: tuple = (0.0, 0.0, 0.0)
    ref_accel: tuple = (0.0, 0.0, 0.0)
    line_direction: tuple = (1.0, 0.0, 0.0)
    incline: float = 0.35
    bands: tuple = (0.11, 0.23, 0.41)

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        for name in ("ref_pos_amp", "ref_rot_amp", "rel_pos_amp", "rel_rot_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class MotionProfile:
    cell: MotionCell
    duration: float
    seed: int
    ref_position: VectorSignal
    ref_rotation: RotationSignal
    rel_position: VectorSignal
    rel_rotation: RotationSignal
    alpha: np.ndarray  # anchor vector in the reference frame at t = 0
    beta1: np.ndarray
    beta2: np.ndarray
    xi: np.ndarray | None  # constant direction of the relative rate, when it has one


def _orthonormal_from_z(n: np.ndarray) -> np.ndarray:
    """Rotation whose third column is the unit vector ``n``."""
    n = n / np.linalg.norm(n)
    helper = _E[0] if abs(n[0]) < 0.9 else _E[1]
    x = np.cross(helper, n)
    x /= np.linalg.norm(x)
    y = np.cross(n, x)
    return np.column_stack((x, y, n))


def _random_rotation(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return quat_to_rot(quat_exp(rng.normal(size=3) * scale))


def make_profile(cell: MotionCell | str, params: ProfileParams | None = None, seed: int = 0) -> MotionProfile:
    """Analytic two-agent trajectory satisfying the constraints of ``cell``."""
    if isinstance(cell, str):
        cell = MotionCell.parse(cell)
    params = params or ProfileParams()
    rng = np.random.default_rng(seed)
    yaw0 = rng.uniform(-np.pi, np.pi)
    bands = params.bands

    def ms(amp, offset=0.0):
        return multisine(rng, amp, bands, offset)

    col = cell.column
    origin = np.array([1.0, -2.0, 1.5])
    up = -GRAVITY / np.linalg.norm(GRAVITY)

    if col == "I":
        a0 = np.asarray(params.ref_accel, dtype=float)
        v0 = np.asarray(params.ref_velocity, dtype=float)
        sigs = tuple(Signal((0.0, v0[i], 0.5 * a0[i])) for i in range(3))
        ref_pos = VectorSignal(sigs, np.eye(3), origin)
        # z-axis of the reference frame along the constant specific force
        ref_rot = RotationSignal(pre=_orthonormal_from_z(a0 - GRAVITY) @ _rz(yaw0))
    elif col in ("II", "III"):
        d = up if col == "II" else np.asarray(params.line_direction, dtype=float)
        d = d / np.linalg.norm(d)
        if col == "III" and np.linalg.norm(np.cross(d, up)) < 1e-6:
            raise ValueError("column III needs a non-vertical line direction")
        ref_pos = VectorSignal((ms(params.ref_pos_amp), ZERO, ZERO), np.column_stack((d, _E[1], _E[2])), origin)
        ref_rot = RotationSignal(pre=_rz(yaw0))
    elif col == "IV":
        ref_pos = VectorSignal(origin=origin)
        ref_rot = RotationSignal(yaw=ms(params.ref_rot_amp).zeroed(), pre=_rz(yaw0))
    elif col == "V":
        ref_pos = VectorSignal((ms(params.ref_pos_amp), ms(params.ref_pos_amp), ZERO), np.eye(3), origin)
        ref_rot = RotationSignal(yaw=ms(params.ref_rot_amp).zeroed(), pre=_rz(yaw0))
    elif col == "VI":
        A = _orthonormal_from_z(_rx(params.incline) @ up)
        ref_pos = VectorSignal((ms(params.ref_pos_amp), ms(params.ref_pos_amp), ZERO), A, origin)
        ref_rot = RotationSignal(yaw=ms(params.ref_rot_amp).zeroed(), pre=A, post=A.T @ _rz(yaw0))
    else:  # VII
        ref_pos = VectorSignal(
            (ms(params.ref_pos_amp), ms(params.ref_pos_amp), ms(params.ref_pos_amp)), np.eye(3), origin
        )
        ref_rot = RotationSignal(
            yaw=ms(params.ref_rot_amp).zeroed(),
            pitch=ms(0.6 * params.ref_rot_amp).zeroed(),
            roll=ms(0.6 * params.ref_rot_amp).zeroed(),
            pre=_rz(yaw0),
        )

    p_cls, v_cls, w_cls = ROW_CLASSES[cell.row]
    off = np.asarray(params.rel_offset, dtype=float)
    amp = params.rel_pos_amp
    if p_cls == "zero":
        rel_sigs = (ZERO, ZERO, ZERO)
    elif p_cls == "z":
        rel_sigs = (ZERO, ZERO, ms(amp, off[2]) if v_cls == "z" else constant(off[2]))
    else:
        if v_cls == "zero":
            rel_sigs = tuple(constant(c) for c in off)
        elif v_cls == "z":
            rel_sigs = (constant(off[0]), constant(off[1]), ms(amp, off[2]))
        else:
            rel_sigs = tuple(ms(amp, c) for c in off)
    rel_pos = VectorSignal(rel_sigs)

    rel0 = _random_rotation(rng, 0.8)
    if w_cls == "zero":
        rel_rot = RotationSignal(post=rel0)
    elif w_cls == "z":
        rel_rot = RotationSignal(yaw=ms(params.rel_rot_amp).zeroed(), post=rel0)
    else:
        rel_rot = RotationSignal(
            yaw=ms(params.rel_rot_amp).zeroed(),
            pitch=ms(0.7 * params.rel_rot_amp).zeroed(),
            roll=ms(0.7 * params.rel_rot_amp).zeroed(),
            post=rel0,
        )

    C10 = ref_rot.eval(0.0)[0]
    _, _, a10 = ref_pos.eval(0.0)
    alpha = C10.T @ (a10 - GRAVITY) if col == "I" else C10.T @ (-GRAVITY)
    if col == "III":
        beta1 = C10.T @ ref_pos.basis[:, 0]
        beta2 = np.cross(alpha, beta1)
        beta2 /= np.linalg.norm(beta2)
    else:
        frame = _orthonormal_from_z(alpha)
        beta1, beta2 = frame[:, 0], frame[:, 1]
    xi = _E[2].copy() if w_cls == "z" else None
    return MotionProfile(
        cell=cell,
        duration=params.duration,
        seed=seed,
        ref_position=ref_pos,
        ref_rotation=ref_rot,
        rel_position=rel_pos,
        rel_rotation=rel_rot,
        alpha=alpha,
        beta1=beta1,
        beta2=beta2,
        xi=xi,
    )


def sample_trajectory(profile: MotionProfile, t: float):
    """Exact global kinematics of both agents at time ``t``."""
    if not (-1e-12 <= t <= profile.duration + 1e-9):
        raise ValueError(f"t = {t} outside [0, {profile.duration}]")
    p1, v1, a1 = profile.ref_position.eval(t)
    C1, _, _, w1, w1d = profile.ref_rotation.eval(t)
    p, pd, pdd = profile.rel_position.eval(t)
    Crel, wr, wrd, _, _ = profile.rel_rotation.eval(t)

    p2 = p1 + C1 @ p
    v2 = v1 + C1 @ (pd + np.cross(w1, p))
    a2 = a1 + C1 @ (pdd + 2.0 * np.cross(w1, pd) + np.cross(w1d, p) + np.cross(w1, np.cross(w1, p)))
    C2 = C1 @ Crel
    w2 = Crel.T @ (w1 + wr)
    w2d = Crel.T @ (w1d + wrd - np.cross(wr, w1))
    s1 = TrajectorySample(t, p1, rot_to_quat(C1), v1, a1, w1, w1d)
    s2 = TrajectorySample(t, p2, rot_to_quat(C2), v2, a2, w2, w2d)
    return s1, s2


def specific_force(sample: TrajectorySample) -> np.ndarray:
    """Accelerometer reading without bias and noise: ``Cᵀ(a − g)``."""
    return sample.C.T @ (sample.a - GRAVITY)


def synthesize_imu(
    sample: TrajectorySample,
    bias_g: np.ndarray,
    bias_a: np.ndarray,
    sigma_g: float,
    sigma_a: float,
    dt: float,
    rng: np.random.Generator | None,
) -> ImuSample:
    """Sampled gyro and accel with bias and white noise of std ``σ/√dt``."""
    omega = sample.omega + bias_g
    accel = specific_force(sample) + bias_a
    if rng is not None and (sigma_g > 0 or sigma_a > 0):
        if not dt > 0:
            raise ValueError("dt must be positive when noise is enabled")
        scale = 1.0 / np.sqrt(dt)
        omega = omega + sigma_g * scale * rng.standard_normal(3)
        accel = accel + sigma_a * scale * rng.standard_normal(3)
    return ImuSample(sample.t, omega, accel)


def true_relative_state(s1: TrajectorySample, s2: TrajectorySample) -> SystemState:
    """Relative pose and velocity of agent 2 in the reference frame (biases zero)."""
    if abs(s1.t - s2.t) > 1e-12:
        raise ValueError(f"timestamp mismatch: {s1.t} vs {s2.t}")
    C1 = s1.C
    p = C1.T @ (s2.p - s1.p)
    v = -np.cross(s1.omega, p) + C1.T @ (s2.v - s1.v)
    q = quat_multiply(np.array([s1.q[0], *(-s1.q[1:])]), s2.q)
    return SystemState(p=p, v=v, q=q)


def synthesize_measurements(
    s1: TrajectorySample,
    s2: TrajectorySample,
    sigma_p: float,
    sigma_q: float,
    rng: np.random.Generator | None,
):
    """Noisy relative position and orientation at the samples' timestamp."""
    truth = true_relative_state(s1, s2)
    eta_p = np.zeros(3)
    eta_q = np.zeros(3)
    if rng is not None:
        eta_p = sigma_p * rng.standard_normal(3)
        eta_q = sigma_q * rng.standard_normal(3)
    dq = quat_multiply(np.concatenate(([1.0], 0.5 * eta_q)), truth.q)
    R_p = sigma_p**2 * np.eye(3)
    R_q = sigma_q**2 * np.eye(3)
    return RelPositionMeas(s1.t, truth.p + eta_p, R_p), RelOrientationMeas(s1.t, dq, R_q)


def true_inputs(profile: MotionProfile, t: float):
    """Noise- and bias-free IMU samples of both agents plus the reference angular acceleration."""
    s1, s2 = sample_trajectory(profile, t)
    imu1 = ImuSample(t, s1.omega, specific_force(s1))
    imu2 = ImuSample(t, s2.omega, specific_force(s2))
    return imu1, imu2, s1.omega_dot, (s1, s2)


# --- constraint checking -------------------------------------------------


def _parallel(a: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    return np.linalg.norm(np.cross(a, b / nb)) if nb > 0 else np.linalg.norm(a)


def constraint_residuals(profile: MotionProfile, times) -> dict:
    """Worst-case residual of every motion constraint over ``times``.

    A residual near zero means the constraint is active. Reference-IMU
    quantities are local (body frame); relative quantities are in the
    reference frame.
    """
    alpha = profile.alpha
    res: dict[str, float] = {}

    def upd(key, val):
        res[key] = max(res.get(key, 0.0), float(val))

    w_dir0 = None
    v_dir0 = None
    for t in times:
        s1, s2 = sample_trajectory(profile, t)
        C1 = s1.C
        w1 = s1.omega
        a1 = specific_force(s1)
        v1 = C1.T @ s1.v
        rel = true_relative_state(s1, s2)
        _, wr, _, _, _ = profile.rel_rotation.eval(t)
        upd("ref_omega_zero", np.linalg.norm(w1))
        upd("ref_omega_parallel_alpha", _parallel(w1, alpha))
        if np.linalg.norm(w1) > 1e-6:
            u = w1 / np.linalg.norm(w1)
            w_dir0 = u if w_dir0 is None else w_dir0
            upd("ref_omega_direction_constant", min(np.linalg.norm(u - w_dir0), np.linalg.norm(u + w_dir0)))
        upd("ref_accel_equals_alpha", np.linalg.norm(a1 - alpha))
        upd("ref_velocity_parallel_alpha", _parallel(v1, alpha))
        if np.linalg.norm(v1) > 1e-6:
            u = v1 / np.linalg.norm(v1)
            v_dir0 = u if v_dir0 is None else v_dir0
            upd("ref_velocity_direction_constant", min(np.linalg.norm(u - v_dir0), np.linalg.norm(u + v_dir0)))
        upd("ref_velocity_perp_omega", abs(np.dot(v1, w1)))
        upd("rel_p_zero", np.linalg.norm(rel.p))
        upd("rel_p_xy_zero", np.linalg.norm(rel.p[:2]))
        upd("rel_v_zero", np.linalg.norm(rel.v))
        upd("rel_v_xy_zero", np.linalg.norm(rel.v[:2]))
        upd("rel_omega_zero", np.linalg.norm(wr))
        upd("rel_omega_xy_zero", np.linalg.norm(wr[:2]))
    res.setdefault("ref_omega_direction_constant", 0.0)
    res.setdefault("ref_velocity_direction_constant", 0.0)
    return res


COLUMN_CONSTRAINTS = {
    "I": ("ref_omega_zero", "ref_accel_equals_alpha"),
    "II": ("ref_omega_zero", "ref_velocity_parallel_alpha"),
    "III": ("ref_omega_zero", "ref_velocity_direction_constant"),
    "IV": ("ref_omega_parallel_alpha", "ref_accel_equals_alpha"),
    "V": ("ref_omega_parallel_alpha", "ref_velocity_perp_omega"),
    "VI": ("ref_omega_direction_constant", "ref_velocity_perp_omega"),
    "VII": (),
}

_ROW_KEYS = {
    ("p", "zero"): "rel_p_zero",
    ("p", "z"): "rel_p_xy_zero",
    ("v", "zero"): "rel_v_zero",
    ("v", "z"): "rel_v_xy_zero",
    ("w", "zero"): "rel_omega_zero",
    ("w", "z"): "rel_omega_xy_zero",
}


def cell_constraints(cell: MotionCell) -> tuple:
    p_cls, v_cls, w_cls = ROW_CLASSES[cell.row]
    keys = list(COLUMN_CONSTRAINTS[cell.column])
    for kind, cls in (("p", p_cls), ("v", v_cls), ("w", w_cls)):
        if (kind, cls) in _ROW_KEYS:
            keys.append(_ROW_KEYS[(kind, cls)])
    return tuple(keys)


def check_constraints(profile: MotionProfile, times, tol: float = 1e-8) -> dict:
    """Residuals of the cell's defining constraints; raises if any exceeds ``tol``."""
    from dualimu.errors import InconsistentScenario

    res = constraint_residuals(profile, times)
    out = {k: res[k] for k in cell_constraints(profile.cell)}
    bad = {k: v for k, v in out.items() if v > tol}
    if bad:
        raise InconsistentScenario(f"cell {profile.cell.tag} constraints violated: {bad}")
    return out


def active_constraints(profile: MotionProfile, times, tol: float = 1e-8) -> list:
    """Names of every constraint that holds over ``times``."""
    return sorted(k for k, v in constraint_residuals(profile, times).items() if v <= tol)
