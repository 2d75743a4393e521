"""Observability analysis.

Two routes are provided:

* the linearized observability matrix ``M = [H_k Φ(t_k, t_1)]`` stacked over a
  trajectory, its numeric null space, and the analytic unobservable directions
  predicted for each motion cell;
* the gradient stack of a subset of Lie derivatives of the nonlinear
  input-affine model, whose full column rank shows local weak observability
  under general motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import subspace_angles

from dualimu.dynamics import jacobian_arrays
from dualimu.errors import InconsistentScenario
from dualimu.geom import quat_left, quat_right, quat_to_rot, rotvec_jacobian, skew
from dualimu.propagation import EstimateRecord, closed_form_series, phi_first_order
from dualimu.simworld import COLUMNS, MotionCell, MotionProfile, check_constraints, true_inputs, true_relative_state
from dualimu.state import ERROR_DIM, IDX

MODES = ("dp", "dpdq")
DEFAULT_RANK_TOL = 1e-10

# --- unobservable-direction tables ---------------------------------------

# Column groups share entries in the dp+dq table.
_G1, _G2 = ("I", "II", "III"), ("IV", "V")


def _row(g1, g2, vi, vii):
    out = {c: g1 for c in _G1}
    out.update({c: g2 for c in _G2})
    out["VI"] = vi
    out["VII"] = vii
    return out


_BOTH = ("ba+", "bg+")
_BOTH_W = ("ba+w", "bg+w")
_NONE = ()

TABLE_DPDQ = {
    "A": _row(_BOTH, _BOTH, _BOTH, _BOTH),
    "B": _row(_BOTH_W, _BOTH_W, _BOTH_W, _BOTH_W),
    "C": _row(_NONE, _NONE, _NONE, _NONE),
    "D": _row(_BOTH, ("ba+", "bg+a"), ("ba+",), ("ba+",)),
    "E": _row(_BOTH_W, _BOTH_W, ("ba+w",), ("ba+w",)),
    "F": _row(_NONE, _NONE, _NONE, _NONE),
    "G": _row(("ba+", "bg+a"), ("ba+", "bg+a"), ("ba+",), ("ba+",)),
    "H": _row(_BOTH_W, _BOTH_W, ("ba+w",), ("ba+w",)),
    "J": _row(_NONE, _NONE, _NONE, _NONE),
    "K": _row(_BOTH, ("ba+",), ("ba+",), ("ba+",)),
    "L": _row(_BOTH_W, ("ba+w",), ("ba+w",), ("ba+w",)),
    "M": _row(_NONE, _NONE, _NONE, _NONE),
    "N": _row(("ba+", "bg+a"), ("ba+",), ("ba+",), ("ba+",)),
    "O": _row(_BOTH_W, ("ba+w",), ("ba+w",), ("ba+w",)),
    "P": _row(_NONE, _NONE, _NONE, _NONE),
    "Q": _row(("ba+",), ("ba+",), ("ba+",), ("ba+",)),
    "R": _row(("ba+w",), ("ba+w",), ("ba+w",), ("ba+w",)),
    "S": _row(_NONE, _NONE, _NONE, _NONE),
}

_TH_ALL = ("theta_a", "theta_b1", "theta_b2", "bg1_a")
_TH_A = ("theta_a", "bg1_a")


def _dp_row(i, ii, iii, iv):
    return {"I": i, "II": ii, "III": iii, "IV": iv, "V": (), "VI": (), "VII": ()}


# Additional directions when only relative position is measured.
TABLE_DP_EXTRA = {}
for _r in "ABCDEF":
    TABLE_DP_EXTRA[_r] = _dp_row(_TH_ALL, _TH_A, ("theta_b1",), _TH_A)
for _r in "GHJ":
    TABLE_DP_EXTRA[_r] = _dp_row(_TH_A, _TH_A, (), _TH_A)
for _r in "KLM":
    TABLE_DP_EXTRA[_r] = _dp_row(_TH_ALL, _TH_A, ("theta_b1",), ())
for _r in "NOP":
    TABLE_DP_EXTRA[_r] = _dp_row(_TH_A, _TH_A, (), ())
for _r in "QRS":
    TABLE_DP_EXTRA[_r] = _dp_row((), (), (), ())

DISPLAY_NAMES = {
    "ba+": "b_a+",
    "bg+": "b_g+",
    "ba-": "b_a-",
    "bg-": "b_g-",
    "ba+w": "b_a+^w",
    "bg+w": "b_g+^w",
    "bg+a": "b_g+^a",
    "theta_a": "theta^a",
    "theta_b1": "theta^b1",
    "theta_b2": "theta^b2",
    "bg1_a": "b_g1^a",
}

LABEL_DIMS = {
    "ba+": 3,
    "bg+": 3,
    "ba+w": 1,
    "bg+w": 1,
    "bg+a": 1,
    "theta_a": 1,
    "theta_b1": 1,
    "theta_b2": 1,
    "bg1_a": 1,
}


def _check_mode(mode: str) -> str:
    mode = mode.replace("+", "").lower()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def expected_labels(cell: MotionCell, mode: str) -> tuple:
    """Direction labels predicted unobservable for ``cell`` under ``mode``."""
    mode = _check_mode(mode)
    labels = tuple(TABLE_DPDQ[cell.row][cell.column])
    if mode == "dp":
        labels += tuple(TABLE_DP_EXTRA[cell.row][cell.column])
    return labels


def expected_null_dim(cell: MotionCell, mode: str) -> int:
    return sum(LABEL_DIMS[l] for l in expected_labels(cell, mode))


# --- analytic directions -------------------------------------------------


@dataclass(frozen=True)
class DirectionAnchors:
    """Quantities the direction formulas depend on."""

    q0: np.ndarray  # relative orientation at t0
    alpha: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    xi: np.ndarray | None = None


@dataclass(frozen=True)
class CandidateDirections:
    labels: tuple  # one label per column
    basis: np.ndarray  # 21 x n, unit columns
    anchors: DirectionAnchors


def _unit_cols(B: np.ndarray) -> np.ndarray:
    return B / np.linalg.norm(B, axis=0, keepdims=True)


def direction_block(label: str, anchors: DirectionAnchors, C_t: np.ndarray | None = None) -> np.ndarray:
    """21 x k matrix of one labeled direction family (columns unit-normalized).

    ``C_t`` is the current relative rotation used by the relative-bias families
    ``ba-`` and ``bg-``; it defaults to the anchor rotation.
    """
    C0 = quat_to_rot(anchors.q0)
    I3 = np.eye(3)
    a = anchors.alpha
    B = np.zeros((ERROR_DIM, 3))
    if label in ("ba+", "bg+", "ba-", "bg-"):
        kind = label[:2]
        first, second = (IDX["ba1"], IDX["ba2"]) if kind == "ba" else (IDX["bg1"], IDX["bg2"])
        if label.endswith("+"):
            B[first] = I3
            B[second] = C0.T
        else:
            B[first] = -I3
            B[second] = (C0 if C_t is None else C_t).T
        return _unit_cols(B)
    if label in ("ba+w", "bg+w"):
        if anchors.xi is None:
            raise InconsistentScenario(f"{label} needs a constant relative-rate direction")
        return _unit_cols(direction_block(label[:3], anchors) @ anchors.xi[:, None])
    if label == "bg+a":
        return _unit_cols(direction_block("bg+", anchors) @ a[:, None])
    v = np.zeros(ERROR_DIM)
    if label == "theta_a":
        v[IDX["theta"]] = C0.T @ a
    elif label in ("theta_b1", "theta_b2"):
        beta = anchors.beta1 if label == "theta_b1" else anchors.beta2
        v[IDX["theta"]] = C0.T @ beta
        v[IDX["ba1"]] = np.cross(a, beta)
    elif label == "bg1_a":
        v[IDX["bg1"]] = a
    else:
        raise ValueError(f"unknown direction label {label!r}")
    return _unit_cols(v[:, None])


def anchors_from_profile(profile: MotionProfile) -> DirectionAnchors:
    s1, s2 = true_inputs(profile, 0.0)[3]
    q0 = true_relative_state(s1, s2).q
    return DirectionAnchors(q0=q0, alpha=profile.alpha, beta1=profile.beta1, beta2=profile.beta2, xi=profile.xi)


def candidate_directions(
    profile: MotionProfile, mode: str, *, check_times: Sequence[float] | None = None, tol: float = 1e-8
) -> CandidateDirections:
    """Predicted unobservable directions of the profile's cell.

    The profile is first checked against the cell constraints; a violation
    raises :class:`InconsistentScenario`.
    """
    times = np.linspace(0.0, profile.duration, 51) if check_times is None else check_times
    check_constraints(profile, times, tol)
    anchors = anchors_from_profile(profile)
    labels: list[str] = []
    blocks = []
    for lab in expected_labels(profile.cell, mode):
        blk = direction_block(lab, anchors)
        blocks.append(blk)
        labels.extend([lab] * blk.shape[1])
    basis = np.hstack(blocks) if blocks else np.zeros((ERROR_DIM, 0))
    return CandidateDirections(tuple(labels), basis, anchors)


# --- linear observability matrix -----------------------------------------


@dataclass(frozen=True)
class ObservabilityMatrix:
    M: np.ndarray
    steps: int
    mode: str


def measurement_jacobian(q_hat: np.ndarray, mode: str) -> np.ndarray:
    mode = _check_mode(mode)
    H = np.zeros((6 if mode == "dpdq" else 3, ERROR_DIM))
    H[0:3, IDX["p"]] = np.eye(3)
    if mode == "dpdq":
        H[3:6, IDX["theta"]] = quat_to_rot(q_hat)
    return H


def build_linear_M(record: Sequence[tuple], mode: str) -> ObservabilityMatrix:
    """Stack ``H_k Φ_{k,1}`` in time order.

    Each record entry is ``(H_k, Phi_k1)``; with ``mode='dp'`` only the first
    three rows (relative position) of every ``H_k`` are kept.
    """
    mode = _check_mode(mode)
    if len(record) == 0:
        raise ValueError("empty observability record")
    rows = []
    for H, Phi in record:
        H = np.asarray(H, dtype=float)
        if mode == "dp":
            H = H[:3]
        rows.append(H @ Phi)
    return ObservabilityMatrix(np.vstack(rows), len(record), mode)


def numeric_null_space(M, rel_tol: float = DEFAULT_RANK_TOL):
    """Orthonormal null-space basis and the singular spectrum.

    Singular values at or below ``rel_tol * σ_max`` count as zero.
    """
    A = M.M if isinstance(M, ObservabilityMatrix) else np.asarray(M, dtype=float)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    n = A.shape[1]
    sv = np.zeros(n)
    sv[: s.size] = s
    smax = sv[0] if sv.size else 0.0
    if smax == 0.0:
        return np.eye(n), sv
    null = sv <= rel_tol * smax
    return Vt[null].T.copy(), sv


def verify_direction(M, n: np.ndarray) -> float:
    """Normalized residual ``|M n| / (σ_max |n|)``."""
    A = M.M if isinstance(M, ObservabilityMatrix) else np.asarray(M, dtype=float)
    n = np.asarray(n, dtype=float)
    nn = np.linalg.norm(n)
    if nn == 0:
        raise ValueError("direction must be non-zero")
    smax = np.linalg.norm(A, 2)
    return float(np.linalg.norm(A @ n) / (smax * nn))


def max_principal_angle(A: np.ndarray, B: np.ndarray) -> float:
    """Largest principal angle between two column spans (0 when both empty)."""
    if A.shape[1] == 0 and B.shape[1] == 0:
        return 0.0
    if A.shape[1] != B.shape[1]:
        return float(np.pi / 2)
    return float(np.max(subspace_angles(A, B)))


def observability_record(
    profile: MotionProfile,
    *,
    imu_rate: float = 200.0,
    meas_rate: float = 20.0,
    steps: int | None = None,
    backend: str = "first_order",
):
    """``(H_k, Φ_{k,1})`` pairs along the noise-free true trajectory.

    The linearization point is the exact relative state and the exact IMU
    inputs, so the analytic null directions hold to rounding error. ``steps``
    limits the number of IMU intervals (default: the whole profile).
    """
    dt = 1.0 / imu_rate
    n_int = int(round(profile.duration * imu_rate)) if steps is None else int(steps)
    if n_int < 0 or n_int * dt > profile.duration + 1e-9:
        raise ValueError("requested horizon exceeds the profile duration")
    every = imu_rate / meas_rate
    if abs(every - round(every)) > 1e-9:
        raise ValueError("imu_rate must be an integer multiple of meas_rate")
    every = int(round(every))
    times = np.arange(n_int + 1) * dt

    states, epochs = [], []
    for t in times:
        imu1, imu2, w1dot, (s1, s2) = true_inputs(profile, t)
        states.append(true_relative_state(s1, s2))
        epochs.append((imu1, imu2, w1dot))

    if backend == "first_order":
        Fs = [
            jacobian_arrays(x.to_vector(), e[0].omega_m, e[0].accel_m, e[1].omega_m, e[1].accel_m, e[2])[0]
            for x, e in zip(states, epochs)
        ]
        phis = [np.eye(ERROR_DIM)]
        for k in range(n_int):
            phis.append(phi_first_order(0.5 * (Fs[k] + Fs[k + 1]), dt) @ phis[-1])
    elif backend == "closed_form":
        recs = [EstimateRecord(t, x, e[0], e[1]) for t, x, e in zip(times, states, epochs)]
        phis = list(closed_form_series(recs))
    else:
        raise ValueError(f"unknown transition backend {backend!r}")

    record = []
    for k in range(0, n_int + 1, every):
        record.append((measurement_jacobian(states[k].q, "dpdq"), phis[k]))
    return record


@dataclass
class ObservabilityReport:
    cell: str
    mode: str
    steps: int
    rank_tol: float
    singular_values: np.ndarray
    null_dim: int
    expected_dim: int
    direction_residuals: list  # (label, residual, passed)
    observable_residuals: list  # (label, residual, passed)
    max_angle: float
    passed: bool = field(default=False)

    def lines(self) -> list:
        out = [
            f"cell={self.cell}",
            f"mode={self.mode}",
            f"steps={self.steps}",
            f"rank_tol={self.rank_tol:.3e}",
            f"null_dim={self.null_dim}",
            f"expected_null_dim={self.expected_dim}",
            f"max_principal_angle={self.max_angle:.3e}",
            "singular_values=" + ",".join(f"{s:.6e}" for s in self.singular_values),
            "direction,residual,result",
        ]
        for lab, res, ok in self.direction_residuals:
            out.append(f"{lab},{res:.3e},{'PASS' if ok else 'FAIL'}")
        out.append("observable_direction,residual,result")
        for lab, res, ok in self.observable_residuals:
            out.append(f"{lab},{res:.3e},{'PASS' if ok else 'FAIL'}")
        out.append(f"result={'PASS' if self.passed else 'FAIL'}")
        return out

    def summary(self) -> str:
        counts: dict[str, list] = {}
        for lab, _, ok in self.direction_residuals:
            counts.setdefault(lab, []).append(ok)
        parts = [f"{DISPLAY_NAMES[lab]} {'PASS' if all(v) else 'FAIL'}×{len(v)}" for lab, v in counts.items()]
        return f"null_dim={self.null_dim}" + (", directions " + ", ".join(parts) if parts else "")


def analyze(
    profile: MotionProfile,
    mode: str,
    *,
    rank_tol: float = DEFAULT_RANK_TOL,
    imu_rate: float = 200.0,
    meas_rate: float = 20.0,
    steps: int | None = None,
    residual_tol: float = 1e-6,
    angle_tol: float = 1e-4,
    observable_tol: float = 1e-3,
    backend: str = "first_order",
) -> ObservabilityReport:
    """Compare the numeric null space of ``M`` with the cell's predicted directions."""
    mode = _check_mode(mode)
    cand = candidate_directions(profile, mode)
    record = observability_record(profile, imu_rate=imu_rate, meas_rate=meas_rate, steps=steps, backend=backend)
    M = build_linear_M(record, mode)
    null, sv = numeric_null_space(M, rank_tol)
    residuals = [
        (lab, res, res < residual_tol)
        for lab, res in ((lab, verify_direction(M, cand.basis[:, i])) for i, lab in enumerate(cand.labels))
    ]
    angle = max_principal_angle(null, cand.basis)

    # Relative-bias directions are predicted observable; only their parts
    # outside the predicted null span are meaningful to test.
    obs_res = []
    Q = np.linalg.qr(cand.basis)[0] if cand.basis.shape[1] else np.zeros((ERROR_DIM, 0))
    for lab in ("ba-", "bg-"):
        blk = direction_block(lab, cand.anchors)
        for i, axis in enumerate("xyz"):
            d = blk[:, i] - Q @ (Q.T @ blk[:, i])
            if np.linalg.norm(d) < 1e-8:
                continue
            r = verify_direction(M, d)
            obs_res.append((f"{lab}_{axis}", r, r > observable_tol))

    expected = cand.basis.shape[1]
    null_dim = null.shape[1]
    passed = (
        null_dim == expected
        and all(ok for _, _, ok in residuals)
        and angle < angle_tol
        and all(ok for _, _, ok in obs_res)
    )
    return ObservabilityReport(
        cell=profile.cell.tag,
        mode=mode,
        steps=M.steps,
        rank_tol=rank_tol,
        singular_values=sv,
        null_dim=null_dim,
        expected_dim=expected,
        direction_residuals=residuals,
        observable_residuals=obs_res,
        max_angle=angle,
        passed=passed,
    )


# --- nonlinear (Lie-derivative) rank ---------------------------------------

XI_ROW_LABELS = (
    ("L0 h1", 3),
    ("L1 f0 h1", 3),
    ("L2 f0 f41 h1", 3),
    ("L2 f0 f42 h1", 3),
    ("L2 f0 f43 h1", 3),
    ("L0 h0", 1),
    ("L3 f0 f0 f31 h1", 3),
    ("L3 f0 f0 f32 h1", 3),
    ("L3 f0 f41 f0 h1", 3),
    ("L3 f0 f42 f0 h1", 3),
    ("L3 f0 f43 f0 h1", 3),
    ("L1 f0 h0", 1),
    ("L2 f0 f0 h1", 3),
    ("L3 f0 f0 f21 h1", 3),
    ("L3 f0 f0 f22 h1", 3),
)

# Column slices of the transformed 22-state [p, v', q, bg1, bg2, ba1, ba2].
XP = slice(0, 3)
XV = slice(3, 6)
XQ = slice(6, 10)
XBG1 = slice(10, 13)
XBG2 = slice(13, 16)
XBA1 = slice(16, 19)
XBA2 = slice(19, 22)


def transform_state(x, omega1: np.ndarray) -> np.ndarray:
    """Packed state with velocity replaced by ``v' = v + ω1 × p``."""
    vec = x.to_vector().copy()
    vec[XV] = x.v + np.cross(omega1, x.p)
    return vec


def _pure(v: np.ndarray) -> np.ndarray:
    return np.concatenate(([0.0], v))


def input_affine_fields(xp: np.ndarray):
    """Drift ``f0`` and input fields ``f1..f4`` of the transformed model.

    Inputs multiply as ``ẋ' = f0 + f1 ω1m + f2 ω2m + f3 a1m + f4 a2m``.
    """
    p, v, q = xp[XP], xp[XV], xp[XQ]
    bg1, bg2, ba1, ba2 = xp[XBG1], xp[XBG2], xp[XBA1], xp[XBA2]
    C = quat_to_rot(q)
    L, R = quat_left(q), quat_right(q)
    f0 = np.zeros(22)
    f0[XP] = v + np.cross(bg1, p)
    f0[XV] = -C @ ba2 + ba1 + np.cross(bg1, v)
    f0[XQ] = -0.5 * (L @ _pure(bg2) - R @ _pure(bg1))
    f1 = np.zeros((22, 3))
    f1[XP] = skew(p)
    f1[XV] = skew(v)
    f1[XQ] = -0.5 * R[:, 1:]
    f2 = np.zeros((22, 3))
    f2[XQ] = 0.5 * L[:, 1:]
    f3 = np.zeros((22, 3))
    f3[XV] = -np.eye(3)
    f4 = np.zeros((22, 3))
    f4[XV] = C
    return f0, f1, f2, f3, f4


def lambda_block(q: np.ndarray, axis: int) -> np.ndarray:
    """``∂(C(q) e_axis)/∂q``."""
    return rotvec_jacobian(q, np.eye(3)[axis])


def _p_block(axis: int) -> np.ndarray:
    # P1 and P2 equal -[e_x×] and -[e_y×]
    return -skew(np.eye(3)[axis])


@dataclass(frozen=True)
class NonlinearGradientStack:
    Xi: np.ndarray  # 41 x 22
    row_labels: tuple
    Lambda: tuple  # (Λ1, Λ2, Λ3)
    S: np.ndarray
    P: tuple  # (P1, P2)

    def block(self, label: str) -> np.ndarray:
        start = 0
        for lab, n in XI_ROW_LABELS:
            if lab == label:
                return self.Xi[start : start + n]
            start += n
        raise KeyError(label)


def nonlinear_xi(xp: np.ndarray) -> NonlinearGradientStack:
    """Gradients of the selected Lie derivatives at a transformed state.

    The Lie derivatives of this subset do not depend on the inputs, so only
    the state is needed.
    """
    xp = np.asarray(xp, dtype=float)
    if xp.shape != (22,):
        raise ValueError(f"expected a 22-vector, got shape {xp.shape}")
    q = xp[XQ]
    nq = np.linalg.norm(q)
    if not np.isfinite(nq) or abs(nq - 1.0) > 1e-6:
        raise ValueError(f"quaternion part must be unit norm, got |q| = {nq}")
    p, v = xp[XP], xp[XV]
    bg1, bg2, ba2 = xp[XBG1], xp[XBG2], xp[XBA2]
    C = quat_to_rot(q)
    L, R = quat_left(q), quat_right(q)
    I3 = np.eye(3)

    fq = -0.5 * (L @ _pure(bg2) - R @ _pure(bg1))
    dfq_dq = -0.5 * (quat_right(_pure(bg2)) - quat_left(_pure(bg1)))
    dfq_dbg1 = 0.5 * R[:, 1:]
    dfq_dbg2 = -0.5 * L[:, 1:]
    Lam = tuple(lambda_block(q, i) for i in range(3))
    S = 2.0 * q[None, :]
    P = (_p_block(0), _p_block(1))

    rows = []

    def new(n):
        r = np.zeros((n, 22))
        rows.append(r)
        return r

    r = new(3)
    r[:, XP] = I3
    r = new(3)
    r[:, XP] = skew(bg1)
    r[:, XV] = I3
    r[:, XBG1] = -skew(p)
    for i in range(3):
        new(3)[:, XQ] = Lam[i]
    new(1)[:, XQ] = S
    for i in range(2):
        new(3)[:, XBG1] = 2.0 * skew(I3[i])
    for i in range(3):
        r = new(3)
        r[:, XQ] = rotvec_jacobian(fq, I3[i]) + Lam[i] @ dfq_dq
        r[:, XBG1] = Lam[i] @ dfq_dbg1
        r[:, XBG2] = Lam[i] @ dfq_dbg2
    r = new(1)
    r[0, XQ] = 2.0 * fq + 2.0 * q @ dfq_dq
    r[0, XBG1] = 2.0 * q @ dfq_dbg1
    r[0, XBG2] = 2.0 * q @ dfq_dbg2
    r = new(3)
    Sb = skew(bg1)
    r[:, XP] = Sb @ Sb
    r[:, XV] = 2.0 * Sb
    r[:, XQ] = -rotvec_jacobian(q, ba2)
    r[:, XBG1] = -2.0 * skew(v) + np.dot(bg1, p) * I3 + np.outer(bg1, p) - 2.0 * np.outer(p, bg1)
    r[:, XBA1] = I3
    r[:, XBA2] = -C
    for i in range(2):
        r = new(3)
        r[:, XQ] = -rotvec_jacobian(q, skew(I3[i]) @ ba2)
        r[:, XBA2] = -C @ skew(I3[i])
    Xi = np.vstack(rows)
    return NonlinearGradientStack(Xi, tuple(lab for lab, _ in XI_ROW_LABELS), Lam, S, P)


def lie_derivative_values(xp: np.ndarray) -> np.ndarray:
    """Values of the selected Lie-derivative functions (same row order as Ξ)."""
    p, v, q = xp[XP], xp[XV], xp[XQ]
    bg1, bg2, ba1, ba2 = xp[XBG1], xp[XBG2], xp[XBA1], xp[XBA2]
    C = quat_to_rot(q)
    L, R = quat_left(q), quat_right(q)
    I3 = np.eye(3)
    fq = -0.5 * (L @ _pure(bg2) - R @ _pure(bg1))
    out = [p, v + np.cross(bg1, p)]
    out += [C @ I3[i] for i in range(3)]
    out.append([q @ q])
    out += [2.0 * np.cross(I3[i], bg1) for i in range(2)]
    out += [lambda_block(q, i) @ fq for i in range(3)]
    out.append([2.0 * q @ fq])
    out.append(2.0 * np.cross(bg1, v) + np.cross(bg1, np.cross(bg1, p)) - C @ ba2 + ba1)
    out += [-C @ skew(I3[i]) @ ba2 for i in range(2)]
    return np.concatenate([np.atleast_1d(np.asarray(o, dtype=float)) for o in out])


def numeric_rank(A: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def nonlinear_rank(xp: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    return numeric_rank(nonlinear_xi(xp).Xi, rel_tol)


def lambda_stack(q: np.ndarray) -> np.ndarray:
    """The 10x4 stack of Λ1, Λ2, Λ3 and S."""
    return np.vstack([lambda_block(q, i) for i in range(3)] + [2.0 * np.asarray(q)[None, :]])
