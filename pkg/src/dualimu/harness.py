"""Filter runs over simulated trajectories and Monte Carlo statistics."""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import chi2

from dualimu.dynamics import ImuSample, noise_covariance
from dualimu.errors import NumericalFailure, RunFailed
from dualimu.geom import quat_conj, quat_product, quat_to_rot
from dualimu.obs import DirectionAnchors, anchors_from_profile, direction_block
from dualimu.propagation import ImuEpoch, ekf_predict
from dualimu.simworld import (
    MotionProfile,
    TrajectorySample,
    synthesize_imu,
    synthesize_measurements,
    true_inputs,
    true_relative_state,
)
from dualimu.state import (
    DEFAULT_P0_DIAG,
    ERROR_BLOCKS,
    ERROR_DIM,
    ERROR_LABELS,
    IDX,
    NoiseParams,
    SystemState,
    initial_covariance,
    state_difference,
    state_retract,
)
from dualimu.update import (
    RelOrientationMeas,
    RelPositionMeas,
    ekf_update,
    residual_and_H_dp,
    residual_and_H_dq,
)

MODES = ("dp", "dpdq")


def normalize_mode(mode: str) -> str:
    m = mode.replace("+", "").lower()
    if m not in MODES:
        raise ValueError(f"mode must be 'dp' or 'dpdq', got {mode!r}")
    return m


@dataclass(frozen=True)
class FilterSettings:
    imu_rate: float = 200.0
    meas_rate: float = 20.0
    sigma_p: float = 0.01
    sigma_q: float = 0.01
    p0_diag: tuple = DEFAULT_P0_DIAG
    gyro1_inflation: float = 1.0
    gate: float | None = None
    second_order: bool = True

    def __post_init__(self):
        if not (self.imu_rate > 0 and self.meas_rate > 0):
            raise ValueError("rates must be positive")
        ratio = self.imu_rate / self.meas_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("imu_rate must be an integer multiple of meas_rate")
        if self.sigma_p < 0 or self.sigma_q < 0:
            raise ValueError("measurement noise must be non-negative")

    @property
    def dt(self) -> float:
        return 1.0 / self.imu_rate

    @property
    def meas_every(self) -> int:
        return int(round(self.imu_rate / self.meas_rate))


@dataclass(frozen=True)
class TruthHistory:
    """Noise-free samples of a profile on the IMU grid."""

    times: np.ndarray
    samples: tuple  # (s1, s2) pairs
    states: tuple  # true relative SystemState (zero biases)
    omega1_dot: np.ndarray  # (n, 3)

    def __len__(self) -> int:
        return self.times.size


def simulate_truth(profile: MotionProfile, imu_rate: float) -> TruthHistory:
    n = int(round(profile.duration * imu_rate))
    times = np.arange(n + 1) / imu_rate
    samples, states, wdot = [], [], []
    for t in times:
        _, _, w1d, (s1, s2) = true_inputs(profile, float(t))
        samples.append((s1, s2))
        states.append(true_relative_state(s1, s2))
        wdot.append(w1d)
    return TruthHistory(times, tuple(samples), tuple(states), np.array(wdot))


@dataclass
class RunHistory:
    """Per-step truth, estimate and covariance of one filter run."""

    times: np.ndarray
    truth: np.ndarray  # (n, 22) packed states
    estimate: np.ndarray  # (n, 22)
    P: np.ndarray  # (n, 21, 21)
    innovations: list = field(default_factory=list)  # (t, kind, nis, accepted, step)
    seed: int | None = None
    sensor_log: "SensorLog | None" = None
    initial_estimate: SystemState | None = None

    def errors(self) -> np.ndarray:
        """Per-step error states ``truth ⊟ estimate`` (n, 21)."""
        return batch_errors(self.truth, self.estimate)

    def nees(self, errors: np.ndarray | None = None) -> np.ndarray:
        e = self.errors() if errors is None else errors
        return np.einsum("ki,ki->k", e, np.linalg.solve(self.P, e[..., None])[..., 0])


def batch_errors(truth: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """Row-wise :func:`state_difference` for packed (n, 22) histories."""
    truth = np.atleast_2d(truth)
    estimate = np.atleast_2d(estimate)
    dq = quat_product(quat_conj(estimate[:, 6:10].T), truth[:, 6:10].T)
    if np.any(dq[0] == 0.0):
        raise ValueError("attitude error of 180 degrees has no small-angle form")
    out = np.empty((truth.shape[0], ERROR_DIM))
    out[:, 0:6] = truth[:, 0:6] - estimate[:, 0:6]
    out[:, 6:9] = (2.0 * dq[1:] / dq[0]).T
    out[:, 9:21] = truth[:, 10:22] - estimate[:, 10:22]
    return out


@dataclass(frozen=True)
class SensorLog:
    """Everything the filter sees: IMU epochs and measurements keyed by step."""

    epochs: tuple
    measurements: dict  # step -> list of measurements


def _failed(msg, seed, k, log, X, Ps, innovations) -> RunFailed:
    exc = RunFailed(msg, seed=seed, step=k)
    times = np.array([e.t for e in log.epochs[:k]])
    exc.partial = (times, X[:k].copy(), Ps[:k].copy(), list(innovations))
    return exc


def filter_pass(
    x0: SystemState,
    P0: np.ndarray,
    log: SensorLog,
    Qc: np.ndarray,
    mode: str,
    *,
    gate: float | None = None,
    second_order: bool = True,
    seed: int | None = None,
):
    """Run the EKF over a sensor log.

    Returns ``(times, estimates (n,22), P (n,21,21), innovations)``. The same
    routine serves simulation and log replay. On failure the raised
    :class:`RunFailed` carries the history up to the failing step as
    ``partial``.
    """
    mode = normalize_mode(mode)
    n = len(log.epochs)
    X = np.empty((n, 22))
    Ps = np.empty((n, ERROR_DIM, ERROR_DIM))
    innovations = []
    jac_cache: dict = {}
    x, P = x0, P0
    for k in range(n):
        try:
            if k > 0:
                x, P, _ = ekf_predict(
                    x,
                    P,
                    log.epochs[k - 1],
                    log.epochs[k],
                    Qc,
                    second_order=second_order,
                    before=log.epochs[k - 2] if k >= 2 else None,
                    after=log.epochs[k + 1] if k + 1 < n else None,
                    cache=jac_cache,
                )
            for m in log.measurements.get(k, ()):
                if isinstance(m, RelPositionMeas):
                    r, H = residual_and_H_dp(x, m)
                    kind = "dp"
                elif isinstance(m, RelOrientationMeas):
                    if mode == "dp":
                        continue
                    r, H = residual_and_H_dq(x, m)
                    kind = "dq"
                else:
                    raise TypeError(f"unsupported measurement {type(m).__name__}")
                x, P, stats = ekf_update(x, P, r, H, m.R, gate=gate)
                innovations.append((m.t, kind, stats.nis, stats.accepted, k))
        except (NumericalFailure, ValueError, np.linalg.LinAlgError) as exc:
            raise _failed(f"filter failed at step {k}: {exc}", seed, k, log, X, Ps, innovations) from exc
        vec = x.to_vector()
        if not (np.all(np.isfinite(vec)) and np.all(np.isfinite(P))):
            raise _failed(f"non-finite estimate at step {k}", seed, k, log, X, Ps, innovations)
        X[k] = vec
        Ps[k] = P
    times = np.array([e.t for e in log.epochs])
    return times, X, Ps, innovations


def synthesize_log(
    profile: MotionProfile,
    noise: NoiseParams,
    rng: np.random.Generator | None,
    settings: FilterSettings,
    truth: TruthHistory,
    bias0: dict | None = None,
):
    """Noisy sensor log plus the true packed states (with bias random walk).

    ``bias0`` holds the initial true biases keyed ``bg1``, ``bg2``, ``ba1``,
    ``ba2`` (zeros by default).
    """
    dt = settings.dt
    biases = {k: np.zeros(3) for k in ("bg1", "bg2", "ba1", "ba2")}
    if bias0:
        biases.update({k: np.asarray(v, dtype=float).copy() for k, v in bias0.items()})
    walk = {"bg1": noise.sigma_wg1, "bg2": noise.sigma_wg2, "ba1": noise.sigma_wa1, "ba2": noise.sigma_wa2}
    epochs, meas, truth_vecs = [], {}, []
    for k, ((s1, s2), xs) in enumerate(zip(truth.samples, truth.states)):
        imu1 = synthesize_imu(s1, biases["bg1"], biases["ba1"], noise.sigma_g1, noise.sigma_a1, dt, rng)
        imu2 = synthesize_imu(s2, biases["bg2"], biases["ba2"], noise.sigma_g2, noise.sigma_a2, dt, rng)
        epochs.append(ImuEpoch(imu1, imu2, truth.omega1_dot[k]))
        vec = xs.to_vector()
        vec[10:13], vec[13:16], vec[16:19], vec[19:22] = biases["bg1"], biases["bg2"], biases["ba1"], biases["ba2"]
        truth_vecs.append(vec)
        if k % settings.meas_every == 0:
            meas[k] = list(synthesize_measurements(s1, s2, settings.sigma_p, settings.sigma_q, rng))
        if rng is not None:
            for name, sw in walk.items():
                if sw > 0:
                    biases[name] = biases[name] + sw * np.sqrt(dt) * rng.standard_normal(3)
    return SensorLog(tuple(epochs), meas), np.array(truth_vecs)


def _bias_keys():
    return ("bg1", "bg2", "ba1", "ba2")


def run_filter_once(
    profile: MotionProfile,
    noise: NoiseParams,
    seed,
    mode: str,
    settings: FilterSettings | None = None,
    truth: TruthHistory | None = None,
    *,
    perturb: bool = True,
    sensor_noise: bool = True,
) -> RunHistory:
    """One filter run with noise drawn from ``seed``.

    With ``perturb`` the initial estimate error is drawn from the initial
    covariance: true biases start at the drawn bias errors and the estimate's
    pose and velocity are offset by the drawn kinematic errors. Without
    ``sensor_noise`` the IMU and measurement samples are exact while the
    filter keeps its nominal noise model.
    """
    settings = settings or FilterSettings()
    mode = normalize_mode(mode)
    truth = truth or simulate_truth(profile, settings.imu_rate)
    rng = np.random.default_rng(seed)
    P0 = initial_covariance(settings.p0_diag)
    # P0 is diagonal; scaling standard normals also admits zero-variance blocks
    dx0 = np.sqrt(np.diag(P0)) * rng.standard_normal(ERROR_DIM) if perturb else np.zeros(ERROR_DIM)
    bias0 = {name: dx0[IDX[name]] for name in _bias_keys()}
    log, truth_vecs = synthesize_log(profile, noise, rng if sensor_noise else None, settings, truth, bias0)

    # The estimate starts with zero biases and the kinematic part offset.
    x_true0 = SystemState.from_vector(truth_vecs[0])
    kin = np.zeros(ERROR_DIM)
    kin[:9] = dx0[:9]
    x0 = state_retract(x_true0.replace(**{k: np.zeros(3) for k in _bias_keys()}), -kin)
    Qc = noise_covariance(noise, settings.gyro1_inflation)
    seed_id = seed if isinstance(seed, (int, np.integer)) else None
    times, X, Ps, innov = filter_pass(
        x0, P0, log, Qc, mode, gate=settings.gate, second_order=settings.second_order, seed=seed_id
    )
    return RunHistory(times, truth_vecs, X, Ps, innov, seed_id, log, x0)


# --- bias projections ------------------------------------------------------


def _pair_coords(first: np.ndarray, second: np.ndarray, C: np.ndarray, sign: float) -> np.ndarray:
    # Coordinates of the bias pair along the columns of [sign·I; Cᵀ].
    return 0.5 * (sign * first + C @ second)


def composite_bias_errors(truth: SystemState, estimate: SystemState, q_rel_t, q_rel_t0):
    """Bias errors projected on relative and composite directions.

    Returns ``(b_g-, b_a-, b_g+, b_a+)`` coordinates. Relative directions use
    the current relative rotation, composite directions the initial one.
    """
    C_t = quat_to_rot(q_rel_t)
    C_0 = quat_to_rot(q_rel_t0)
    d = {k: getattr(truth, k) - getattr(estimate, k) for k in _bias_keys()}
    return (
        _pair_coords(d["bg1"], d["bg2"], C_t, -1.0),
        _pair_coords(d["ba1"], d["ba2"], C_t, -1.0),
        _pair_coords(d["bg1"], d["bg2"], C_0, 1.0),
        _pair_coords(d["ba1"], d["ba2"], C_0, 1.0),
    )


def projection_matrix(name: str, anchors: DirectionAnchors, C_t: np.ndarray | None = None) -> np.ndarray:
    """Rows mapping a 21-error to coordinates along a named direction family."""
    if name in ("bg-", "ba-", "bg+", "ba+"):
        B = direction_block(name, anchors, C_t) * np.sqrt(2.0)  # undo unit scaling
        return 0.5 * B.T
    B = direction_block(name, anchors)
    return B.T


PROJECTIONS = ("theta_a", "bg+", "ba+", "bg-", "ba-")


# --- Monte Carlo -------------------------------------------------------------


@dataclass
class RunMetrics:
    times: np.ndarray
    rmse: np.ndarray  # (n, 21)
    sig3: np.ndarray  # (n, 21)
    nees: np.ndarray  # (n,)
    runs: int
    proj_rmse: dict = field(default_factory=dict)  # name -> (n, k)
    proj_sig3: dict = field(default_factory=dict)
    seed: int | None = None
    failed_seeds: tuple = ()

    def within_envelope(self, start_fraction: float = 0.5) -> np.ndarray:
        """Fraction of steps per component with RMSE inside 3σ."""
        k0 = int(np.floor(start_fraction * (self.times.size - 1)))
        return np.mean(self.rmse[k0:] <= self.sig3[k0:], axis=0)

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        cols = ["t"] + [f"rmse_{l}" for l in ERROR_LABELS] + [f"sig3_{l}" for l in ERROR_LABELS] + ["nees"]
        buf.write(",".join(cols) + "\n")
        for k in range(self.times.size):
            vals = [self.times[k], *self.rmse[k], *self.sig3[k], self.nees[k]]
            buf.write(",".join(_fmt(v) for v in vals) + "\n")
        return buf.getvalue()


def _fmt(v: float) -> str:
    # repr-style round-trip formatting, independent of locale
    return format(float(v), ".17g")


def nees_band(dof: int, runs: int, confidence: float = 0.95):
    """Two-sided chi-square interval for the run-averaged NEES."""
    lo = (1.0 - confidence) / 2.0
    return (
        float(chi2.ppf(lo, dof * runs) / runs),
        float(chi2.ppf(1.0 - lo, dof * runs) / runs),
    )


@dataclass
class _Accumulator:
    n: int
    sq: np.ndarray = None
    var: np.ndarray = None
    nees: np.ndarray = None
    psq: dict = None
    pvar: dict = None
    count: int = 0

    def __post_init__(self):
        self.sq = np.zeros((self.n, ERROR_DIM))
        self.var = np.zeros((self.n, ERROR_DIM))
        self.nees = np.zeros(self.n)
        self.psq = {}
        self.pvar = {}

    def add(self, summary):
        err2, diagP, nees, proj = summary
        self.sq += err2
        self.var += diagP
        self.nees += nees
        for name, (e2, v) in proj.items():
            self.psq[name] = self.psq.get(name, 0.0) + e2
            self.pvar[name] = self.pvar.get(name, 0.0) + v
        self.count += 1


def summarize_run(hist: RunHistory, anchors: DirectionAnchors | None = None, projections: Sequence[str] = ()):
    """Squared errors, covariance diagonals, NEES and direction projections of one run."""
    err = hist.errors()
    diagP = np.einsum("kii->ki", hist.P)
    nees = hist.nees(err)
    proj = {}
    if projections and anchors is None:
        raise ValueError("projections need direction anchors")
    C_t = None
    for name in projections:
        if name.endswith("-"):
            if C_t is None:
                C_t = np.moveaxis(quat_to_rot(hist.truth[:, 6:10].T), -1, 0)
            # coordinates along [-I; Cᵀ] on the bias pair: ½(-e1 + C e2)
            first, second = (IDX["bg1"], IDX["bg2"]) if name == "bg-" else (IDX["ba1"], IDX["ba2"])
            A = np.zeros((err.shape[0], 3, ERROR_DIM))
            A[:, :, first] = -0.5 * np.eye(3)
            A[:, :, second] = 0.5 * C_t
        else:
            A = np.broadcast_to(projection_matrix(name, anchors), (err.shape[0],) + projection_matrix(name, anchors).shape)
        e = np.einsum("kij,kj->ki", A, err)
        v = np.einsum("kij,kjl,kil->ki", A, hist.P, A)
        proj[name] = (e**2, v)
    return err**2, diagP, nees, proj


def _mc_worker(args):
    profile, noise, seed, mode, settings, truth, anchors, projections = args
    try:
        hist = run_filter_once(profile, noise, seed, mode, settings, truth)
    except RunFailed as exc:
        return seed, None, exc
    return seed, summarize_run(hist, anchors, projections), None


def run_seeds(master_seed: int, runs: int) -> list:
    """Per-run integer seeds spawned from the master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(runs)]


def run_monte_carlo(
    profile: MotionProfile,
    noise: NoiseParams,
    runs: int,
    mode: str,
    settings: FilterSettings | None = None,
    *,
    seed: int = 0,
    projections: Sequence[str] = (),
    workers: int = 1,
) -> RunMetrics:
    """Independent runs with seeds spawned from ``seed``, reduced in seed order."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    settings = settings or FilterSettings()
    mode = normalize_mode(mode)
    truth = simulate_truth(profile, settings.imu_rate)
    anchors = anchors_from_profile(profile) if projections else None
    seeds = run_seeds(seed, runs)
    jobs = [(profile, noise, s, mode, settings, truth, anchors, tuple(projections)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_mc_worker, jobs))
    else:
        results = [_mc_worker(j) for j in jobs]

    failed = tuple(s for s, _, exc in results if exc is not None)
    if failed:
        raise RunFailed(f"{len(failed)} of {runs} runs failed; seeds {list(failed)}", seed=failed[0])
    acc = _Accumulator(truth.times.size)
    for _, summary, _ in results:
        acc.add(summary)
    N = acc.count
    return RunMetrics(
        times=truth.times.copy(),
        rmse=np.sqrt(acc.sq / N),
        sig3=3.0 * np.sqrt(acc.var / N),
        nees=acc.nees / N,
        runs=N,
        proj_rmse={k: np.sqrt(v / N) for k, v in acc.psq.items()},
        proj_sig3={k: 3.0 * np.sqrt(v / N) for k, v in acc.pvar.items()},
        seed=seed,
    )


def block_labels() -> Iterable[str]:
    return ERROR_BLOCKS


def imu_log_rows(epochs: Sequence[ImuEpoch], agent: int, with_omega_dot: bool = False):
    """Rows ``t, ω_m xyz, a_m xyz`` (plus ``ω̇`` xyz for agent 1 when requested)."""
    for e in epochs:
        s: ImuSample = e.imu1 if agent == 1 else e.imu2
        row = [s.t, *s.omega_m, *s.accel_m]
        if with_omega_dot and agent == 1:
            row += list(e.omega1_dot)
        yield row


__all__ = [
    "FilterSettings",
    "RunHistory",
    "RunMetrics",
    "SensorLog",
    "TrajectorySample",
    "composite_bias_errors",
    "filter_pass",
    "nees_band",
    "run_filter_once",
    "run_monte_carlo",
    "run_seeds",
    "simulate_truth",
    "summarize_run",
    "synthesize_log",
]
