"""Command-line entry point: simulate, montecarlo, observability, replay."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dualimu.config import ScenarioConfig, dump_config, parse_config
from dualimu.dynamics import ImuSample, angular_accel_estimate, noise_covariance
from dualimu.errors import ConfigError, InconsistentScenario, NumericalFailure, RunFailed
from dualimu.geom import IDENTITY_QUAT
from dualimu.harness import (
    PROJECTIONS,
    FilterSettings,
    RunHistory,
    SensorLog,
    filter_pass,
    imu_log_rows,
    normalize_mode,
    run_filter_once,
    run_monte_carlo,
    run_seeds,
    simulate_truth,
    summarize_run,
    RunMetrics,
)
from dualimu.obs import analyze
from dualimu.propagation import ImuEpoch
from dualimu.simworld import MotionCell, make_profile
from dualimu.state import ERROR_LABELS, SystemState, initial_covariance
from dualimu.update import RelOrientationMeas, RelPositionMeas

log = logging.getLogger("dualimu")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_OBS_FAIL = 4

IMU_COLUMNS = ["t", "agent", "wx", "wy", "wz", "ax", "ay", "az"]
IMU_WDOT_COLUMNS = ["wdx", "wdy", "wdz"]
MEAS_COLUMNS = ["t", "dpx", "dpy", "dpz"]
MEAS_DQ_COLUMNS = ["dqw", "dqx", "dqy", "dqz"]
POSE_COLUMNS = (
    ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"] + [f"sig3_{l}" for l in ERROR_LABELS] + ["nis_dp", "nis_dq"]
)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_rows(path: Path, header_comment: str, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {header_comment}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(r if isinstance(r, str) else _fmt(r) for r in row) + "\n")
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def settings_from(cfg: ScenarioConfig) -> FilterSettings:
    f = cfg.filter
    return FilterSettings(
        imu_rate=cfg.rates.imu,
        meas_rate=cfg.rates.meas,
        sigma_p=cfg.measurement.sigma_p,
        sigma_q=cfg.measurement.sigma_q,
        p0_diag=f.p0_diag(),
        gyro1_inflation=f.gyro1_inflation,
        gate=f.gate if f.gate > 0 else None,
        second_order=f.second_order,
    )


def profile_from(cfg: ScenarioConfig):
    return make_profile(MotionCell.parse(cfg.scenario.cell), cfg.profile, cfg.scenario.seed)


def _header(cmd: str, cfg: ScenarioConfig, **extra) -> str:
    parts = [f"dualimu {cmd}", f"seed={cfg.scenario.seed}", f"cell={cfg.scenario.cell}", f"mode={cfg.scenario.mode}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def pose_rows(times, X, Ps, innovations):
    """One row per measurement epoch: pose, 3σ diagonal and the NIS values."""
    by_step: dict[int, dict] = {}
    for t, kind, nis, accepted, step in innovations:
        by_step.setdefault(step, {})[kind] = nis if accepted else float("nan")
    for step in sorted(by_step):
        sig3 = 3.0 * np.sqrt(np.diag(Ps[step]))
        nis = by_step[step]
        yield [times[step], *X[step, 0:3], *X[step, 6:10], *sig3, nis.get("dp", float("nan")), nis.get("dq", float("nan"))]


# --- commands ----------------------------------------------------------------


def cmd_simulate(cfg: ScenarioConfig, out_dir: Path) -> int:
    profile = profile_from(cfg)
    settings = settings_from(cfg)
    mode = normalize_mode(cfg.scenario.mode)
    seed = run_seeds(cfg.scenario.seed, 1)[0]
    truth = simulate_truth(profile, settings.imu_rate)
    hist = run_filter_once(profile, cfg.noise, seed, mode, settings, truth)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _header("simulate", cfg)

    err2, diagP, nees, _ = summarize_run(hist)
    metrics = RunMetrics(hist.times, np.sqrt(err2), 3.0 * np.sqrt(diagP), nees, 1, seed=cfg.scenario.seed)
    (out_dir / "metrics.csv").write_text(metrics.to_csv(header), encoding="utf-8", newline="\n")
    _write_rows(out_dir / "poses.csv", header, POSE_COLUMNS, pose_rows(hist.times, hist.estimate, hist.P, hist.innovations))
    _write_sensor_log(out_dir, hist, cfg)
    print(f"simulate: {hist.times.size} steps, final |dp error| = {np.linalg.norm(hist.errors()[-1, 0:3]):.3e} m")
    return EXIT_OK


def _write_sensor_log(out_dir: Path, hist: RunHistory, cfg: ScenarioConfig) -> None:
    """IMU and measurement CSVs of a run plus a config that replays it exactly."""
    header = _header("sensor-log", cfg)
    slog = hist.sensor_log
    _write_rows(out_dir / "imu1.csv", header, IMU_COLUMNS + IMU_WDOT_COLUMNS, _imu_rows(slog.epochs, 1))
    _write_rows(out_dir / "imu2.csv", header, IMU_COLUMNS, _imu_rows(slog.epochs, 2))
    rows = []
    for k in sorted(slog.measurements):
        ms = slog.measurements[k]
        dp = next(m for m in ms if isinstance(m, RelPositionMeas))
        dq = next((m for m in ms if isinstance(m, RelOrientationMeas)), None)
        rows.append([dp.t, *dp.dp, *(dq.dq if dq is not None else [float("nan")] * 4)])
    _write_rows(out_dir / "meas.csv", header, MEAS_COLUMNS + MEAS_DQ_COLUMNS, rows)
    x0 = hist.initial_estimate
    initial = replace(
        cfg.initial,
        **{name: tuple(getattr(x0, name)) for name in ("p", "v", "q", "bg1", "bg2", "ba1", "ba2")},
    )
    (out_dir / "replay.toml").write_text(dump_config(replace(cfg, initial=initial)), encoding="utf-8", newline="\n")


def _imu_rows(epochs, agent):
    for row in imu_log_rows(epochs, agent, with_omega_dot=True):
        yield [row[0], str(agent), *row[1:]]


_CSV_NAMES = {"theta_a": "theta_a", "bg+": "bg_plus", "ba+": "ba_plus", "bg-": "bg_minus", "ba-": "ba_minus"}


def cmd_montecarlo(cfg: ScenarioConfig, out_dir: Path) -> int:
    profile = profile_from(cfg)
    settings = settings_from(cfg)
    metrics = run_monte_carlo(
        profile,
        cfg.noise,
        cfg.montecarlo.runs,
        cfg.scenario.mode,
        settings,
        seed=cfg.scenario.seed,
        projections=PROJECTIONS,
        workers=cfg.montecarlo.workers,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _header("montecarlo", cfg, runs=metrics.runs)
    (out_dir / "metrics.csv").write_text(metrics.to_csv(header), encoding="utf-8", newline="\n")
    cols, data = ["t"], [metrics.times]
    for name in PROJECTIONS:
        r, s = metrics.proj_rmse[name], metrics.proj_sig3[name]
        for j in range(r.shape[1]):
            base = _CSV_NAMES[name]
            suffix = f"{base}_{'xyz'[j]}" if r.shape[1] == 3 else base
            cols += [f"rmse_{suffix}", f"sig3_{suffix}"]
            data += [r[:, j], s[:, j]]
    _write_rows(out_dir / "projections.csv", header, cols, zip(*data))
    k0 = metrics.times.size // 2
    inside = metrics.within_envelope()
    print(
        f"montecarlo: {metrics.runs} runs, mean NEES (second half) = {np.mean(metrics.nees[k0:]):.3f}, "
        f"min fraction inside 3-sigma = {inside.min():.3f}"
    )
    return EXIT_OK


def cmd_observability(cfg: ScenarioConfig, out_dir: Path, assert_pass: bool = False) -> int:
    profile = profile_from(cfg)
    o = cfg.observability
    report = analyze(
        profile,
        cfg.scenario.mode,
        rank_tol=o.rank_tol,
        imu_rate=cfg.rates.imu,
        meas_rate=cfg.rates.meas,
        residual_tol=o.residual_tol,
        angle_tol=o.angle_tol,
        observable_tol=o.observable_tol,
        backend=o.backend,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    text = "# " + _header("observability", cfg) + "\n" + "\n".join(report.lines()) + "\n"
    (out_dir / "observability.txt").write_text(text, encoding="utf-8", newline="\n")
    print(report.summary())
    print("PASS" if report.passed else "FAIL")
    if assert_pass and not report.passed:
        return EXIT_OBS_FAIL
    return EXIT_OK


# --- replay --------------------------------------------------------------------


def _read_csv(path: Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"{path}: no header row")
    reader = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(reader)]
    rows = []
    for (lineno, _), row in zip(lines[1:], reader):
        try:
            rows.append((lineno, [float(v) for v in row]))
        except ValueError as exc:
            raise ConfigError(f"{path}: row {lineno}: {exc}") from exc
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {lineno}: expected {len(header)} columns, got {len(row)}")
    return header, rows


def _check_order(path, rows):
    last = -np.inf
    for lineno, row in rows:
        if row[0] < last:
            raise ConfigError(f"{path}: row {lineno}: timestamp {row[0]} precedes {last}")
        last = row[0]


def read_imu_logs(paths):
    """Per-agent IMU rows ``(t, ω, a, ω̇ or None)`` from one or more CSV files."""
    streams = {1: [], 2: []}
    for path in paths:
        header, rows = _read_csv(path)
        if header[: len(IMU_COLUMNS)] != IMU_COLUMNS:
            raise ConfigError(f"{path}: expected columns {','.join(IMU_COLUMNS)}")
        has_wdot = header[len(IMU_COLUMNS) :] == IMU_WDOT_COLUMNS
        if len(header) != len(IMU_COLUMNS) and not has_wdot:
            raise ConfigError(f"{path}: unexpected extra columns {header[len(IMU_COLUMNS):]}")
        per_agent = {1: [], 2: []}
        for lineno, r in rows:
            agent = int(r[1])
            if agent not in (1, 2):
                raise ConfigError(f"{path}: row {lineno}: agent must be 1 or 2")
            per_agent[agent].append((lineno, r))
        for agent, rs in per_agent.items():
            _check_order(path, rs)
            streams[agent] += [(r[0], np.array(r[2:5]), np.array(r[5:8]), np.array(r[8:11]) if has_wdot else None) for _, r in rs]
    return streams[1], streams[2]


def build_epochs(imu1, imu2):
    if len(imu1) != len(imu2) or not imu1:
        raise ConfigError(f"IMU streams differ in length ({len(imu1)} vs {len(imu2)}) or are empty")
    times = np.array([r[0] for r in imu1])
    steps = np.diff(times)
    period = float(np.median(steps)) if steps.size else 0.0
    epochs = []
    for k, (r1, r2) in enumerate(zip(imu1, imu2)):
        if period > 0 and abs(r1[0] - r2[0]) > 0.5 * period:
            raise ConfigError(f"IMU sample {k}: streams out of sync ({r1[0]} vs {r2[0]})")
        if r1[3] is not None:
            wdot = r1[3]
        elif k == 0:
            wdot = angular_accel_estimate(r1[1], imu1[1][1], imu1[1][0] - r1[0]) if len(imu1) > 1 else np.zeros(3)
        else:
            wdot = angular_accel_estimate(imu1[k - 1][1], r1[1], r1[0] - imu1[k - 1][0])
        epochs.append(ImuEpoch(ImuSample(r1[0], r1[1], r1[2]), ImuSample(r1[0], r2[1], r2[2]), wdot))
    for k, dt in enumerate(steps):
        if period > 0 and dt > 1.5 * period:
            log.warning("IMU gap of %.6g s after t=%.6g; prediction spans it", dt, times[k])
    return epochs, period


def read_measurements(path, epochs, period, cfg: ScenarioConfig):
    header, rows = _read_csv(path)
    has_dq = header == MEAS_COLUMNS + MEAS_DQ_COLUMNS
    if header != MEAS_COLUMNS and not has_dq:
        raise ConfigError(f"{path}: expected columns {','.join(MEAS_COLUMNS)}[,{','.join(MEAS_DQ_COLUMNS)}]")
    _check_order(path, rows)
    times = np.array([e.t for e in epochs])
    Rp = cfg.measurement.sigma_p**2 * np.eye(3)
    Rq = cfg.measurement.sigma_q**2 * np.eye(3)
    meas: dict[int, list] = {}
    first = None
    for lineno, r in rows:
        k = int(np.searchsorted(times, r[0] - 0.5 * period))
        if k >= times.size:
            log.warning("%s: row %d after the last IMU sample; ignored", path, lineno)
            continue
        items = [RelPositionMeas(r[0], r[1:4], Rp)]
        if has_dq and np.all(np.isfinite(r[4:8])):
            items.append(RelOrientationMeas(r[0], r[4:8], Rq))
        meas.setdefault(k, []).extend(items)
        if first is None:
            first = items
    return meas, first


def cmd_replay(imu_paths, meas_path, cfg: ScenarioConfig, out_dir: Path) -> int:
    imu1, imu2 = read_imu_logs(imu_paths)
    epochs, period = build_epochs(imu1, imu2)
    meas, first = read_measurements(meas_path, epochs, period, cfg)
    settings = settings_from(cfg)
    ini = cfg.initial
    if ini.is_set():
        z = (0.0, 0.0, 0.0)
        x0 = SystemState(
            p=ini.p,
            v=ini.v or z,
            q=ini.q,
            bg1=ini.bg1 or z,
            bg2=ini.bg2 or z,
            ba1=ini.ba1 or z,
            ba2=ini.ba2 or z,
        )
    elif first is not None:
        dq = next((m.dq for m in first if isinstance(m, RelOrientationMeas)), IDENTITY_QUAT)
        x0 = SystemState(p=first[0].dp, q=dq)
    else:
        raise ConfigError("no measurements to initialize from and no [initial] section")
    P0 = initial_covariance(settings.p0_diag)
    Qc = noise_covariance(cfg.noise, settings.gyro1_inflation)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _header("replay", cfg)
    try:
        times, X, Ps, innov = filter_pass(
            x0, P0, SensorLog(tuple(epochs), meas), Qc, cfg.scenario.mode,
            gate=settings.gate, second_order=settings.second_order,
        )
    except RunFailed as exc:
        times, X, Ps, innov = exc.partial
        _write_rows(out_dir / "poses.csv", header + " partial", POSE_COLUMNS, pose_rows(times, X, Ps, innov))
        (out_dir / "failure.txt").write_text(f"{exc}\nstep={exc.step}\n", encoding="utf-8")
        raise
    _write_rows(out_dir / "poses.csv", header, POSE_COLUMNS, pose_rows(times, X, Ps, innov))
    print(f"replay: {len(epochs)} IMU epochs, {sum(len(v) for v in meas.values())} measurements")
    return EXIT_OK


# --- argument handling ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualimu", description="Relative IMU state estimation and observability tools.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="scenario file (TOML subset)")
        p.add_argument("--out-dir", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--mode", choices=["dp", "dpdq", "dp+dq"], help="measurement mode")
        p.add_argument("--cell", help="motion cell, e.g. I-K")

    p = sub.add_parser("simulate", help="one filter run with its sensor log")
    common(p)
    p = sub.add_parser("montecarlo", help="Monte Carlo RMSE, 3-sigma and NEES")
    common(p)
    p.add_argument("--runs", type=int, help="number of runs")
    p.add_argument("--workers", type=int, help="worker processes")
    p = sub.add_parser("observability", help="null space of the observability matrix versus the predicted directions")
    common(p)
    p.add_argument("--rank-tol", type=float, help="relative singular-value threshold")
    p.add_argument("--assert", dest="assert_pass", action="store_true", help="exit 4 when the check fails")
    p = sub.add_parser("replay", help="run the filter over recorded CSV logs")
    common(p)
    p.add_argument("--imu", type=Path, nargs="+", required=True, help="IMU CSV file(s) with an agent column")
    p.add_argument("--meas", type=Path, required=True, help="measurement CSV file")
    return ap


def load_config(args) -> ScenarioConfig:
    cfg = parse_config(args.config) if args.config else ScenarioConfig()
    return cfg.with_overrides(
        scenario__seed=args.seed,
        scenario__mode=args.mode,
        scenario__cell=args.cell,
        montecarlo__runs=getattr(args, "runs", None),
        montecarlo__workers=getattr(args, "workers", None),
        observability__rank_tol=getattr(args, "rank_tol", None),
        output__out_dir=str(args.out_dir) if args.out_dir else None,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args)
        out_dir = Path(cfg.output.out_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir)
        if args.command == "montecarlo":
            return cmd_montecarlo(cfg, out_dir)
        if args.command == "observability":
            return cmd_observability(cfg, out_dir, args.assert_pass)
        return cmd_replay(args.imu, args.meas, cfg, out_dir)
    except (ConfigError, InconsistentScenario) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        print(f"error: {exc} (seed={exc.seed}, step={exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
