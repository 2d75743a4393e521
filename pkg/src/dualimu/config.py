"""Scenario configuration: a sectioned key = value file (a TOML subset)."""

from __future__ import annotations

import math
import re
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dualimu.errors import ConfigError
from dualimu.simworld import MotionCell, ProfileParams
from dualimu.state import ERROR_BLOCKS, NoiseParams


@dataclass(frozen=True)
class ScenarioSection:
    cell: str = "I-S"
    mode: str = "dpdq"
    seed: int = 0


@dataclass(frozen=True)
class RatesSection:
    imu: float = 200.0
    meas: float = 20.0


@dataclass(frozen=True)
class MeasurementSection:
    sigma_p: float = 0.01
    sigma_q: float = 0.01


@dataclass(frozen=True)
class FilterSection:
    p0_p: float = 1e-4
    p0_v: float = 1e-4
    p0_theta: float = 1e-4
    p0_bg1: float = 1e-4
    p0_bg2: float = 1e-4
    p0_ba1: float = 1e-2
    p0_ba2: float = 1e-2
    gyro1_inflation: float = 1.0
    gate: float = 0.0  # 0 disables gating
    second_order: bool = True

    def p0_diag(self) -> tuple:
        return tuple(getattr(self, f"p0_{b}") for b in ERROR_BLOCKS)


@dataclass(frozen=True)
class MonteCarloSection:
    runs: int = 50
    workers: int = 1


@dataclass(frozen=True)
class ObservabilitySection:
    rank_tol: float = 1e-10
    residual_tol: float = 1e-6
    angle_tol: float = 1e-4
    observable_tol: float = 1e-3
    backend: str = "first_order"


@dataclass(frozen=True)
class OutputSection:
    out_dir: str = "out"


@dataclass(frozen=True)
class InitialSection:
    """Initial estimate for log replay; all-empty means "from the first measurement"."""

    p: tuple = ()
    v: tuple = ()
    q: tuple = ()
    bg1: tuple = ()
    bg2: tuple = ()
    ba1: tuple = ()
    ba2: tuple = ()

    def is_set(self) -> bool:
        return any(len(getattr(self, f.name)) for f in fields(self))


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    profile: ProfileParams = field(default_factory=ProfileParams)
    rates: RatesSection = field(default_factory=RatesSection)
    noise: NoiseParams = field(default_factory=NoiseParams)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    filter: FilterSection = field(default_factory=FilterSection)
    montecarlo: MonteCarloSection = field(default_factory=MonteCarloSection)
    observability: ObservabilitySection = field(default_factory=ObservabilitySection)
    output: OutputSection = field(default_factory=OutputSection)
    initial: InitialSection = field(default_factory=InitialSection)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        """Replace single keys given as ``section__key=value``; ``None`` values are skipped."""
        cfg = self
        for key, val in kw.items():
            if val is None:
                continue
            sec, name = key.split("__")
            cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **{name: val})})
        validate(cfg)
        return cfg


SECTIONS = {f.name: f.default_factory for f in fields(ScenarioConfig)}
_VECTOR_LEN = {"p": 3, "v": 3, "q": 4, "bg1": 3, "bg2": 3, "ba1": 3, "ba2": 3}


def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return i
    if section is not None:
        for i, line in enumerate(text.splitlines(), start=1):
            if line.strip() == f"[{section}]":
                return i
    return None


def _where(text, section, key) -> str:
    line = _line_of(text, section, key)
    name = f"{section}.{key}" if key else section
    return f"{name} (line {line})" if line else name


def _coerce(default, value, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{where}: expected an array of numbers")
        return tuple(float(v) for v in value)
    raise ConfigError(f"{where}: unsupported value")


def parse_config_text(text: str) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from exc
    built = {}
    for sec, table in data.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {_where(text, sec, None)}")
        if not isinstance(table, dict):
            raise ConfigError(f"{sec} must be a [section]")
        default = SECTIONS[sec]()
        known = {f.name: getattr(default, f.name) for f in fields(default)}
        vals = {}
        for key, value in table.items():
            where = _where(text, sec, key)
            if key not in known:
                raise ConfigError(f"unknown key {where}")
            vals[key] = _coerce(known[key], value, where)
        try:
            built[sec] = replace(default, **vals)
        except ValueError as exc:
            bad = next((k for k in vals if k in str(exc)), next(iter(vals), None))
            raise ConfigError(f"{_where(text, sec, bad)}: {exc}") from exc
    cfg = ScenarioConfig(**built)
    validate(cfg, text)
    return cfg


def parse_config(path) -> ScenarioConfig:
    """Read and validate a configuration file; defaults fill absent keys."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text)


def validate(cfg: ScenarioConfig, text: str = "") -> None:
    def fail(sec, key, msg):
        raise ConfigError(f"{_where(text, sec, key)}: {msg}")

    try:
        MotionCell.parse(cfg.scenario.cell)
    except ValueError as exc:
        fail("scenario", "cell", str(exc))
    if cfg.scenario.mode.replace("+", "").lower() not in ("dp", "dpdq"):
        fail("scenario", "mode", "must be 'dp' or 'dpdq'")
    if cfg.scenario.seed < 0:
        fail("scenario", "seed", "must be non-negative")
    if not cfg.rates.imu > 0:
        fail("rates", "imu", "must be positive")
    if not cfg.rates.meas > 0:
        fail("rates", "meas", "must be positive")
    ratio = cfg.rates.imu / cfg.rates.meas if cfg.rates.meas > 0 else 0
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        fail("rates", "meas", "imu rate must be an integer multiple of the measurement rate")
    for f in fields(cfg.measurement):
        if getattr(cfg.measurement, f.name) <= 0:
            fail("measurement", f.name, "must be positive")
    for f in fields(cfg.filter):
        v = getattr(cfg.filter, f.name)
        if isinstance(v, float) and (not math.isfinite(v) or v < 0):
            fail("filter", f.name, "must be a finite non-negative number")
    if cfg.montecarlo.runs < 1:
        fail("montecarlo", "runs", "must be at least 1")
    if cfg.montecarlo.workers < 1:
        fail("montecarlo", "workers", "must be at least 1")
    for name in ("rank_tol", "residual_tol", "angle_tol", "observable_tol"):
        if not getattr(cfg.observability, name) > 0:
            fail("observability", name, "must be positive")
    if cfg.observability.backend not in ("first_order", "closed_form"):
        fail("observability", "backend", "must be 'first_order' or 'closed_form'")
    for name, n in _VECTOR_LEN.items():
        v = getattr(cfg.initial, name)
        if len(v) not in (0, n):
            fail("initial", name, f"expected {n} numbers")
    if cfg.initial.is_set() and (not cfg.initial.p or not cfg.initial.q):
        fail("initial", "p", "an initial estimate needs at least p and q")


def _toml_string(v: str) -> str:
    # basic string: escape quote, backslash and control characters only
    out = []
    for ch in v:
        if ch in '"\\':
            out.append("\\" + ch)
        elif ord(ch) < 0x20 or ord(ch) == 0x7F:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return '"' + "".join(out) + '"'


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite values cannot be written")
        return repr(v)
    if isinstance(v, str):
        return _toml_string(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_fmt_value(float(x)) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dump_config(cfg: ScenarioConfig) -> str:
    """Serialize every key; ``parse_config_text(dump_config(c)) == c``."""
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        for key, val in asdict(getattr(cfg, sec)).items():
            if isinstance(val, list):
                val = tuple(val)
            out.append(f"{key} = {_fmt_value(val)}")
        out.append("")
    return "\n".join(out)
