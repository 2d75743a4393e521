"""Relative state, error state, covariance helpers and noise parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from dualimu.geom import IDENTITY_QUAT, UNIT_TOL, normalize, quat_error_extract, quat_error_inject

STATE_DIM = 22
ERROR_DIM = 21

# Error-state block order shared by F, Φ, H and every direction basis.
ERROR_BLOCKS = ("p", "v", "theta", "bg1", "bg2", "ba1", "ba2")
IDX = {name: slice(3 * i, 3 * i + 3) for i, name in enumerate(ERROR_BLOCKS)}
ERROR_LABELS = tuple(f"{b}_{ax}" for b in ERROR_BLOCKS for ax in "xyz")


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.isfinite(a).all():
        raise ValueError(f"non-finite vector {a}")
    return a


@dataclass(frozen=True)
class SystemState:
    """22-entry relative state of the target IMU with respect to the reference IMU."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    bg1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg2: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba2: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for f in fields(self):
            if f.name == "q":
                q = np.asarray(self.q, dtype=float).reshape(4)
                if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
                    q = normalize(q)
                object.__setattr__(self, "q", q)
            else:
                object.__setattr__(self, f.name, _vec3(getattr(self, f.name)))

    def to_vector(self) -> np.ndarray:
        return np.concatenate((self.p, self.v, self.q, self.bg1, self.bg2, self.ba1, self.ba2))

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "SystemState":
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,):
            raise ValueError(f"expected a {STATE_DIM}-vector, got shape {x.shape}")
        return cls(x[0:3], x[3:6], x[6:10], x[10:13], x[13:16], x[16:19], x[19:22])

    def replace(self, **changes) -> "SystemState":
        return replace(self, **changes)


def state_retract(x_hat: SystemState, dx: np.ndarray) -> SystemState:
    """Apply an error-state correction: additive except for the attitude."""
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (ERROR_DIM,):
        raise ValueError(f"expected a {ERROR_DIM}-vector error, got shape {dx.shape}")
    return SystemState(
        p=x_hat.p + dx[IDX["p"]],
        v=x_hat.v + dx[IDX["v"]],
        q=quat_error_inject(x_hat.q, dx[IDX["theta"]]),
        bg1=x_hat.bg1 + dx[IDX["bg1"]],
        bg2=x_hat.bg2 + dx[IDX["bg2"]],
        ba1=x_hat.ba1 + dx[IDX["ba1"]],
        ba2=x_hat.ba2 + dx[IDX["ba2"]],
    )


def state_difference(x: SystemState, x_hat: SystemState) -> np.ndarray:
    """Error state taking ``x_hat`` to ``x`` (inverse of :func:`state_retract`)."""
    return np.concatenate(
        (
            x.p - x_hat.p,
            x.v - x_hat.v,
            quat_error_extract(x.q, x_hat.q),
            x.bg1 - x_hat.bg1,
            x.bg2 - x_hat.bg2,
            x.ba1 - x_hat.ba1,
            x.ba2 - x_hat.ba2,
        )
    )


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


DEFAULT_P0_DIAG = (1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-2, 1e-2)


def initial_covariance(block_variances=DEFAULT_P0_DIAG) -> np.ndarray:
    """Block-diagonal covariance, one per-axis variance per error block."""
    if len(block_variances) != len(ERROR_BLOCKS):
        raise ValueError(f"need {len(ERROR_BLOCKS)} block variances")
    if any(v < 0 for v in block_variances):
        raise ValueError("variances must be non-negative")
    return np.diag(np.repeat(np.asarray(block_variances, dtype=float), 3))


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities of both IMUs.

    Units: gyro rad/s/√Hz, accel m/s²/√Hz, gyro bias walk rad/s²/√Hz,
    accel bias walk m/s³/√Hz.
    """

    sigma_g1: float = 1e-3
    sigma_g2: float = 1e-3
    sigma_a1: float = 1e-2
    sigma_a2: float = 1e-2
    sigma_wg1: float = 1e-5
    sigma_wg2: float = 1e-5
    sigma_wa1: float = 1e-4
    sigma_wa2: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{f.name} must be a finite non-negative number, got {val}")

    def scaled(self, factor: float) -> "NoiseParams":
        return NoiseParams(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    @classmethod
    def zero(cls) -> "NoiseParams":
        return cls(*([0.0] * 8))
