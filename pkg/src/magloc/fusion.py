"""Position/velocity EKF and the ToF ground-step filter.

The filter runs in the anchor frame ``B``. Its prediction input is the
odometry velocity (optical flow plus IMU) of the UAV, and its six states
are the position of the receiver in ``B`` and a velocity offset: the part
of the position rate the odometry does not explain. The offset absorbs
both the motion of the UGV (the odometry is relative to the ground, not
to the moving deck) and slowly drifting flow bias, so

    p_dot = v_odom + v_offset,    v_offset_dot = white noise.

With zero offset this is plain dead reckoning on the measured velocity.
Absolute fixes (MI, or any other position source) and ToF altitude are
fused with linear Kalman updates in Joseph form. Measurements must arrive
in timestamp order; a late one is dropped and counted.
"""
import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .errors import ContractViolation, NumericalError, SensorFault

log = logging.getLogger(__name__)

_H_POS = np.hstack([np.eye(3), np.zeros((3, 3))])
_H_Z = np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]])


def _as_spd(m, name, dim):
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.shape == (1, dim) or a.shape == (dim, 1):
        a = np.diag(a.ravel())
    if a.shape != (dim, dim) or not np.allclose(a, a.T, atol=1e-12):
        raise ContractViolation(f"{name} must be a symmetric {dim}x{dim} matrix")
    if np.any(np.linalg.eigvalsh(a) <= 0):
        raise ContractViolation(f"{name} must be positive-definite")
    return a


@dataclass(frozen=True)
class EkfConfig:
    """Noise model.

    ``q_process`` is the continuous-time spectral density of the
    (position, offset) noise: the position block covers odometry velocity
    noise [m^2/s], the offset block its random walk [m^2/s^3].

    ``r_mag`` is the floor of the MI fix covariance. The simulator adds the
    linearised spread of each fix, from an amplitude noise of
    ``fix_amplitude_sigma`` [V] and a residual relative gain error of
    ``fix_gain_sigma``; set both to zero to fuse every fix with ``r_mag``.
    """

    r_mag: np.ndarray = field(default_factory=lambda: np.diag([0.02**2, 0.02**2, 0.04**2]))
    r_tof: float = 0.01**2
    q_process: np.ndarray = field(
        default_factory=lambda: np.diag([0.05**2] * 3 + [0.05**2] * 3)
    )
    # innovation gate for position fixes (chi-square, 3 dof); None disables it
    gate_probability: float = 0.999
    fix_amplitude_sigma: float = 0.002
    fix_gain_sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "r_mag", _as_spd(self.r_mag, "r_mag", 3))
        object.__setattr__(self, "q_process", _as_spd(self.q_process, "q_process", 6))
        if not self.r_tof > 0:
            raise ContractViolation("r_tof must be positive")
        if self.gate_probability is not None and not 0 < self.gate_probability < 1:
            raise ContractViolation("gate_probability must lie in (0, 1)")
        if not (self.fix_amplitude_sigma >= 0 and self.fix_gain_sigma >= 0):
            raise ContractViolation("fix noise terms must be >= 0")

    @property
    def gate_threshold(self):
        if self.gate_probability is None:
            return np.inf
        return float(chi2.ppf(self.gate_probability, 3))

    def to_dict(self):
        return {"r_mag": self.r_mag.tolist(), "r_tof": self.r_tof,
                "q_process": self.q_process.tolist(), "gate_probability": self.gate_probability,
                "fix_amplitude_sigma": self.fix_amplitude_sigma,
                "fix_gain_sigma": self.fix_gain_sigma}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class EkfState:
    position: np.ndarray
    velocity: np.ndarray
    covariance: np.ndarray
    timestamp: float = 0.0
    dropped: int = 0

    def __post_init__(self):
        for name in ("position", "velocity"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (3,):
                raise ContractViolation(f"{name} must have 3 components")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float))

    @classmethod
    def initial(cls, position, pos_sigma=0.01, vel_sigma=0.05, timestamp=0.0):
        p = np.diag([pos_sigma**2] * 3 + [vel_sigma**2] * 3)
        return cls(np.asarray(position, dtype=float), np.zeros(3), p, timestamp)

    @property
    def x(self):
        return np.concatenate([self.position, self.velocity])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.covariance)))


def discrete_process_noise(q, dt):
    """Exact integral of F(s) Q F(s)^T over [0, dt] for F(s) = [[I, sI], [0, I]].

    Being exact, two steps of dt/2 accumulate the same noise as one of dt.
    """
    a, b, c = q[:3, :3], q[:3, 3:], q[3:, 3:]
    qpp = a * dt + (b + b.T) * dt**2 / 2 + c * dt**3 / 3
    qpv = b * dt + c * dt**2 / 2
    return np.block([[qpp, qpv], [qpv.T, c * dt]])


def ekf_predict(state, velocity_meas, dt, cfg, rotation=None):
    """Propagate by ``dt`` driven by the odometry velocity.

    ``rotation`` (3x3) maps the measured velocity into ``B``; omit it when
    the velocity is already expressed there.
    """
    v = np.asarray(velocity_meas, dtype=float).reshape(3)
    if not (dt > 0 and np.isfinite(dt)):
        raise ContractViolation(f"dt must be positive and finite, got {dt}")
    if not np.all(np.isfinite(v)) or not state.is_finite():
        raise NumericalError("non-finite input to ekf_predict")
    if rotation is not None:
        v = np.asarray(rotation, dtype=float) @ v
    f = np.eye(6)
    f[:3, 3:] = dt * np.eye(3)
    p = f @ state.covariance @ f.T + discrete_process_noise(cfg.q_process, dt)
    return replace(
        state,
        position=state.position + (v + state.velocity) * dt,
        covariance=0.5 * (p + p.T),
        timestamp=state.timestamp + dt,
    )


def _joseph_update(state, z, h, r):
    x, p = state.x, state.covariance
    s = h @ p @ h.T + r
    k = np.linalg.solve(s, h @ p).T
    x = x + k @ (z - h @ x)
    ikh = np.eye(6) - k @ h
    p = ikh @ p @ ikh.T + k @ r @ k.T
    p = 0.5 * (p + p.T)
    try:
        np.linalg.cholesky(p)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance lost positive-definiteness") from exc
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite state after update")
    return replace(state, position=x[:3], velocity=x[3:], covariance=p)


def _is_late(state, timestamp):
    if timestamp is not None and timestamp < state.timestamp - 1e-9:
        log.warning("dropping measurement at t=%.4f older than filter time %.4f",
                    timestamp, state.timestamp)
        return True
    return False


def ekf_update_position(state, z, cfg, timestamp=None, r=None):
    """Fuse an absolute position fix in ``B`` (MI, or any other source via ``r``)."""
    z = np.asarray(z, dtype=float).reshape(3)
    if not np.all(np.isfinite(z)):
        raise ContractViolation("position measurement must be finite")
    if _is_late(state, timestamp):
        return replace(state, dropped=state.dropped + 1)
    r = cfg.r_mag if r is None else _as_spd(r, "r", 3)
    return _joseph_update(state, z, _H_POS, r)


def position_nis(state, z, cfg, r=None):
    """Normalised innovation squared of a position fix against the prior.

    Chi-square with 3 degrees of freedom when the filter is consistent;
    compare with ``cfg.gate_threshold``.
    """
    z = np.asarray(z, dtype=float).reshape(3)
    r = cfg.r_mag if r is None else _as_spd(r, "r", 3)
    nu = z - state.position
    s = state.covariance[:3, :3] + r
    return float(nu @ np.linalg.solve(s, nu))


def ekf_update_tof(state, compensated_altitude, cfg, timestamp=None):
    """Scalar update of the z state with a step-compensated ToF altitude."""
    if not np.isfinite(compensated_altitude):
        raise ContractViolation("altitude measurement must be finite")
    if _is_late(state, timestamp):
        return replace(state, dropped=state.dropped + 1)
    return _joseph_update(state, np.array([compensated_altitude]), _H_Z,
                          np.array([[cfg.r_tof]]))


class TofMode(enum.Enum):
    NOMINAL = "nominal"
    STEP_HOLD = "step_hold"


@dataclass(frozen=True)
class TofFilterState:
    """Step detector on the raw range derivative.

    ``baseline_d0`` is the depth of the surface currently under the sensor
    below the deck plane, so the compensated altitude is ``raw - d0``.
    """

    mode: TofMode = TofMode.NOMINAL
    baseline_d0: float = 0.0
    last_raw: float = None
    step_threshold: float = 2.0
    hold_value: float = None

    def __post_init__(self):
        if not self.step_threshold > 0:
            raise ContractViolation("step_threshold must be positive")


def tof_step_filter(tstate, raw_d, dt):
    """Return ``(compensated_altitude, new_state)`` for one range sample.

    A range derivative above ``step_threshold`` means the surface under the
    sensor changed (deck edge). The output then holds its previous value and
    the baseline is moved so the following samples continue from there.
    """
    if not dt > 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    if not np.isfinite(raw_d) or raw_d < 0:
        raise SensorFault(f"invalid ToF range {raw_d}")
    if tstate.last_raw is None:
        alt = raw_d - tstate.baseline_d0
        return alt, replace(tstate, mode=TofMode.NOMINAL, last_raw=raw_d, hold_value=alt)

    rate = abs(raw_d - tstate.last_raw) / dt
    if rate < tstate.step_threshold:
        alt = raw_d - tstate.baseline_d0
        return alt, replace(tstate, mode=TofMode.NOMINAL, last_raw=raw_d, hold_value=alt)
    held = tstate.hold_value
    return held, replace(tstate, mode=TofMode.STEP_HOLD, baseline_d0=raw_d - held,
                         last_raw=raw_d, hold_value=held)
