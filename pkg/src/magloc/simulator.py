"""Closed-loop docking missions: UGV playback, UAV kinematics, sensors, estimator.

World frame ``W`` has z up with the floor at z = 0. The anchor frame ``B``
rides on the UGV with its origin at the pad centre in the anchor plane,
which is also the deck surface, ``DECK_HEIGHT`` above the floor. The UAV
starts resting on the pad centre (the calibration pose), takes off to the
hover altitude, flies the scenario task and lands.

The UAV never sees the UGV pose. It knows the UGV heading only at mission
start and uses that stale heading to move odometry and commands between
``W`` and ``B``; everything else it learns from the MI fixes.

Rates are fixed multiples of the 100 Hz base step: MI every 5th step
(20 Hz), ToF every 2nd (50 Hz), EKF predict and controller every step.
"""
import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .calibration import CalibrationCoefficients, calibrate
from .dsp import AdcConfig, extract_amplitudes, synthesize_frame
from .errors import ConfigError, ContractViolation, NoActiveAnchors, NumericalError
from .fusion import (EkfConfig, EkfState, TofFilterState, TofMode, ekf_predict,
                     ekf_update_position, ekf_update_tof, position_nis,
                     tof_step_filter)
from .geometry import AnchorLayout, Pose, default_layout, receiver_normal_in_B
from .magnetics import CoilParams, ForwardModel, ReceiverChain
from .solver import MiEstimate, SolverOptions, estimate_position, fix_covariance

KINDS = ("Baseline", "S1_Hover", "S1_InOut", "S2_Linear", "S3_Composite")

BASE_DT = 0.01
MI_DECIMATION = 5
TOF_DECIMATION = 2
GRAVITY = 9.81
DECK_HEIGHT = 0.30
# Deck footprint (UGV frame), larger than the marked pad.
DECK_HALF_EXTENT = (0.25, 0.15)
VELOCITY_TAU = 0.15
# Consecutive MI cycles without an accepted fix before declaring signal loss.
MAX_MI_DROPOUT = 40
MAX_HEADING_STEP_DEG = 20.0

DEFAULT_S3_WAYPOINTS = (
    # (time after start [s], x [m], y [m], heading [deg])
    (0.0, 0.0, 0.0, 0.0),
    (4.0, 0.45, 0.0, 0.0),
    (8.0, 0.85, 0.15, 20.0),
    (12.0, 1.25, 0.25, 0.0),
    (16.0, 1.5, 0.15, -15.0),
    (20.0, 1.65, 0.15, 0.0),
)


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor noise magnitudes. The defaults are the calibrated set used by
    the acceptance batches (see ``demos/noise_calibration.py``)."""

    adc_noise_sigma: float = 0.05
    flow_velocity_sigma: float = 0.03
    flow_bias_drift: float = 0.02
    tof_sigma: float = 0.003
    attitude_sigma: float = 0.01
    calibration_noise_sigma: float = 0.002
    # relative per-anchor gain change between calibration and flight
    gain_drift_sigma: float = 0.07

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ConfigError(f"noise parameter {f.name} must be >= 0")

    @classmethod
    def noiseless(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ControllerLimits:
    """Position gain [1/s] and speed limit [m/s].

    With the first-order airframe lag the closed loop is critically damped
    at ``kp = 1 / (4 tau)``; the default sits just below that.
    """

    kp: float = 1.5
    max_speed: float = 1.0

    def __post_init__(self):
        if self.kp <= 0 or self.max_speed <= 0:
            raise ConfigError("controller gain and speed limit must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "S1_Hover"
    seed: int = 0
    duration: float = None
    hover_altitude: float = 0.45
    hover_time: float = 15.0
    setpoints: tuple = ()
    dwell_time: float = 2.0
    reference_speed: float = 0.2
    landing_speed: float = 0.15
    ugv_path: dict = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    disable_mi: bool = False
    n_cal: int = 32
    # programmable receive stage, known to both the hardware and the model
    rx_stage: float = 100.0
    # actual per-anchor drive currents; the model assumes the layout's nominal 1 A
    true_drive_currents: tuple = (1.06, 0.94, 1.02, 0.98)
    saturation_override: dict = None
    geofence: float = 0.5
    solver: SolverOptions = field(default_factory=SolverOptions)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    controller: ControllerLimits = field(default_factory=ControllerLimits)
    layout: AnchorLayout = field(default_factory=default_layout)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "setpoints", tuple(tuple(map(float, p)) for p in self.setpoints))
        if self.ugv_path is None:
            object.__setattr__(self, "ugv_path", default_ugv_path(self.kind))
        if self.kind == "S3_Composite":
            _check_heading_steps(self.ugv_path["waypoints"])
        if self.duration is None:
            object.__setattr__(self, "duration", mission_plan(self).end + 3.0)
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if self.n_cal < 1:
            raise ConfigError("n_cal must be >= 1")
        if len(self.true_drive_currents) != 4 or min(self.true_drive_currents) <= 0:
            raise ConfigError("true_drive_currents needs 4 positive values")

    @classmethod
    def default(cls, kind, seed=0, **overrides):
        if kind == "Baseline":
            overrides.setdefault("disable_mi", True)
        if kind == "S1_InOut":
            overrides.setdefault("setpoints", ((0.5, 0.0, 0.45), (0.0, 0.5, 0.45)))
        return cls(kind=kind, seed=seed, **overrides)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["noise"] = asdict(self.noise)
        d["controller"] = asdict(self.controller)
        d["solver"] = self.solver.to_dict()
        d["ekf"] = self.ekf.to_dict()
        d["layout"] = self.layout.to_dict()
        d["setpoints"] = [list(p) for p in self.setpoints]
        d["true_drive_currents"] = list(self.true_drive_currents)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        try:
            if "noise" in d:
                d["noise"] = NoiseConfig(**d["noise"])
            if "controller" in d:
                d["controller"] = ControllerLimits(**d["controller"])
            if "solver" in d:
                d["solver"] = SolverOptions.from_dict(d["solver"])
            if "ekf" in d:
                d["ekf"] = EkfConfig.from_dict(d["ekf"])
            if "layout" in d:
                d["layout"] = AnchorLayout.from_dict(d["layout"])
            if "true_drive_currents" in d:
                d["true_drive_currents"] = tuple(d["true_drive_currents"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)


def default_ugv_path(kind):
    if kind == "S2_Linear":
        # 0 -> 0.5 m -> 0 along the heading; peak speed amplitude*pi/period = 0.2 m/s
        return {"type": "linear", "amplitude": 0.5, "period": 0.5 * math.pi / 0.2, "heading": 0.0}
    if kind == "S3_Composite":
        return {"type": "waypoints", "waypoints": [list(w) for w in DEFAULT_S3_WAYPOINTS]}
    return {"type": "static", "position": [0.0, 0.0], "heading": 0.0}


def _check_heading_steps(waypoints):
    yaw = np.array([w[3] for w in waypoints], dtype=float)
    steps = np.abs(np.diff(yaw))
    if steps.size and steps.max() > MAX_HEADING_STEP_DEG + 1e-9:
        raise ConfigError(
            f"heading changes between waypoints must stay within {MAX_HEADING_STEP_DEG} deg"
        )
    if np.any(np.diff([w[0] for w in waypoints]) <= 0):
        raise ConfigError("waypoint times must be strictly increasing")


# ---------------------------------------------------------------- mission plan

@dataclass(frozen=True)
class Segment:
    t0: float
    t1: float
    p0: np.ndarray
    p1: np.ndarray
    phase: str


@dataclass(frozen=True)
class MissionPlan:
    segments: tuple
    ugv_start: float

    @property
    def end(self):
        return self.segments[-1].t1

    def reference(self, t):
        """Reference position and velocity in ``B`` plus the phase label."""
        for seg in self.segments:
            if t < seg.t1:
                break
        span = seg.t1 - seg.t0
        s = min(max((t - seg.t0) / span, 0.0), 1.0)
        vel = (seg.p1 - seg.p0) / span if t < seg.t1 else np.zeros(3)
        return seg.p0 + s * (seg.p1 - seg.p0), vel, seg.phase


def _leg(segments, t, p0, p1, speed, phase):
    dist = float(np.linalg.norm(p1 - p0))
    dt = max(dist / speed, BASE_DT)
    segments.append(Segment(t, t + dt, p0, p1, phase))
    return t + dt


def _hold(segments, t, p, dt, phase):
    if dt > 0:
        segments.append(Segment(t, t + dt, p, p, phase))
    return t + dt


def mission_plan(cfg):
    """Piecewise-linear reference: pre-takeoff, takeoff, task, return, landing."""
    ground = np.zeros(3)
    hover = np.array([0.0, 0.0, cfg.hover_altitude])
    segs = []
    t = _hold(segs, 0.0, ground, 0.5, "pre")
    t = _leg(segs, t, ground, hover, cfg.reference_speed, "takeoff")
    t = _hold(segs, t, hover, 1.0, "hover")
    ugv_start = t
    if cfg.kind == "S1_InOut":
        here = hover
        for sp in cfg.setpoints:
            sp = np.asarray(sp, dtype=float)
            t = _leg(segs, t, here, sp, cfg.reference_speed, "task")
            t = _hold(segs, t, sp, cfg.dwell_time, "task")
            t = _leg(segs, t, sp, hover, cfg.reference_speed, "return")
            t = _hold(segs, t, hover, cfg.dwell_time, "hover")
            here = hover
    elif cfg.kind == "S2_Linear":
        t = _hold(segs, t, hover, 2.0 * cfg.ugv_path["period"], "task")
    elif cfg.kind == "S3_Composite":
        path_len = cfg.ugv_path["waypoints"][-1][0]
        t = _hold(segs, t, hover, max(path_len - 3.0, 1.0), "task")
    else:
        t = _hold(segs, t, hover, cfg.hover_time, "task")
    # aim slightly below the deck so touchdown happens with descent still commanded
    t = _leg(segs, t, hover, np.array([0.0, 0.0, -0.05]), cfg.landing_speed, "land")
    _hold(segs, t, np.array([0.0, 0.0, -0.05]), 2.0, "land")
    return MissionPlan(tuple(segs), ugv_start)


# ----------------------------------------------------------------- UGV motion

def _ugv_planar(cfg, tau):
    path = cfg.ugv_path
    kind = path["type"]
    if kind == "static":
        x, y = path.get("position", (0.0, 0.0))
        return x, y, math.radians(path.get("heading", 0.0))
    if kind == "linear":
        heading = math.radians(path.get("heading", 0.0))
        s = 0.0 if tau <= 0 else path["amplitude"] * (1.0 - math.cos(2 * math.pi * tau / path["period"])) / 2
        return s * math.cos(heading), s * math.sin(heading), heading
    if kind == "waypoints":
        splines = _waypoint_splines(tuple(map(tuple, path["waypoints"])))
        w = path["waypoints"]
        tau = min(max(tau, w[0][0]), w[-1][0])
        return float(splines[0](tau)), float(splines[1](tau)), math.radians(float(splines[2](tau)))
    raise ConfigError(f"unknown ugv path type {kind!r}")


_SPLINE_CACHE = {}


def _waypoint_splines(waypoints):
    sp = _SPLINE_CACHE.get(waypoints)
    if sp is None:
        w = np.asarray(waypoints, dtype=float)
        # clamped ends: the UGV starts and stops at rest, so the path is C1 throughout
        sp = tuple(CubicSpline(w[:, 0], w[:, k], bc_type="clamped") for k in (1, 2, 3))
        _SPLINE_CACHE[waypoints] = sp
    return sp


def ugv_pose_at(cfg, t, plan=None):
    """Pose of frame ``B`` in ``W`` at mission time ``t``."""
    if not 0.0 <= t <= cfg.duration + 1e-9:
        raise ContractViolation(f"t={t} outside [0, {cfg.duration}]")
    plan = plan or mission_plan(cfg)
    x, y, yaw = _ugv_planar(cfg, t - plan.ugv_start)
    return Pose.from_euler((x, y, DECK_HEIGHT), yaw=yaw)


def over_deck(p_B):
    return abs(p_B[0]) <= DECK_HALF_EXTENT[0] and abs(p_B[1]) <= DECK_HALF_EXTENT[1]


# ----------------------------------------------------------------- controller

def uav_controller(est, setpoint_B, limits, feedforward=None):
    """Velocity command over ground, expressed in ``B``.

    Proportional on the position error plus the reference velocity, minus
    the estimated frame-relative velocity offset (the part of the motion the
    odometry does not see, mostly the UGV's own motion). Saturated in norm.
    """
    e = np.asarray(setpoint_B, dtype=float) - est.position
    cmd = limits.kp * e - est.velocity
    if feedforward is not None:
        cmd = cmd + feedforward
    speed = np.linalg.norm(cmd)
    if speed > limits.max_speed:
        cmd = cmd * (limits.max_speed / speed)
    return cmd


# ---------------------------------------------------------------- trial log

@dataclass
class TrialLog:
    config: dict
    seed: int
    t: np.ndarray
    phase: list
    uav_W: np.ndarray
    uav_attitude: np.ndarray
    ugv_W: np.ndarray
    ugv_yaw: np.ndarray
    truth_B: np.ndarray
    reference_B: np.ndarray
    ekf_position: np.ndarray
    ekf_velocity: np.ndarray
    ekf_cov_trace: np.ndarray
    command_B: np.ndarray
    tof_altitude: np.ndarray
    mi: list
    events: list
    calibration: dict = None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def events_of(self, kind):
        return [e for e in self.events if e["kind"] == kind]

    @property
    def touchdown(self):
        ev = self.events_of("touchdown")
        return ev[0] if ev else None

    def csv_rows(self):
        mi_at = {m["step"]: m for m in self.mi}
        header = ["t", "phase",
                  "uav_x_W", "uav_y_W", "uav_z_W", "roll", "pitch", "yaw",
                  "ugv_x_W", "ugv_y_W", "ugv_z_W", "ugv_yaw",
                  "truth_x_B", "truth_y_B", "truth_z_B",
                  "ref_x_B", "ref_y_B", "ref_z_B",
                  "ekf_x_B", "ekf_y_B", "ekf_z_B", "ekf_vx", "ekf_vy", "ekf_vz", "ekf_cov_trace",
                  "cmd_vx_B", "cmd_vy_B", "cmd_vz_B", "tof_alt",
                  "mi_x_B", "mi_y_B", "mi_z_B", "mi_accepted", "mi_active", "mi_residual"]
        yield header
        for k in range(len(self)):
            row = [f"{self.t[k]:.2f}", self.phase[k]]
            for arr in (self.uav_W[k], self.uav_attitude[k], self.ugv_W[k]):
                row += [repr(float(v)) for v in arr]
            row.append(repr(float(self.ugv_yaw[k])))
            for arr in (self.truth_B[k], self.reference_B[k], self.ekf_position[k],
                        self.ekf_velocity[k]):
                row += [repr(float(v)) for v in arr]
            row.append(repr(float(self.ekf_cov_trace[k])))
            row += [repr(float(v)) for v in self.command_B[k]]
            row.append(repr(float(self.tof_altitude[k])))
            m = mi_at.get(k)
            if m is None:
                row += [""] * 6
            else:
                row += [repr(float(v)) for v in m["position_B"]]
                row += [int(m["accepted"]), "".join(map(str, m["active"])), repr(m["residual"])]
            yield row

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.csv_rows())

    def sidecar(self):
        return {
            "seed": self.seed,
            "config": self.config,
            "calibration": self.calibration,
            "events": self.events,
            "n_steps": len(self),
            "n_mi_cycles": len(self.mi),
            "n_mi_accepted": sum(1 for m in self.mi if m["accepted"]),
            "metadata": self.metadata,
        }

    def write_sidecar(self, path):
        with open(path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------- simulation

def _streams(seed):
    names = ("phase", "calibration", "adc", "flow", "bias", "tof", "attitude", "drift")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _true_model(cfg):
    layout = cfg.layout
    anchors = tuple(replace(a, drive_current_amplitude=i)
                    for a, i in zip(layout.anchors, cfg.true_drive_currents))
    return ForwardModel(replace(layout, anchors=anchors), CoilParams(),
                        ReceiverChain(programmable_stage=cfg.rx_stage))


def nominal_model(cfg):
    """The model the estimator believes in."""
    return ForwardModel(cfg.layout, CoilParams(), ReceiverChain(programmable_stage=cfg.rx_stage))


def _attitude(roll, pitch, yaw):
    return Pose.from_euler(roll=roll, pitch=pitch, yaw=yaw)


def _rz(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _event(events, t, kind, **detail):
    events.append({"t": round(float(t), 6), "kind": kind, **detail})


def run_calibration(cfg, rng, true_model=None, nominal=None, adc=None, phases=None):
    """Static calibration on the pad (motors off) with the truth-side hardware."""
    adc = adc or AdcConfig()
    true_model = true_model or _true_model(cfg)
    nominal = nominal or nominal_model(cfg)
    level = Pose.identity()
    n = receiver_normal_in_B(level)
    amps = true_model.voltages(np.zeros(3), n)
    freqs = cfg.layout.frequencies
    phases = rng.uniform(0, 2 * np.pi, 4) if phases is None else phases
    frames = [synthesize_frame(amps, freqs, phases, adc, cfg.noise.calibration_noise_sigma, rng,
                               timestamp=-(cfg.n_cal - k) * MI_DECIMATION * BASE_DT)
              for k in range(cfg.n_cal)]
    return calibrate(frames, np.zeros(3), level, nominal, adc)


def run_trial(cfg, coeffs=None):
    """Fly one mission; deterministic given ``cfg`` (including its seed)."""
    rngs = _streams(cfg.seed)
    adc = AdcConfig()
    plan = mission_plan(cfg)
    true_model = _true_model(cfg)
    nominal = nominal_model(cfg)
    freqs = cfg.layout.frequencies
    phases = rngs["phase"].uniform(0, 2 * np.pi, 4)
    noise = cfg.noise
    events = []

    if coeffs is None:
        coeffs = run_calibration(cfg, rngs["calibration"], true_model, nominal, adc, phases)
    _event(events, 0.0, "calibrated", c=[float(c) for c in coeffs.c])
    drift = 1.0 + rngs["drift"].normal(0.0, noise.gain_drift_sigma, 4)

    n_steps = int(round(cfg.duration / BASE_DT)) + 1
    cols3 = lambda: np.full((n_steps, 3), np.nan)  # noqa: E731
    log = dict(t=np.arange(n_steps) * BASE_DT, uav_W=cols3(), uav_attitude=cols3(),
               ugv_W=cols3(), ugv_yaw=np.full(n_steps, np.nan), truth_B=cols3(),
               reference_B=cols3(), ekf_position=cols3(), ekf_velocity=cols3(),
               ekf_cov_trace=np.full(n_steps, np.nan), command_B=cols3(),
               tof_altitude=np.full(n_steps, np.nan))
    phase_log = []
    mi_log = []

    ugv0 = ugv_pose_at(cfg, 0.0, plan)
    yaw_known = ugv0.yaw
    r_known = _rz(yaw_known)
    p_W = ugv0.position.copy()
    v_W = np.zeros(3)
    accel = np.zeros(3)
    bias = np.zeros(3)
    ekf = EkfState.initial(np.zeros(3))
    tof = TofFilterState(step_threshold=2.0)
    mi_prev = MiEstimate.initial(coeffs.reference_pose.position)
    dropout = 0
    cmd_B = np.zeros(3)
    alt = 0.0
    phase = "pre"
    stop = False
    last = n_steps - 1
    sat = cfg.saturation_override

    for k in range(n_steps):
        t = k * BASE_DT
        ugv = ugv_pose_at(cfg, min(t, cfg.duration), plan)
        R_ugv = ugv.matrix
        ref, ref_vel, new_phase = plan.reference(t)
        if new_phase != phase:
            _event(events, t, new_phase)
            phase = new_phase

        # ---- truth
        if phase == "pre":
            # resting on the pad, carried by the UGV
            p_W = ugv.position.copy()
            v_W = np.zeros(3)
            accel = np.zeros(3)
        p_B = R_ugv.T @ (p_W - ugv.position)
        roll = -accel[1] / GRAVITY
        pitch = accel[0] / GRAVITY
        yaw_uav = yaw_known
        att_W = _attitude(roll, pitch, yaw_uav)
        att_B_true = Pose(np.zeros(3), (ugv.rotation.inv() * att_W.rotation).as_quat())

        # ---- odometry and prediction
        rng = rngs["flow"]
        if phase != "pre":
            bias[:2] += rngs["bias"].normal(0.0, noise.flow_bias_drift * math.sqrt(BASE_DT), 2)
        v_odom_W = v_W + bias + rng.normal(0.0, noise.flow_velocity_sigma, 3)
        try:
            if k > 0:
                ekf = ekf_predict(ekf, r_known.T @ v_odom_W, BASE_DT, cfg.ekf)

            # ---- ToF (50 Hz)
            if k % TOF_DECIMATION == 0:
                surface = 0.0 if over_deck(p_B) else -DECK_HEIGHT
                raw_d = max(p_B[2] - surface + rngs["tof"].normal(0.0, noise.tof_sigma), 0.0)
                alt, tof_new = tof_step_filter(tof, raw_d, TOF_DECIMATION * BASE_DT)
                if tof_new.mode is TofMode.STEP_HOLD:
                    _event(events, t, "tof_step", raw=float(raw_d), baseline=float(tof_new.baseline_d0))
                tof = tof_new
                if phase != "pre":
                    ekf = ekf_update_tof(ekf, alt, cfg.ekf, timestamp=t)

            # ---- MI (20 Hz)
            if not cfg.disable_mi and k % MI_DECIMATION == 0:
                amps = drift * true_model.voltages_unchecked(p_B, receiver_normal_in_B(att_B_true))[0]
                if sat and sat["start"] <= t < sat["start"] + sat["duration"]:
                    amps = amps.copy()
                    amps[sat["anchor"] - 1] = sat["amplitude"]
                frame = synthesize_frame(amps, freqs, phases, adc, noise.adc_noise_sigma,
                                         rngs["adc"], timestamp=t)
                raw = extract_amplitudes(frame, freqs, adc)
                # attitude estimate carries IMU error and the stale UGV heading
                da = rngs["attitude"].normal(0.0, noise.attitude_sigma, 2)
                att_est = _attitude(roll + da[0], pitch + da[1], yaw_uav - yaw_known)
                n_est = receiver_normal_in_B(att_est)
                record = {"step": k, "t": round(t, 6), "truth_B": p_B.tolist(),
                          "saturated": [int(s) for s in raw.saturated]}
                # warm start and outlier gate use the fused estimate once airborne;
                # ToF keeps it on the right branch where amplitudes alone fold
                prev = mi_prev
                if phase != "pre":
                    prev = replace(mi_prev, position_B=cfg.solver.box.clamp(ekf.position))
                try:
                    est = estimate_position(raw, coeffs, prev, n_est, nominal, cfg.solver, t)
                except NoActiveAnchors:
                    dropout += 1
                    record.update(position_B=[math.nan] * 3, accepted=False, active=[],
                                  residual=math.nan, iterations=0)
                else:
                    record.update(position_B=est.position_B.tolist(), accepted=est.accepted,
                                  active=list(est.active_anchors), residual=float(est.residual),
                                  iterations=est.iterations,
                                  consecutive_rejections=est.consecutive_rejections)
                    if est.accepted and phase != "pre":
                        # fixes are weak where the amplitudes are flat in position;
                        # linearised at the prediction, as a folded fix misreports its own spread
                        r_fix = cfg.ekf.r_mag + fix_covariance(
                            prev.position_B, np.subtract(est.active_anchors, 1), n_est, nominal,
                            cfg.ekf.fix_amplitude_sigma, cfg.ekf.fix_gain_sigma)
                        # a fix that jumps relative to the fused estimate is held back;
                        # the gate widens by itself as the covariance grows
                        nis = position_nis(ekf, est.position_B, cfg.ekf, r_fix)
                        record["nis"] = nis
                        if nis > cfg.ekf.gate_threshold:
                            est = replace(est, accepted=False, consecutive_rejections=(
                                mi_prev.consecutive_rejections + 1))
                            record.update(accepted=False, gated=True,
                                          consecutive_rejections=est.consecutive_rejections)
                    if est.accepted:
                        dropout = 0
                        mi_prev = est
                        if phase != "pre":
                            ekf = ekf_update_position(ekf, est.position_B, cfg.ekf, r=r_fix,
                                                      timestamp=t)
                    else:
                        dropout += 1
                        mi_prev = est
                mi_log.append(record)
                if dropout >= MAX_MI_DROPOUT and phase != "pre":
                    _event(events, t, "abort", reason="signal_loss")
                    stop = True
        except NumericalError as exc:
            _event(events, t, "abort", reason="divergence", detail=str(exc))
            stop = True
        if not ekf.is_finite() and not stop:
            _event(events, t, "abort", reason="divergence")
            stop = True

        # ---- control
        if phase == "pre":
            cmd_B = np.zeros(3)
        else:
            cmd_B = uav_controller(ekf, ref, cfg.controller, ref_vel)

        log["t"][k] = t
        log["uav_W"][k] = p_W
        log["uav_attitude"][k] = (roll, pitch, yaw_uav)
        log["ugv_W"][k] = ugv.position
        log["ugv_yaw"][k] = ugv.yaw
        log["truth_B"][k] = p_B
        log["reference_B"][k] = ref
        log["ekf_position"][k] = ekf.position
        log["ekf_velocity"][k] = ekf.velocity
        log["ekf_cov_trace"][k] = np.trace(ekf.covariance[:3, :3])
        log["command_B"][k] = cmd_B
        log["tof_altitude"][k] = alt
        phase_log.append(phase)

        if phase != "pre" and np.linalg.norm(p_B - ref) > cfg.geofence:
            _event(events, t, "geofence", error=float(np.linalg.norm(p_B - ref)))
            stop = True
        if stop or k == n_steps - 1:
            last = k
            break

        # ---- airframe: inner loop tracks commanded velocity as seen by the flow sensor
        if phase != "pre":
            target = r_known @ cmd_B - bias
            alpha = 1.0 - math.exp(-BASE_DT / VELOCITY_TAU)
            v_new = v_W + alpha * (target - v_W)
            accel = (v_new - v_W) / BASE_DT
            v_W = v_new
            p_W = p_W + v_W * BASE_DT
            ugv_next = ugv_pose_at(cfg, min(t + BASE_DT, cfg.duration), plan)
            p_B_next = ugv_next.matrix.T @ (p_W - ugv_next.position)
            if p_B_next[2] <= (0.0 if over_deck(p_B_next) else -DECK_HEIGHT) and phase == "land":
                on_deck = over_deck(p_B_next)
                p_B_next[2] = 0.0 if on_deck else -DECK_HEIGHT
                _event(events, t + BASE_DT, "touchdown", position_B=p_B_next.tolist(),
                       on_deck=bool(on_deck))
                # record the contact sample and end the mission
                k += 1
                if k < n_steps:
                    p_W = ugv_next.matrix @ p_B_next + ugv_next.position
                    log["t"][k] = t + BASE_DT
                    log["uav_W"][k] = p_W
                    log["uav_attitude"][k] = (roll, pitch, yaw_uav)
                    log["ugv_W"][k] = ugv_next.position
                    log["ugv_yaw"][k] = ugv_next.yaw
                    log["truth_B"][k] = p_B_next
                    log["reference_B"][k] = plan.reference(t + BASE_DT)[0]
                    log["ekf_position"][k] = ekf.position
                    log["ekf_velocity"][k] = ekf.velocity
                    log["ekf_cov_trace"][k] = np.trace(ekf.covariance[:3, :3])
                    log["command_B"][k] = cmd_B
                    log["tof_altitude"][k] = alt
                    phase_log.append(phase)
                    last = k
                break
            if p_B_next[2] < -DECK_HEIGHT:
                p_B_next[2] = -DECK_HEIGHT
                p_W = ugv_next.matrix @ p_B_next + ugv_next.position
                v_W[2] = max(v_W[2], 0.0)

    n = last + 1
    arrays = {key: val[:n] for key, val in log.items()}
    return TrialLog(
        config=cfg.to_dict(),
        seed=cfg.seed,
        phase=phase_log[:n],
        mi=mi_log,
        events=events,
        calibration=coeffs.to_dict(timestamp=0.0),
        **arrays,
    )


def _run_one(args):
    cfg, coeffs = args
    return run_trial(cfg, coeffs)


def run_batch(cfgs, seeds=None, coeffs=None, workers=None):
    """Run every config (or one config over several seeds).

    Returns ``(logs, report)`` with ``report`` a
    :class:`~magloc.metrics.BatchReport`. Trials share no state, so
    ``workers > 1`` runs them in separate processes with identical results.
    """
    from .metrics import batch_report

    if isinstance(cfgs, ScenarioConfig):
        cfgs = [cfgs]
    cfgs = list(cfgs)
    if seeds is not None:
        cfgs = [replace(c, seed=int(s)) for c in cfgs for s in seeds]
    jobs = [(c, coeffs) for c in cfgs]
    t0 = time.perf_counter()
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_run_one, jobs))
    else:
        logs = [_run_one(j) for j in jobs]
    for lg in logs:
        lg.metadata["batch_wall_time"] = time.perf_counter() - t0
    return logs, batch_report(logs)
