"""One-time static gain calibration at a known reference pose.

The receiver sits on the pad at the anchor-frame origin, level. The mean
raw tone amplitude over ``n_cal`` frames divided by the model voltage gives
one lumped gain per anchor, absorbing LC resonance, drive current error and
the analogue chain.
"""
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dsp import AdcConfig, extract_amplitudes
from .errors import CalibrationSaturated, ContractViolation, DegenerateGeometry, NearFieldValidity
from .geometry import Pose, receiver_normal_in_B
from .magnetics import ForwardModel

DEFAULT_N_CAL = 32
# Model voltages below this cannot be calibrated against reliably [V].
MODEL_VOLTAGE_FLOOR = 1e-15


@dataclass(frozen=True)
class CalibrationCoefficients:
    c: np.ndarray
    reference_pose: Pose = field(default_factory=Pose.identity)
    n_cal: int = 1
    spread: np.ndarray = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.shape != (4,) or not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise ContractViolation(f"calibration coefficients must be 4 positive values: {c}")
        if self.n_cal < 1:
            raise ContractViolation("n_cal must be >= 1")
        object.__setattr__(self, "c", c)

    @classmethod
    def unity(cls, reference_pose=None):
        return cls(np.ones(4), reference_pose or Pose.identity(), 1)

    def to_dict(self, timestamp=None):
        d = {
            "anchors": {str(i + 1): float(ci) for i, ci in enumerate(self.c)},
            "reference_pose": self.reference_pose.to_dict(),
            "n_cal": self.n_cal,
        }
        if self.spread is not None:
            d["relative_std"] = {str(i + 1): float(s) for i, s in enumerate(self.spread)}
        d["metadata"] = {"timestamp": time.time() if timestamp is None else timestamp}
        return d

    @classmethod
    def from_dict(cls, d):
        anchors = d["anchors"]
        c = [anchors[str(i)] for i in range(1, 5)]
        return cls(np.array(c, dtype=float), Pose.from_dict(d["reference_pose"]), int(d["n_cal"]))


def calibrate(frames, x_ref, attitude_ref, model, adc=None, v_sat_thresh=None):
    """Per-anchor gain ``C_i = mean raw amplitude / V_model,i(x_ref)``.

    ``model`` is the nominal :class:`~magloc.magnetics.ForwardModel`.
    Raises CalibrationSaturated if any frame is saturated and
    DegenerateGeometry if a model voltage is numerically zero.
    """
    adc = adc or AdcConfig()
    frames = list(frames)
    if not frames:
        raise ContractViolation("calibration needs at least one frame")
    freqs = model.layout.frequencies
    raw = []
    for k, fr in enumerate(frames):
        amps = extract_amplitudes(fr, freqs, adc, v_sat_thresh)
        if amps.saturated.any():
            ids = (np.flatnonzero(amps.saturated) + 1).tolist()
            raise CalibrationSaturated(f"frame {k}: anchors {ids} saturated")
        raw.append(amps.amplitudes)
    raw = np.array(raw)
    v_bar = raw.mean(axis=0)

    n = receiver_normal_in_B(attitude_ref)
    try:
        v_model = model.voltages(x_ref, n)
    except NearFieldValidity as exc:
        raise DegenerateGeometry(str(exc)) from exc
    if np.any(v_model < MODEL_VOLTAGE_FLOOR):
        raise DegenerateGeometry(f"model voltage below floor at reference: {v_model}")
    spread = raw.std(axis=0, ddof=1) / v_bar if len(raw) > 1 else None
    ref = Pose(np.asarray(x_ref, dtype=float), attitude_ref.quat)
    return CalibrationCoefficients(v_bar / v_model, ref, len(frames), spread)


def apply_calibration(raw, coeffs):
    """``V_meas,i = raw_i / C_i``; saturation flags are left to the caller."""
    return np.asarray(raw.amplitudes, dtype=float) / coeffs.c


def save_coefficients(path, coeffs, timestamp=None):
    with open(path, "w") as fh:
        json.dump(coeffs.to_dict(timestamp), fh, indent=2)


def load_coefficients(path):
    with open(path) as fh:
        return CalibrationCoefficients.from_dict(json.load(fh))
