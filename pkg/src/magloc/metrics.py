"""Trial scoring: RMSE, geofence/abort success rule, touchdown accuracy."""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, NotLanded
from .geometry import PAD_RADIUS

GEOFENCE = 0.5
# Scenarios scored against the commanded reference rather than the estimate.
TRACKING_KINDS = ("S2_Linear", "S3_Composite")


def _pair(est, gt):
    a = np.atleast_2d(np.asarray(est, dtype=float))
    b = np.atleast_2d(np.asarray(gt, dtype=float))
    if a.shape != b.shape:
        raise ContractViolation(f"series shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ContractViolation("need at least one sample")
    return a, b


def rmse_3d(est, gt):
    """sqrt(mean ||est - gt||^2) over time-aligned (N, 3) series."""
    a, b = _pair(est, gt)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def axiswise_rmse(est, gt):
    a, b = _pair(est, gt)
    return np.sqrt(np.mean((a - b) ** 2, axis=0))


def classify_errors(errors, aborted=False, geofence=GEOFENCE):
    """Success rule on an instantaneous error series; see :func:`classify_success`."""
    errors = np.asarray(errors, dtype=float)
    if errors.size and np.nanmax(errors) > geofence:
        return False, "Geofence"
    if aborted:
        return False, "Abort"
    return True, None


def _flight(log):
    """Mask of samples after the UAV left the pad."""
    return np.array([p != "pre" for p in log.phase], dtype=bool)


def classify_success(log, geofence=GEOFENCE):
    """``(success, reason)``; a trial fails on any true-vs-reference error
    above ``geofence`` or on any abort event. Pad containment never gates it."""
    m = _flight(log)
    err = np.linalg.norm(log.truth_B[m] - log.reference_B[m], axis=1)
    aborted = any(e["kind"] == "abort" for e in log.events)
    breached = any(e["kind"] == "geofence" for e in log.events)
    if breached:
        return False, "Geofence"
    return classify_errors(err, aborted, geofence)


def touchdown_error(log, layout=None):
    """Planar distance of the touchdown point from the pad centre (``B``).

    The pad boundary is inclusive. Raises NotLanded without a touchdown event.
    """
    td = log.touchdown
    if td is None:
        raise NotLanded("trial has no touchdown event")
    centre = np.zeros(3) if layout is None else layout.pad_center_B
    radius = PAD_RADIUS if layout is None else layout.pad_radius
    p = np.asarray(td["position_B"], dtype=float)
    d = float(np.hypot(p[0] - centre[0], p[1] - centre[1]))
    return d, d <= radius


@dataclass
class TrialReport:
    kind: str
    seed: int
    rmse_3d: float
    rmse_axiswise: list
    success: bool
    failure_reason: str = None
    touchdown_error: float = None
    touchdown_inside_pad: bool = None
    scored_against: str = "estimate"

    def to_dict(self):
        return asdict(self)


def trial_report(log, layout=None, against=None, geofence=GEOFENCE):
    """Score one trial.

    Static scenarios compare the EKF estimate with the true relative
    position; tracking scenarios compare the true relative position with
    the commanded reference. Either way only airborne samples count,
    landing included.
    """
    kind = log.config.get("kind", "")
    if against is None:
        against = "reference" if kind in TRACKING_KINDS else "estimate"
    m = _flight(log)
    ref = log.reference_B[m] if against == "reference" else log.ekf_position[m]
    truth = log.truth_B[m]
    if truth.shape[0] == 0:
        rmse, axes = float("nan"), [float("nan")] * 3
    else:
        rmse, axes = rmse_3d(ref, truth), axiswise_rmse(ref, truth).tolist()
    ok, reason = classify_success(log, geofence)
    td, inside = (None, None)
    if log.touchdown is not None:
        td, inside = touchdown_error(log, layout)
    return TrialReport(kind, int(log.seed), rmse, axes, ok, reason, td, inside, against)


@dataclass
class BatchReport:
    trials: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.trials)

    @property
    def mean_rmse(self):
        vals = [t.rmse_3d for t in self.trials if np.isfinite(t.rmse_3d)]
        return float(np.mean(vals)) if vals else None

    @property
    def success_rate(self):
        return float(np.mean([t.success for t in self.trials])) if self.trials else None

    @property
    def touchdown_inside_count(self):
        return sum(1 for t in self.trials if t.touchdown_inside_pad)

    def to_dict(self):
        return {
            "n_trials": self.n,
            "mean_rmse_3d": self.mean_rmse,
            "success_rate": self.success_rate,
            "touchdown_inside_pad": self.touchdown_inside_count,
            "trials": [t.to_dict() for t in self.trials],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        """Trial rows in cm, then a mean row and a success-rate footer."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "kind", "seed", "rmse_3d_cm", "rmse_x_cm", "rmse_y_cm", "rmse_z_cm",
                    "success", "failure_reason", "touchdown_error_cm", "inside_pad"])
        for i, t in enumerate(self.trials, 1):
            cm = [f"{100 * v:.2f}" for v in [t.rmse_3d, *t.rmse_axiswise]]
            td = "" if t.touchdown_error is None else f"{100 * t.touchdown_error:.2f}"
            w.writerow([i, t.kind, t.seed, *cm, "OK" if t.success else "FAIL",
                        t.failure_reason or "", td,
                        "" if t.touchdown_inside_pad is None else int(t.touchdown_inside_pad)])
        if self.trials:
            mean = "" if self.mean_rmse is None else f"{100 * self.mean_rmse:.2f}"
            w.writerow(["mean", "", "", mean] + [""] * 7)
            w.writerow(["success_rate", "", "", f"{100 * self.success_rate:.0f}%"] + [""] * 7)
        return buf.getvalue()


def batch_report(logs, layout=None):
    return BatchReport([trial_report(lg, layout) for lg in logs])
