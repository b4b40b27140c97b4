"""Frames, rigid transforms and the fixed anchor layout.

Three frames are used throughout:

* ``W`` -- world frame (simulation truth lives here),
* ``B`` -- UGV / anchor frame, origin at the pad centre at coil height,
* ``T`` -- UAV body frame carrying the receive coil.

Anchor positions are a convention: the coils sit at the corners of the
0.44 m x 0.25 m pad rectangle (long side along the UGV x axis), all in the
z = 0 plane of ``B`` with vertical axes.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, ContractViolation

UNIT_TOL = 1e-9

# Excitation frequencies of anchors 1..4 [Hz].
ANCHOR_FREQUENCIES = (210e3, 199e3, 189e3, 181e3)
PAD_LENGTH = 0.44
PAD_WIDTH = 0.25
PAD_RADIUS = 0.11


def as_vec3(v, name="vector"):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} must be 3 finite components, got {v!r}")
    return a


def check_unit(v, name="direction"):
    a = as_vec3(v, name)
    if abs(np.linalg.norm(a) - 1.0) > UNIT_TOL:
        raise ContractViolation(f"{name} must have unit norm, got |v|={np.linalg.norm(a)!r}")
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``p_parent = R @ p_child + position``.

    ``quat`` is scalar-last ``(x, y, z, w)`` and is renormalised on
    construction.
    """

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        pos = as_vec3(self.position, "position")
        q = np.asarray(self.quat, dtype=float).reshape(-1)
        n = np.linalg.norm(q)
        if q.shape != (4,) or not np.isfinite(n) or n < 1e-12:
            raise ContractViolation(f"invalid quaternion {self.quat!r}")
        q = q / n
        # canonical sign keeps equality/serialisation stable
        if q[3] < 0:
            q = -q
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_euler(cls, position=(0.0, 0.0, 0.0), roll=0.0, pitch=0.0, yaw=0.0):
        """Build from intrinsic Z-Y-X (yaw, pitch, roll) angles in radians."""
        q = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_quat()
        return cls(np.asarray(position, dtype=float), q)

    @property
    def rotation(self):
        return Rotation.from_quat(self.quat)

    @property
    def matrix(self):
        return self.rotation.as_matrix()

    @property
    def yaw(self):
        return float(self.rotation.as_euler("ZYX")[0])

    def inverse(self):
        r_inv = self.rotation.inv()
        return Pose(-r_inv.apply(self.position), r_inv.as_quat())

    def compose(self, other):
        """``self * other``: apply ``other`` first, then ``self``."""
        r = self.rotation
        return Pose(r.apply(other.position) + self.position, (r * other.rotation).as_quat())

    def to_dict(self):
        return {"position": self.position.tolist(), "quat": self.quat.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["position"], dtype=float),
                   np.asarray(d.get("quat", [0.0, 0.0, 0.0, 1.0]), dtype=float))


def transform_point(pose, p):
    """Map a point from the child frame of ``pose`` into its parent frame."""
    return pose.matrix @ as_vec3(p, "point") + pose.position


def rotate_vector(pose, v):
    """Rotation-only part of :func:`transform_point` (directions, velocities)."""
    return pose.matrix @ as_vec3(v, "vector")


def receiver_normal_in_B(attitude, n_T=(0.0, 0.0, 1.0)):
    """Receive-coil normal expressed in the anchor frame.

    ``attitude`` is the UAV orientation relative to ``B`` (only its rotation
    is used). Raises ContractViolation if ``n_T`` is not a unit vector.
    """
    n = check_unit(n_T, "n_T")
    out = attitude.matrix @ n
    return out / np.linalg.norm(out)


@dataclass(frozen=True)
class AnchorConfig:
    position_B: np.ndarray
    frequency: float
    axis_B: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    drive_current_amplitude: float = 1.0
    turns: int = 5
    area: float = np.pi * 0.019**2

    def __post_init__(self):
        object.__setattr__(self, "position_B", as_vec3(self.position_B, "position_B"))
        axis = check_unit(self.axis_B, "axis_B")
        if not np.allclose(axis, [0.0, 0.0, 1.0], atol=UNIT_TOL):
            raise ConfigError("anchor axes must be vertical in frame B")
        object.__setattr__(self, "axis_B", axis)
        if self.frequency <= 0 or self.drive_current_amplitude <= 0:
            raise ConfigError("anchor frequency and drive current must be positive")
        if self.turns < 1 or self.area <= 0:
            raise ConfigError("anchor coil needs turns >= 1 and positive area")

    def to_dict(self):
        return {
            "position_B": self.position_B.tolist(),
            "axis_B": self.axis_B.tolist(),
            "frequency": self.frequency,
            "drive_current_amplitude": self.drive_current_amplitude,
            "turns": self.turns,
            "area": self.area,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class AnchorLayout:
    anchors: tuple
    pad_center_B: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pad_radius: float = PAD_RADIUS

    def __post_init__(self):
        anchors = tuple(self.anchors)
        if len(anchors) != 4:
            raise ConfigError(f"layout needs exactly 4 anchors, got {len(anchors)}")
        freqs = [a.frequency for a in anchors]
        if len(set(freqs)) != 4:
            raise ConfigError(f"anchor frequencies must be pairwise distinct: {freqs}")
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "pad_center_B", as_vec3(self.pad_center_B, "pad_center_B"))

    @property
    def positions(self):
        return np.array([a.position_B for a in self.anchors])

    @property
    def axes(self):
        return np.array([a.axis_B for a in self.anchors])

    @property
    def frequencies(self):
        return np.array([a.frequency for a in self.anchors])

    def to_dict(self):
        return {
            "anchors": [a.to_dict() for a in self.anchors],
            "pad_center_B": self.pad_center_B.tolist(),
            "pad_radius": self.pad_radius,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            anchors=tuple(AnchorConfig.from_dict(a) for a in d["anchors"]),
            pad_center_B=d.get("pad_center_B", [0.0, 0.0, 0.0]),
            pad_radius=d.get("pad_radius", PAD_RADIUS),
        )


def default_layout(pad_center=(0.0, 0.0, 0.0), frequencies=ANCHOR_FREQUENCIES, **anchor_kw):
    """Corner layout on the 0.44 x 0.25 m pad.

    Anchors 1..4 run clockwise seen from above, starting front-left (+x, +y).
    """
    c = as_vec3(pad_center, "pad_center")
    hx, hy = PAD_LENGTH / 2, PAD_WIDTH / 2
    corners = [(hx, hy), (hx, -hy), (-hx, -hy), (-hx, hy)]
    anchors = tuple(
        AnchorConfig(position_B=np.array([c[0] + dx, c[1] + dy, 0.0]), frequency=f, **anchor_kw)
        for (dx, dy), f in zip(corners, frequencies)
    )
    return AnchorLayout(anchors=anchors, pad_center_B=c, pad_radius=PAD_RADIUS)


def anchors_in_world(ugv_pose, layout):
    """Anchor positions and axes mapped through the UGV pose, as two (4, 3) arrays."""
    R = ugv_pose.matrix
    positions = layout.positions @ R.T + ugv_pose.position
    axes = layout.axes @ R.T
    return positions, axes
