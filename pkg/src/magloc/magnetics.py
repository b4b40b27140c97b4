"""Closed-form dipole field and coil transduction (the forward model).

All voltages and currents are peak phasor amplitudes. The medium is free
space, mu0 = 4*pi*1e-7 exactly.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, NearFieldValidity
from .geometry import as_vec3, check_unit

MU0 = 4e-7 * np.pi
MU0_OVER_4PI = 1e-7
# Below roughly three coil diameters the compact-source assumption breaks down.
MIN_RANGE = 0.06


@dataclass(frozen=True)
class CoilParams:
    turns: int = 5
    radius: float = 0.019
    area: float = None

    def __post_init__(self):
        if self.turns < 1:
            raise ConfigError("coil needs at least one turn")
        area = np.pi * self.radius**2 if self.area is None else float(self.area)
        if area <= 0:
            raise ConfigError("coil area must be positive")
        object.__setattr__(self, "area", area)


@dataclass(frozen=True)
class ReceiverChain:
    """Fixed 10x stage followed by a programmable 1..100x stage."""

    programmable_stage: float = 1.0
    fixed_stage: float = 10.0

    def __post_init__(self):
        if not 1.0 <= self.programmable_stage <= 100.0:
            raise ConfigError("programmable stage gain must lie in [1, 100]")

    @property
    def gain(self):
        return self.fixed_stage * self.programmable_stage


def magnetic_moment(coil, current_amplitude):
    """Moment magnitude N * I * A [A m^2]; direction is the coil axis."""
    if not current_amplitude > 0:
        raise ContractViolation(f"drive current must be positive, got {current_amplitude}")
    return coil.turns * current_amplitude * coil.area


def dipole_field(moment_magnitude, axis, tx_pos, obs_pos, min_range=MIN_RANGE):
    """Dipole field B = mu0/(4 pi r^3) [3 (m.r_hat) r_hat - m] in tesla.

    Raises NearFieldValidity when the separation is below ``min_range``.
    """
    a = check_unit(axis, "axis")
    d = as_vec3(obs_pos, "obs_pos") - as_vec3(tx_pos, "tx_pos")
    r = float(np.linalg.norm(d))
    if r < min_range:
        raise NearFieldValidity(None, r, min_range)
    rhat = d / r
    m = moment_magnitude * a
    return MU0_OVER_4PI / r**3 * (3.0 * np.dot(m, rhat) * rhat - m)


def induced_voltage(b, rx_normal, rx_coil, chain, frequency):
    """Receive amplitude G * (2 pi f N_r A_r) * |B . n_r| in volts."""
    if not frequency > 0:
        raise ContractViolation("frequency must be positive")
    n = check_unit(rx_normal, "rx_normal")
    flux_density = abs(float(np.dot(as_vec3(b, "b"), n)))
    return chain.gain * (2.0 * np.pi * frequency * rx_coil.turns * rx_coil.area) * flux_density


class ForwardModel:
    """Precomputed per-anchor constants for fast repeated evaluation.

    ``voltages(x, n)`` is the vectorised equivalent of calling
    :func:`dipole_field` and :func:`induced_voltage` for each anchor.
    """

    def __init__(self, layout, rx_coil=None, chain=None, min_range=MIN_RANGE):
        rx_coil = rx_coil or CoilParams()
        chain = chain or ReceiverChain()
        self.layout = layout
        self.rx_coil = rx_coil
        self.chain = chain
        self.min_range = min_range
        self.positions = layout.positions
        self.axes = layout.axes
        moments = np.array([
            magnetic_moment(CoilParams(turns=a.turns, area=a.area), a.drive_current_amplitude)
            for a in layout.anchors
        ])
        transduction = chain.gain * 2.0 * np.pi * layout.frequencies * rx_coil.turns * rx_coil.area
        # V_i = scale_i / r^3 * |3 (a.r_hat)(r_hat.n) - a.n|
        self.scale = MU0_OVER_4PI * moments * transduction
        self._pp = np.einsum("ij,ij->i", self.positions, self.positions)
        self._ap = np.einsum("ij,ij->i", self.axes, self.positions)
        self._pa = np.hstack([self.positions.T, self.axes.T])
        self._n_cache = (None, None)

    def _normal_terms(self, n):
        key = n.tobytes()
        if self._n_cache[0] != key:
            self._n_cache = (key, (np.column_stack([self._pa, n]),
                                   self.positions @ n, self.axes @ n))
        return self._n_cache[1]

    def voltages_unchecked(self, x, n):
        """Return (voltages, separations) without raising on near-field points."""
        d = x - self.positions
        r2 = np.einsum("ij,ij->i", d, d)
        r = np.sqrt(r2)
        ad = self.axes @ x - np.einsum("ij,ij->i", self.axes, self.positions)
        dn = d @ n
        an = self.axes @ n
        v = self.scale / (r2 * r) * np.abs(3.0 * ad * dn / r2 - an)
        return v, r

    def voltages(self, x, n):
        x = as_vec3(x, "x")
        n = check_unit(n, "rx_normal")
        v, r = self.voltages_unchecked(x, n)
        bad = np.flatnonzero(r < self.min_range)
        if bad.size:
            i = int(bad[0])
            raise NearFieldValidity(i + 1, float(r[i]), self.min_range)
        return v

    def batch_voltages(self, points, n):
        """Voltages and separations at many points, both shaped (M, 4).

        ``n`` is one receiver normal or one per point, shape (M, 3).
        """
        pts = np.asarray(points, dtype=float)
        n = np.asarray(n, dtype=float)
        sq = np.einsum("ij,ij->i", pts, pts)[:, None]
        if n.ndim == 1:
            # one matmul yields p.P_i, p.a_i and p.n together
            mat, pn, an = self._normal_terms(n)
            proj = pts @ mat
            dn = proj[:, 8:] - pn
        else:
            proj = pts @ self._pa
            dn = np.einsum("ij,ij->i", pts, n)[:, None] - n @ self.positions.T
            an = n @ self.axes.T
        # |p - P|^2 expanded so everything reduces to small matmuls
        r2 = sq - 2.0 * proj[:, :4] + self._pp
        r = np.sqrt(r2)
        ad = proj[:, 4:8] - self._ap
        return self.scale / (r2 * r) * np.abs(3.0 * ad * dn / r2 - an), r

    def grid_voltages(self, points, n):
        """Voltages at many points, shape (M, 4); near-field entries are NaN."""
        v, r = self.batch_voltages(points, n)
        v[r < self.min_range] = np.nan
        return v


def forward_voltages(x_B, rx_normal_B, layout, rx_coil=None, chain=None, min_range=MIN_RANGE):
    """Model voltages of the four anchors at receiver position ``x_B``."""
    return ForwardModel(layout, rx_coil, chain, min_range).voltages(x_B, rx_normal_B)
