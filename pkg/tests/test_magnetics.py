import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from magloc.errors import ConfigError, ContractViolation, NearFieldValidity
from magloc.geometry import default_layout
from magloc.magnetics import (MIN_RANGE, CoilParams, ForwardModel, ReceiverChain, dipole_field,
                              forward_voltages, induced_voltage, magnetic_moment)

COIL = CoilParams(turns=5, radius=0.019)
M_COIL = 5.670574e-3          # 5 * 1 A * pi * 0.019^2
B_AXIS_025 = 7.258335e-8       # 2e-7 * m / 0.25^3
V_EXAMPLE = 5.430e-3           # 10 * 2 pi 210e3 * 5 * A * B_AXIS_025

unit = st.tuples(*[st.floats(-1, 1)] * 3).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: v / np.linalg.norm(v))
points = st.tuples(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(0.05, 1.0)).map(np.array)


def test_coil_area():
    assert np.isclose(COIL.area, np.pi * 0.019**2, rtol=0, atol=1e-12)


def test_moment_default_coil():
    assert np.isclose(magnetic_moment(COIL, 1.0), M_COIL, rtol=1e-6)


def test_moment_unit_and_linear():
    assert magnetic_moment(CoilParams(1, area=1.0), 1.0) == 1.0
    assert np.isclose(magnetic_moment(COIL, 2.0), 2 * magnetic_moment(COIL, 1.0))


def test_moment_rejects_nonpositive_current():
    with pytest.raises(ContractViolation):
        magnetic_moment(COIL, 0.0)


def test_on_axis_field():
    b = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), (0, 0, 0.25))
    assert np.isclose(np.linalg.norm(b), B_AXIS_025, rtol=1e-5)
    assert np.allclose(b / np.linalg.norm(b), (0, 0, 1))


def test_equatorial_half_and_antiparallel():
    axial = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), (0, 0, 0.25))
    eq = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), (0.25, 0, 0))
    assert np.isclose(np.linalg.norm(eq), 0.5 * np.linalg.norm(axial), rtol=1e-12)
    assert np.allclose(eq / np.linalg.norm(eq), (0, 0, -1))


def test_doubling_distance():
    b1 = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), (0.1, 0.2, 0.3))
    b2 = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), (0.2, 0.4, 0.6))
    assert np.isclose(np.linalg.norm(b1) / np.linalg.norm(b2), 8.0)


def test_near_field_raises():
    with pytest.raises(NearFieldValidity):
        dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), (0, 0, MIN_RANGE / 2))


def test_induced_voltage_example():
    v = induced_voltage((0, 0, B_AXIS_025), (0, 0, 1), COIL, ReceiverChain(1.0), 210e3)
    assert np.isclose(v, V_EXAMPLE, rtol=1e-3)


def test_induced_voltage_perpendicular_and_linear():
    assert induced_voltage((1e-7, 0, 0), (0, 0, 1), COIL, ReceiverChain(), 2e5) == 0.0
    v1 = induced_voltage((0, 0, 1e-7), (0, 0, 1), COIL, ReceiverChain(1.0), 2e5)
    v2 = induced_voltage((0, 0, 1e-7), (0, 0, 1), COIL, ReceiverChain(2.0), 2e5)
    assert np.isclose(v2, 2 * v1)
    # sign of the flux does not matter
    assert np.isclose(induced_voltage((0, 0, -1e-7), (0, 0, 1), COIL, ReceiverChain(1.0), 2e5), v1)


def test_receiver_chain_range():
    assert ReceiverChain(100).gain == 1000
    with pytest.raises(ConfigError):
        ReceiverChain(150)


def test_origin_symmetric(layout):
    v = forward_voltages(np.zeros(3) + [0, 0, 0.1], (0, 0, 1), layout)
    assert np.all(v > 0)
    # the corners are mirror images, so only the frequency factor differs
    per_hz = v / layout.frequencies
    assert np.allclose(per_hz, per_hz[0], rtol=1e-12)


def test_above_anchor_one_dominates(layout):
    x = layout.positions[0] + [0, 0, 0.45]
    v = forward_voltages(x, (0, 0, 1), layout)
    assert np.argmax(v) == 0 and np.all(v[0] > v[1:])


def test_horizontal_normal_on_axis_gives_zero(layout):
    x = layout.positions[0] + [0, 0, 0.3]
    v = forward_voltages(x, (1, 0, 0), layout)
    assert abs(v[0]) < 1e-15


def test_forward_model_matches_closed_form(layout):
    x, n = np.array([0.1, -0.05, 0.4]), np.array([0.1, 0.2, 0.97])
    n /= np.linalg.norm(n)
    ref = []
    for a in layout.anchors:
        b = dipole_field(magnetic_moment(CoilParams(a.turns, area=a.area), a.drive_current_amplitude),
                         a.axis_B, a.position_B, x)
        ref.append(induced_voltage(b, n, CoilParams(), ReceiverChain(), a.frequency))
    assert np.allclose(forward_voltages(x, n, layout), ref, rtol=1e-12)


def test_batch_matches_pointwise(model, rng):
    pts = rng.uniform([-0.5, -0.5, 0.1], [0.5, 0.5, 0.9], (50, 3))
    ns = rng.normal(size=(50, 3)) * 0.2 + [0, 0, 1]
    ns /= np.linalg.norm(ns, axis=1)[:, None]
    shared, _ = model.batch_voltages(pts, ns[0])
    per_row, _ = model.batch_voltages(pts, ns)
    for i in range(50):
        assert np.allclose(shared[i], model.voltages(pts[i], ns[0]), rtol=1e-10)
        assert np.allclose(per_row[i], model.voltages(pts[i], ns[i]), rtol=1e-10)


def test_forward_voltages_near_field(layout):
    with pytest.raises(NearFieldValidity) as exc:
        forward_voltages(layout.positions[2] + [0, 0, 0.01], (0, 0, 1), layout)
    assert exc.value.anchor == 3


@given(unit, st.floats(0.1, 1.0), st.floats(1.1, 5.0))
def test_inverse_cube(direction, r, k):
    b1 = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), r * direction)
    b2 = dipole_field(M_COIL, (0, 0, 1), (0, 0, 0), k * r * direction)
    assert np.isclose(np.linalg.norm(b2), np.linalg.norm(b1) / k**3, rtol=1e-9, atol=0)


@given(unit, st.floats(0.1, 1.0), st.floats(-np.pi, np.pi))
def test_rotational_symmetry_about_axis(direction, r, phi):
    axis = np.array([0.3, -0.2, 0.9]) / np.linalg.norm([0.3, -0.2, 0.9])
    rot = Rotation.from_rotvec(phi * axis)
    p = r * direction
    b = dipole_field(M_COIL, axis, (0, 0, 0), p)
    b_rot = dipole_field(M_COIL, axis, (0, 0, 0), rot.apply(p))
    assert np.allclose(rot.apply(b), b_rot, rtol=1e-9, atol=1e-20)


@given(points)
def test_divergence_free(p):
    a = np.array([0.22, 0.125, 0.0])
    assume(np.linalg.norm(p - a) > 0.1)
    h = 1e-4
    div = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        div += (dipole_field(M_COIL, (0, 0, 1), a, p + e)[i]
                - dipole_field(M_COIL, (0, 0, 1), a, p - e)[i]) / (2 * h)
    mag = np.linalg.norm(dipole_field(M_COIL, (0, 0, 1), a, p))
    assert abs(div) < 1e-6 * mag / h


@given(points, unit)
def test_continuity(p, n):
    model = ForwardModel(default_layout())
    assume(np.min(np.linalg.norm(model.positions - p, axis=1)) > MIN_RANGE + 1e-3)
    v0 = model.voltages(p, n)
    v1 = model.voltages(p + 1e-6 * np.array([1.0, -1.0, 1.0]) / np.sqrt(3), n)
    # |B.n| has kinks at its nulls, so bound the change by the field scale, not per anchor
    assert np.all(np.abs(v1 - v0) < 1e-3 * v0.max())


@given(points, unit, st.floats(0.1, 10.0), st.floats(1.0, 100.0))
def test_linearity_in_current_and_gain(p, n, k, stage):
    layout = default_layout()
    assume(np.min(np.linalg.norm(layout.positions - p, axis=1)) > MIN_RANGE)
    base = ForwardModel(layout, chain=ReceiverChain(1.0)).voltages(p, n)
    scaled_i = default_layout(drive_current_amplitude=k)
    vi = ForwardModel(scaled_i, chain=ReceiverChain(1.0)).voltages(p, n)
    vg = ForwardModel(layout, chain=ReceiverChain(stage)).voltages(p, n)
    assert np.allclose(vi, k * base, rtol=1e-9)
    assert np.allclose(vg, stage * base, rtol=1e-9)
