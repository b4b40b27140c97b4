import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from magloc.calibration import CalibrationCoefficients
from magloc.dsp import SpectralAmplitudes
from magloc.errors import ConfigError, NoActiveAnchors
from magloc.geometry import default_layout
from magloc.magnetics import MIN_RANGE, ForwardModel, ReceiverChain
from magloc.solver import (MiEstimate, SearchBox, SolverOptions, cost, estimate_position,
                           fix_covariance, nelder_mead, solve_position, solve_positions)

LAYOUT = default_layout()
MODEL = ForwardModel(LAYOUT, chain=ReceiverChain(100.0))
OPTS = SolverOptions()
UNITY = CalibrationCoefficients.unity()
UP = np.array([0.0, 0.0, 1.0])
ALL = np.arange(4)

inside = st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.15, 0.8)).map(np.array)


def clean(v):
    return SpectralAmplitudes(v, np.zeros(4, bool))


def test_cost_zero_at_truth():
    x = np.array([0.1, -0.2, 0.4])
    v = MODEL.voltages(x, UP)
    # zero up to rounding between the scalar and batched model paths
    assert cost(x, v, ALL, UP, MODEL) < 1e-24 * (v @ v)


def test_cost_grows_away_from_truth():
    x = np.array([0.1, 0.05, 0.45])
    v = MODEL.voltages(x, UP)
    assert cost(x + [0.1, 0, 0], v, ALL, UP, MODEL) > cost(x, v, ALL, UP, MODEL)


def test_single_anchor_cost_is_degenerate():
    # with one vertical anchor and a level receiver the field magnitude is
    # symmetric about the anchor axis, so a whole circle has zero cost
    a = LAYOUT.positions[0]
    x = a + [0.2, 0.0, 0.3]
    v = MODEL.voltages(x, UP)
    others = [a + [0.2 * np.cos(t), 0.2 * np.sin(t), 0.3] for t in (0.7, 2.0, 4.0)]
    for p in others:
        assert cost(p, v, [0], UP, MODEL) < 1e-20 * max(v[0] ** 2, 1)
        assert np.linalg.norm(p - x) > 0.05


def test_near_field_penalty_is_finite():
    p = LAYOUT.positions[1] + [0, 0, MIN_RANGE / 3]
    c = cost(p, MODEL.voltages([0, 0, 0.4], UP), ALL, UP, MODEL)
    assert np.isfinite(c) and c > 1e3


def test_nelder_mead_bowl():
    target = np.array([0.1, -0.2, 0.3])
    res = nelder_mead(lambda p: float(np.sum((p - target) ** 2)), np.zeros(3), OPTS)
    assert np.linalg.norm(res.x - target) < 1e-4
    assert res.converged


def test_nelder_mead_valley_matches_reference():
    def valley(p):
        return (0.5 - p[0]) ** 2 + 100 * (p[1] - p[0] ** 2) ** 2 + (p[2] - 0.3) ** 2

    x0 = np.array([-0.3, 0.6, 0.9])
    ours = nelder_mead(valley, x0, SolverOptions(max_iters=2000, max_restarts=20))
    ref = minimize(valley, x0, method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 20000})
    assert np.linalg.norm(ours.x - ref.x) < 1e-3
    assert np.linalg.norm(ours.x - [0.5, 0.25, 0.3]) < 1e-3


def test_nelder_mead_stays_in_box_from_corner():
    seen = []

    def f(p):
        seen.append(p.copy())
        return float(np.sum((p - [3.0, -3.0, 5.0]) ** 2))

    box = OPTS.box
    res = nelder_mead(f, box.max.copy(), OPTS)
    pts = np.array(seen)
    assert np.all(pts >= box.min - 1e-15) and np.all(pts <= box.max + 1e-15)
    assert np.allclose(res.x, [1.0, -1.0, 1.2], atol=1e-4)


def test_nelder_mead_iteration_cap():
    res = nelder_mead(lambda p: float(np.sum(p**2)), np.full(3, 0.5), SolverOptions(max_iters=3))
    assert not res.converged and res.iterations <= 3


def test_estimate_noiseless():
    x = np.array([0.10, 0.05, 0.45])
    est = estimate_position(clean(MODEL.voltages(x, UP)), UNITY,
                            MiEstimate.initial(x + [0.06, -0.05, 0.05]), UP, MODEL)
    assert est.accepted and np.linalg.norm(est.position_B - x) < 1e-3
    assert est.active_anchors == (1, 2, 3, 4)


def test_estimate_three_anchors():
    x = np.array([0.10, 0.05, 0.45])
    v = MODEL.voltages(x, UP)
    v[1] = 5.0  # a saturated channel reads garbage
    raw = SpectralAmplitudes(v, np.array([False, True, False, False]))
    est = estimate_position(raw, UNITY, MiEstimate.initial(x + [0.03, 0.03, -0.03]), UP, MODEL)
    assert est.accepted and est.active_anchors == (1, 3, 4)
    assert np.linalg.norm(est.position_B - x) < 0.01


def test_estimate_outlier_rejected():
    x = np.array([0.0, 0.0, 0.5])
    prev = MiEstimate.initial(x + [0.4, 0.0, 0.0])
    # warm start far away but a spread wide enough to reach the truth
    opts = SolverOptions(multistart_offset=0.2, max_iters=400)
    est = estimate_position(clean(MODEL.voltages(x, UP)), UNITY, prev, UP, MODEL, opts)
    assert not est.accepted
    assert np.array_equal(est.position_B, prev.position_B)
    assert est.consecutive_rejections == 1
    again = estimate_position(clean(MODEL.voltages(x, UP)), UNITY, est, UP, MODEL, opts)
    assert again.consecutive_rejections == 2


def test_estimate_all_saturated():
    with pytest.raises(NoActiveAnchors):
        estimate_position(SpectralAmplitudes(np.ones(4), np.ones(4, bool)), UNITY,
                          MiEstimate.initial(np.zeros(3)), UP, MODEL)


def test_options_validation_and_round_trip():
    with pytest.raises(ConfigError):
        SolverOptions(tol_x=0)
    with pytest.raises(ConfigError):
        SolverOptions(max_iters=0)
    with pytest.raises(ConfigError):
        SearchBox(min=(0, 0, 0), max=(1, -1, 1))
    o = SolverOptions(outlier_delta=0.2)
    assert SolverOptions.from_dict(o.to_dict()).outlier_delta == 0.2


def test_defaults():
    assert OPTS.tol_x == 1e-4 and OPTS.tol_f == 1e-12 and OPTS.max_iters == 200
    assert OPTS.initial_simplex_scale == 0.02 and OPTS.outlier_delta == 0.3
    assert np.allclose(OPTS.box.min, [-1, -1, 0]) and np.allclose(OPTS.box.max, [1, 1, 1.2])


def test_batched_matches_individual(rng):
    xs = rng.uniform([-0.4, -0.4, 0.15], [0.4, 0.4, 0.8], (12, 3))
    ns = rng.normal(size=(12, 3)) * 0.15 + UP
    ns /= np.linalg.norm(ns, axis=1)[:, None]
    v = np.array([MODEL.voltages(x, n) for x, n in zip(xs, ns)])
    v *= 1 + rng.normal(0, 0.01, v.shape)
    x0 = xs + rng.normal(0, 0.02, xs.shape)
    mask = np.ones((12, 4), bool)
    mask[3, 2] = False
    batch = solve_positions(v, mask, ns, MODEL, x0, OPTS)
    for i in range(12):
        one = solve_position(v[i], np.flatnonzero(mask[i]), ns[i], MODEL, x0[i], OPTS)
        assert np.allclose(batch[i].x, one.x, atol=1e-12)


@settings(max_examples=25)
@given(inside, st.floats(0, 0.03), st.integers(0, 1000))
def test_warm_start_monotone(x, noise, seed):
    assume(np.min(np.linalg.norm(LAYOUT.positions - x, axis=1)) > MIN_RANGE)
    rng = np.random.default_rng(seed)
    v = MODEL.voltages(x, UP) * (1 + rng.normal(0, noise, 4))
    prev = MiEstimate.initial(OPTS.box.clamp(x + rng.normal(0, 0.03, 3)))
    est = estimate_position(clean(v), UNITY, prev, UP, MODEL)
    assert est.residual <= cost(prev.position_B, v, ALL, UP, MODEL)


@settings(max_examples=20)
@given(inside, st.floats(0.2, 5.0))
def test_scale_invariance(x, k):
    assume(np.min(np.linalg.norm(LAYOUT.positions - x, axis=1)) > MIN_RANGE)
    # gain k applied to the model through the drive current
    model_k = ForwardModel(default_layout(drive_current_amplitude=k), chain=ReceiverChain(100.0))
    v = MODEL.voltages(x, UP) * [1.01, 0.99, 1.0, 1.02]
    # the cost scales by exactly k^2 everywhere, so the argmin cannot move
    probes = x + np.random.default_rng(0).normal(0, 0.05, (20, 3))
    for p in probes:
        assert np.isclose(cost(p, k * v, ALL, UP, model_k), k**2 * cost(p, v, ALL, UP, MODEL),
                          rtol=1e-9)
    # the solver stops on an absolute tol_f, so its end points agree to solver accuracy
    x0 = x + [0.02, -0.01, 0.015]
    a = solve_position(v, ALL, UP, MODEL, x0, OPTS)
    b = solve_position(k * v, ALL, UP, model_k, x0, OPTS)
    assert np.linalg.norm(a.x - b.x) < 1e-3


@settings(max_examples=25)
@given(st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-0.3, 1.6)).map(np.array),
       st.floats(0, 0.3), st.integers(0, 1000))
def test_accepted_fixes_lie_in_box(x, noise, seed):
    rng = np.random.default_rng(seed)
    probe = OPTS.box.clamp(x)
    assume(np.min(np.linalg.norm(LAYOUT.positions - probe, axis=1)) > MIN_RANGE)
    v = MODEL.voltages(probe, UP) * np.abs(1 + rng.normal(0, noise, 4))
    prev = MiEstimate.initial(OPTS.box.clamp(probe + rng.normal(0, 0.05, 3)))
    est = estimate_position(clean(v), UNITY, prev, UP, MODEL)
    if est.accepted:
        assert OPTS.box.contains(est.position_B)


@settings(max_examples=10)
@given(st.tuples(st.integers(0, 19), st.integers(0, 19), st.integers(0, 19)),
       st.integers(0, 5))
def test_grid_oracle_sample(cell, direction):
    """Sampled form of the grid-oracle check (the full grid runs in acceptance)."""
    h, lo = 0.03, np.array([-0.3, -0.3, 0.15])
    g = np.arange(21) * h
    nodes = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) + lo
    c = lo + h * (np.array(cell) + 0.5)
    v = MODEL.voltages(c, UP)
    grid_min = np.nanmin(np.sum((MODEL.grid_voltages(nodes, UP) - v) ** 2, axis=1))
    step = np.vstack([np.eye(3), -np.eye(3)])[direction] * h
    res = solve_position(v, ALL, UP, MODEL, c + step, OPTS)
    assert res.fun <= grid_min


def test_fix_covariance_matches_monte_carlo():
    """Scatter of re-solved fixes under amplitude noise against the linearisation."""
    rng = np.random.default_rng(11)
    x = np.array([0.05, -0.03, 0.45])
    v = MODEL.voltages(x, UP)
    sa, sg = 0.5e-3, 0.01
    fixes = []
    for _ in range(150):
        noisy = v + rng.normal(0, np.sqrt(sa**2 + (sg * v) ** 2))
        fixes.append(solve_position(noisy, ALL, UP, MODEL, x, OPTS).x)
    emp = np.cov(np.array(fixes).T)
    lin = fix_covariance(x, ALL, UP, MODEL, sa, sg)
    assert np.allclose(np.sqrt(np.diag(emp)), np.sqrt(np.diag(lin)), rtol=0.25)


def test_fix_covariance_scaling_and_cap():
    x = np.array([0.1, 0.05, 0.4])
    one = fix_covariance(x, ALL, UP, MODEL, 1e-3)
    assert np.allclose(fix_covariance(x, ALL, UP, MODEL, 2e-3), 4 * one)
    assert np.all(np.linalg.eigvalsh(one) > 0)
    # two anchors leave a direction unconstrained
    two = fix_covariance(x, [0, 1], UP, MODEL, 1e-3, max_variance=0.5)
    assert np.isclose(np.linalg.eigvalsh(two).max(), 0.5)
