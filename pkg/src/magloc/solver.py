"""Inverse magnetic problem: warm-started, box-clamped Nelder-Mead.

The objective is the squared voltage residual over the anchors that are
still in their linear range. Each runtime cycle starts the simplex around
the previous accepted estimate and rejects fixes that jump further than
``outlier_delta``.

Amplitude-only measurements fold the field at each anchor's null cone, so
the cost has spurious local minima a few centimetres from the true one.
The runtime loop therefore launches a handful of simplices around the warm
start (the warm start itself plus +/- ``multistart_offset`` along each
axis) and keeps the lowest-cost result. All simplices advance in lockstep
so one vectorised model evaluation serves every start.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import apply_calibration
from .errors import ConfigError, NoActiveAnchors
from .geometry import as_vec3

# Penalty weight per near-field anchor, relative to the measurement energy.
NEAR_FIELD_PENALTY = 1e6


@dataclass(frozen=True)
class SearchBox:
    min: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0, 0.0]))
    max: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.2]))

    def __post_init__(self):
        lo, hi = as_vec3(self.min, "box.min"), as_vec3(self.max, "box.max")
        if not np.all(lo < hi):
            raise ConfigError(f"box min must be below max component-wise: {lo} vs {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def clamp(self, x):
        return np.minimum(np.maximum(x, self.min), self.max)

    def contains(self, x):
        return bool(np.all(x >= self.min) and np.all(x <= self.max))


@dataclass(frozen=True)
class SolverOptions:
    box: SearchBox = field(default_factory=SearchBox)
    initial_simplex_scale: float = 0.02
    tol_x: float = 1e-4
    tol_f: float = 1e-12
    max_iters: int = 200
    outlier_delta: float = 0.30
    multistart_offset: float = 0.03
    max_restarts: int = 8

    def __post_init__(self):
        if min(self.initial_simplex_scale, self.tol_x, self.tol_f, self.outlier_delta) <= 0:
            raise ConfigError("solver scales and tolerances must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.multistart_offset < 0 or self.max_restarts < 0:
            raise ConfigError("multistart_offset and max_restarts must be non-negative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "box" in d:
            d["box"] = SearchBox(**d["box"])
        return cls(**d)

    def to_dict(self):
        return {
            "box": {"min": self.box.min.tolist(), "max": self.box.max.tolist()},
            "initial_simplex_scale": self.initial_simplex_scale,
            "tol_x": self.tol_x,
            "tol_f": self.tol_f,
            "max_iters": self.max_iters,
            "outlier_delta": self.outlier_delta,
            "multistart_offset": self.multistart_offset,
            "max_restarts": self.max_restarts,
        }


@dataclass(frozen=True)
class MiEstimate:
    position_B: np.ndarray
    residual: float = 0.0
    active_anchors: tuple = (1, 2, 3, 4)
    accepted: bool = True
    iterations: int = 0
    timestamp: float = 0.0
    converged: bool = True
    consecutive_rejections: int = 0

    @classmethod
    def initial(cls, x_ref, timestamp=0.0):
        """Seed estimate for the first cycle: the calibration reference point."""
        return cls(position_B=as_vec3(x_ref, "x_ref"), timestamp=timestamp)


@dataclass
class NelderMeadResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool


def batch_cost(points, v_meas, active, rx_normal_B, model):
    """:func:`cost` evaluated at each row of ``points``."""
    v_model, r = model.batch_voltages(points, rx_normal_B)
    if active.size < v_model.shape[1]:
        v_model, r, v_meas = v_model[:, active], r[:, active], v_meas[active]
    res = v_model - v_meas
    total = np.einsum("ij,ij->i", res, res)
    if r.min() < model.min_range:
        energy = float(v_meas @ v_meas) or 1.0
        total = total + NEAR_FIELD_PENALTY * energy * (r < model.min_range).sum(axis=1)
    return total


def cost(x, v_meas, active, rx_normal_B, model):
    """Squared residual between model and calibrated voltages over ``active``.

    ``active`` holds 0-based anchor indices. Anchors closer than the dipole
    validity range add a large finite penalty instead of raising.
    """
    x = np.asarray(x, dtype=float).reshape(1, 3)
    v = np.asarray(v_meas, dtype=float)
    return float(batch_cost(x, v, np.asarray(active), np.asarray(rx_normal_B, dtype=float), model)[0])


def _initial_simplices(x0s, scale, box):
    k, n = x0s.shape
    sims = np.repeat(x0s[:, None, :], n + 1, axis=1)
    for i in range(n):
        step = np.where(x0s[:, i] + scale > box.max[i], -scale, scale)
        sims[:, i + 1, i] += step
    return box.clamp(sims)


def _run_lockstep(fbatch, x0s, owner, opts, budgets, alpha, gamma, rho, sigma):
    """Advance one simplex per start until each converges or spends its budget.

    ``fbatch(points, owner)`` receives, alongside the points, the index of
    the start each point belongs to. Finished simplices are carried along
    and masked out of every update.
    """
    lo, hi = opts.box.min, opts.box.max
    k, n = x0s.shape
    sims = _initial_simplices(x0s, opts.initial_simplex_scale, opts.box)
    fs = fbatch(sims.reshape(-1, n), np.repeat(owner, n + 1)).reshape(k, n + 1)
    iters = np.zeros(k, dtype=int)
    converged = np.zeros(k, dtype=bool)
    ar = np.arange(k)
    rows = ar[:, None]
    owner4 = np.tile(owner, 4)
    coef = np.array([alpha, 0.0, 0.0, -rho])[:, None, None]
    grow = np.array([gamma, rho])[:, None, None]
    tol_x, tol_f = opts.tol_x, opts.tol_f

    while True:
        order = np.argsort(fs, axis=1, kind="stable")
        sims = sims[rows, order]
        fs = fs[rows, order]
        diameter = np.abs(sims[:, 1:] - sims[:, :1]).max(axis=(1, 2))
        converged |= (diameter <= tol_x) & (fs[:, -1] - fs[:, 0] <= tol_f)
        live = ~converged & (iters < budgets)
        if not live.any():
            break
        iters += live
        worst = sims[:, -1]
        centroid = sims[:, :n].sum(axis=1) / n
        # candidates: reflection, expansion, outside and inside contraction,
        # all clamped; expansion and outside contraction follow the clamped
        # reflection. Every branch is evaluated speculatively so a single
        # batched call serves every simplex.
        cand = np.minimum(np.maximum(centroid + coef * (centroid - worst), lo), hi)
        cand[1:3] = np.minimum(np.maximum(centroid + grow * (cand[0] - centroid), lo), hi)
        fc = fbatch(cand.reshape(-1, n), owner4).reshape(4, k)
        fr, fe, foc, fic = fc

        expand = fr < fs[:, 0]
        accept_r = fr < fs[:, -2]
        outside = ~accept_r & (fr < fs[:, -1])
        inside = ~accept_r & ~outside
        # index into cand of the vertex that replaces the worst one
        choice = np.where(expand & (fe < fr), 1, 0)
        choice[outside & (foc <= fr)] = 2
        choice[inside & (fic < fs[:, -1])] = 3
        shrink = live & ~accept_r & (choice == 0)
        repl = live & ~shrink
        sims[repl, -1] = cand[choice[repl], ar[repl]]
        fs[repl, -1] = fc[choice[repl], ar[repl]]
        if shrink.any():
            idx = np.flatnonzero(shrink)
            ss = sims[idx]
            ss[:, 1:] = ss[:, :1] + sigma * (ss[:, 1:] - ss[:, :1])
            sims[idx] = ss
            fs[idx, 1:] = fbatch(ss[:, 1:].reshape(-1, n),
                                 np.repeat(owner[idx], n)).reshape(-1, n)

    return sims[:, 0].copy(), fs[:, 0].copy(), iters, converged


def nelder_mead_multi(fbatch, x0s, opts=None, alpha=1.0, gamma=2.0, rho=0.5, sigma=0.5):
    """Independent box-clamped Nelder-Mead runs from each row of ``x0s``.

    ``fbatch(points, owner)`` maps an (M, n) array of points to M objective
    values; ``owner`` gives the row of ``x0s`` each point descends from, so
    one call can serve starts that belong to different problems. Each
    run uses the standard reflection / expansion / contraction / shrink
    moves with candidate vertices clamped into ``opts.box``. A run has
    converged when its simplex diameter is at most ``tol_x`` and its value
    spread at most ``tol_f``. A collapsed simplex can stall in a narrow
    valley, so converged runs restart from a fresh simplex at their best
    point until a restart moves less than ``tol_x``. Every run stops after
    ``max_iters`` iterations in total, flagged non-converged.

    Returns one :class:`NelderMeadResult` per start.
    """
    opts = opts or SolverOptions()
    x = opts.box.clamp(np.atleast_2d(np.asarray(x0s, dtype=float)))
    k = x.shape[0]
    best_x, best_f = x.copy(), np.full(k, np.inf)
    total = np.zeros(k, dtype=int)
    conv = np.zeros(k, dtype=bool)
    todo = np.arange(k)
    for attempt in range(opts.max_restarts + 1):
        budgets = opts.max_iters - total[todo]
        rx, rf, it, rc = _run_lockstep(fbatch, x[todo], todo, opts, budgets, alpha, gamma, rho, sigma)
        moved = np.abs(rx - x[todo]).max(axis=1)
        total[todo] += it
        conv[todo] = rc
        better = rf <= best_f[todo]
        best_x[todo[better]] = rx[better]
        best_f[todo[better]] = rf[better]
        x[todo] = best_x[todo]
        again = rc & (total[todo] < opts.max_iters)
        if attempt > 0:
            again &= moved > opts.tol_x
        todo = todo[again]
        if todo.size == 0:
            break
    return [NelderMeadResult(best_x[i].copy(), float(best_f[i]), int(total[i]), bool(conv[i]))
            for i in range(k)]


def nelder_mead(objective, x0, opts=None, **coeffs):
    """Single-start Nelder-Mead on a scalar ``objective``; see :func:`nelder_mead_multi`."""

    def fbatch(points, owner):
        return np.array([objective(p) for p in points])

    return nelder_mead_multi(fbatch, np.asarray(x0, dtype=float)[None, :], opts, **coeffs)[0]


def warm_starts(x_prev, opts):
    """The warm start followed by its axis-aligned neighbours."""
    x_prev = np.asarray(x_prev, dtype=float)
    if opts.multistart_offset == 0:
        return x_prev[None, :]
    d = opts.multistart_offset * np.eye(3)
    return opts.box.clamp(np.vstack([x_prev, x_prev + d, x_prev - d]))


def solve_position(v_meas, active, rx_normal_B, model, x_prev, opts=None):
    """Lowest-cost Nelder-Mead result over the warm-start pattern."""
    opts = opts or SolverOptions()
    v = np.asarray(v_meas, dtype=float)
    active = np.asarray(active)
    n = np.asarray(rx_normal_B, dtype=float)

    def fbatch(points, owner):
        return batch_cost(points, v, active, n, model)

    results = nelder_mead_multi(fbatch, warm_starts(x_prev, opts), opts)
    # ties keep the warm start (index 0)
    best = min(range(len(results)), key=lambda i: results[i].fun)
    res = results[best]
    res.iterations = max(r.iterations for r in results)
    return res


def solve_positions(v_meas, active, rx_normal_B, model, x_prev, opts=None):
    """:func:`solve_position` for K independent problems in one vectorised run.

    ``v_meas`` (K, 4) and ``x_prev`` (K, 3) hold one problem per row;
    ``active`` is a (K, 4) boolean mask or one shared index list, and
    ``rx_normal_B`` one shared normal or one per row. Gives the same
    answers as K separate calls, only faster. Returns a list of
    :class:`NelderMeadResult`.
    """
    opts = opts or SolverOptions()
    v = np.atleast_2d(np.asarray(v_meas, dtype=float))
    k, m = v.shape
    mask = np.asarray(active)
    if mask.dtype != bool:
        flags = np.zeros(m, dtype=bool)
        flags[mask] = True
        mask = flags
    mask = np.broadcast_to(mask, (k, m))
    n = np.broadcast_to(np.asarray(rx_normal_B, dtype=float), (k, 3))
    vm = np.where(mask, v, 0.0)
    energy = np.einsum("ij,ij->i", vm, vm)
    energy[energy == 0] = 1.0
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
    starts = np.stack([warm_starts(x, opts) for x in x_prev])
    s = starts.shape[1]

    def fbatch(points, owner):
        prob = owner // s
        v_model, r = model.batch_voltages(points, n[prob])
        mk = mask[prob]
        res = np.where(mk, v_model - vm[prob], 0.0)
        near = ((r < model.min_range) & mk).sum(axis=1)
        return np.einsum("ij,ij->i", res, res) + NEAR_FIELD_PENALTY * energy[prob] * near

    flat = nelder_mead_multi(fbatch, starts.reshape(-1, 3), opts)
    out = []
    for i in range(k):
        group = flat[i * s:(i + 1) * s]
        best = min(range(s), key=lambda j: group[j].fun)
        res = group[best]
        res.iterations = max(r.iterations for r in group)
        out.append(res)
    return out


def fix_covariance(x, active, rx_normal_B, model, amplitude_sigma, relative_gain_sigma=0.0,
                   max_variance=1.0, step=1e-5):
    """Linearised covariance of a position fix [m^2].

    Amplitude errors are independent with variance
    ``amplitude_sigma**2 + (relative_gain_sigma * V_i)**2``; the second term
    models residual calibration error. They are mapped through the
    pseudo-inverse of the voltage Jacobian at ``x``, so the result is large
    where the amplitudes barely change with position. Eigenvalues are
    clipped to ``[0, max_variance]``, and directions the active anchors do
    not constrain at all (rank-deficient Jacobian) get ``max_variance``.
    """
    x = np.asarray(x, dtype=float)
    n = np.asarray(rx_normal_B, dtype=float)
    active = np.asarray(active)
    cols = []
    for e in np.eye(3) * step:
        hi = model.voltages_unchecked(x + e, n)[0]
        lo = model.voltages_unchecked(x - e, n)[0]
        cols.append((hi - lo)[active] / (2.0 * step))
    jac = np.column_stack(cols)
    v = model.voltages_unchecked(x, n)[0][active]
    var = amplitude_sigma**2 + (relative_gain_sigma * v) ** 2
    u, sv, vt = np.linalg.svd(jac)
    rank = int(np.sum(sv > 1e-12 * max(sv.max(initial=0.0), 1e-300)))
    pinv = vt[:rank].T @ (u[:, :rank] / sv[:rank]).T
    free = vt[rank:]
    cov = (pinv * var) @ pinv.T + max_variance * free.T @ free
    w, e = np.linalg.eigh(cov)
    return (e * np.clip(w, 0.0, max_variance)) @ e.T


def estimate_position(raw, coeffs, prev, rx_normal_B, model, opts=None, timestamp=0.0):
    """One runtime cycle: calibrate, drop saturated anchors, solve, gate.

    ``raw`` is a :class:`~magloc.dsp.SpectralAmplitudes`; ``prev`` the last
    accepted :class:`MiEstimate` (or :meth:`MiEstimate.initial`). Raises
    NoActiveAnchors when every anchor is saturated.
    """
    opts = opts or SolverOptions()
    v_meas = apply_calibration(raw, coeffs)
    active = np.flatnonzero(~np.asarray(raw.saturated, dtype=bool))
    if active.size == 0:
        raise NoActiveAnchors("all anchors saturated")

    res = solve_position(v_meas, active, rx_normal_B, model, prev.position_B, opts)
    active_ids = tuple(int(i) + 1 for i in active)
    if np.linalg.norm(res.x - prev.position_B) < opts.outlier_delta and opts.box.contains(res.x):
        return MiEstimate(
            position_B=res.x,
            residual=res.fun,
            active_anchors=active_ids,
            accepted=True,
            iterations=res.iterations,
            timestamp=timestamp,
            converged=res.converged,
            consecutive_rejections=0,
        )
    return replace(
        prev,
        residual=res.fun,
        active_anchors=active_ids,
        accepted=False,
        iterations=res.iterations,
        timestamp=timestamp,
        converged=res.converged,
        consecutive_rejections=prev.consecutive_rejections + 1,
    )
