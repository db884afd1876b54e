"""Backward value solvers: fixed-boundary dynamic programming and the
obstacle-problem variational inequality with free-boundary extraction.

The marching scheme minimizes the Hamiltonian explicitly on the known frame,
then takes an implicit step with drift-sign upwinding of the advection term
and implicit diffusion; the update matrix is an M-matrix, so the scheme is
monotone.  The obstacle solver enforces the discrete complementarity system

    min(A V - q, V - Phi) = 0   (componentwise, value dominates obstacle)

by projected red-black SOR, where A V = q is the unconstrained implicit step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import EmptyControlGrid, PsorStalled, SchemeDiverged
from .grids import CSV_FMT, Field, Grid1D, TimeGrid, gradient_central, second_derivative, trapezoid
from .model import ProblemSpec, StoppingBoundary, partial_value

__all__ = [
    "ValueField",
    "ViReport",
    "minimize_hamiltonian",
    "solve_hjb_dirichlet",
    "solve_obstacle_vi",
    "distributional_value",
    "hjb_feedback",
]

DIVERGENCE_CAP = 1e12


@dataclass(frozen=True)
class ViReport:
    """Worst-case discrete complementarity residuals (scaled)."""

    min_operator: float
    min_gap: float
    max_product: float
    scale: float


@dataclass
class ValueField:
    """Value frames per time node with an optional free-boundary track."""

    time_grid: TimeGrid
    frames: List[Field]
    free_boundary: Optional[np.ndarray] = None
    vi_report: Optional[ViReport] = field(default=None, compare=False)

    @property
    def grid(self) -> Grid1D:
        return self.frames[0].grid

    def frame_at(self, t: float) -> Field:
        k = int(round((t - self.time_grid.t0) / self.time_grid.dt))
        k = min(max(k, 0), self.time_grid.steps)
        return self.frames[k]

    def to_csv(self, path) -> None:
        times = self.time_grid.times
        xs = self.grid.nodes
        rows = np.empty((len(times) * len(xs), 3))
        for k, t in enumerate(times):
            sl = slice(k * len(xs), (k + 1) * len(xs))
            rows[sl, 0] = t
            rows[sl, 1] = xs
            rows[sl, 2] = self.frames[k].values
        np.savetxt(path, rows, fmt=CSV_FMT, delimiter=",", header="t,x,V", comments="")

    def boundary_to_csv(self, path) -> None:
        if self.free_boundary is None:
            raise ValueError("no free boundary recorded")
        rows = np.column_stack([self.time_grid.times, self.free_boundary])
        np.savetxt(path, rows, fmt=CSV_FMT, delimiter=",", header="t,b", comments="")


def _second_partial_u(spec: ProblemSpec, fn_tag: str, t, x, u, h=1e-4):
    lo = partial_value(spec, fn_tag, t, x, np.asarray(u) - h)
    hi = partial_value(spec, fn_tag, t, x, np.asarray(u) + h)
    return (np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float)) / (2.0 * h)


def _control_newton(spec: ProblemSpec, t, x, v_x):
    """Exact minimizer for drift affine in u and cost quadratic in u.

    One Newton step from u = 0 on the stationarity map L_u + f_u * V_x;
    exact when L_uu is constant and f is control-affine.
    """
    x = np.asarray(x, dtype=float)
    u0 = np.zeros_like(x)
    g0 = (np.asarray(partial_value(spec, "running_cost_du", t, x, u0), dtype=float)
          + np.asarray(partial_value(spec, "drift_du", t, x, u0), dtype=float) * v_x)
    curv = (_second_partial_u(spec, "running_cost_du", t, x, u0)
            + _second_partial_u(spec, "drift_du", t, x, u0) * v_x)
    curv = np.where(np.abs(curv) < 1e-12, 1e-12, curv)
    u = np.where(curv > 0.0, -g0 / curv, 0.0)
    return u * np.ones_like(x)


def _optimal_control(spec: ProblemSpec, t, x, v_x, control):
    """Vectorized argmin of f*V_x + L over the control, per node."""
    x = np.asarray(x, dtype=float)
    if control is None:
        return np.zeros_like(x)
    if isinstance(control, str) and control == "closed":
        return _control_newton(spec, t, x, v_x)
    u_grid = np.asarray(control, dtype=float).ravel()
    if u_grid.size == 0:
        raise EmptyControlGrid("control grid is empty")
    vals = np.empty((u_grid.size, x.size))
    for j, uj in enumerate(u_grid):
        uu = np.full_like(x, uj)
        vals[j] = (np.asarray(spec.drift(t, x, uu), dtype=float) * v_x
                   + np.asarray(spec.running_cost(t, x, uu), dtype=float))
    best = np.argmin(vals, axis=0)  # lowest-index tie-break
    return u_grid[best]


def minimize_hamiltonian(spec: ProblemSpec, t, x, v_x, v_xx, u_grid=None,
                         closed_form: bool = False):
    """Pointwise Hamiltonian minimization.

    Returns (u*, minimized value) where the value includes the
    control-independent diffusion term (sigma^2/2) * V_xx.
    """
    if closed_form:
        control = "closed"
    elif u_grid is not None:
        control = np.asarray(u_grid, dtype=float)
        if control.size == 0:
            raise EmptyControlGrid("control grid is empty")
    else:
        control = None
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    vxa = np.atleast_1d(np.asarray(v_x, dtype=float)) * np.ones_like(xa)
    u = _optimal_control(spec, t, xa, vxa, control)
    h = (np.asarray(spec.drift(t, xa, u), dtype=float) * vxa
         + np.asarray(spec.running_cost(t, xa, u), dtype=float)
         + spec.diffusivity(t) * np.asarray(v_xx, dtype=float))
    if np.ndim(x) == 0:
        return float(u[0]), float(h[0])
    return u, h


def _step_matrix(spec: ProblemSpec, t, grid: Grid1D, u_nodes, dt: float,
                 discount: float):
    """Tridiagonal bands of A = I - dt*(f d/dx + D d2/dx2 - discount).

    Upwind advection by drift sign; end rows drop the diffusion term and
    difference into the domain.
    """
    x = grid.nodes
    dx = grid.dx
    n = grid.n
    f = np.asarray(spec.drift(t, x, u_nodes), dtype=float) * np.ones(n)
    diff = spec.diffusivity(t)
    r = dt * diff / dx ** 2
    c = dt * f / dx

    diag = np.full(n, 1.0 + dt * discount)
    upper = np.zeros(n - 1)
    lower = np.zeros(n - 1)

    # interior: diffusion
    diag[1:-1] += 2.0 * r
    upper[1:] += -r
    lower[:-1] += -r
    # interior: upwind advection
    pos = f[1:-1] >= 0.0
    diag[1:-1] += np.where(pos, c[1:-1], -c[1:-1])
    upper[1:] += np.where(pos, -c[1:-1], 0.0)
    lower[:-1] += np.where(pos, 0.0, c[1:-1])
    # end rows: upwind into the domain where the drift sign allows, else no
    # advection (ends sit in negligible-density regions for the presets)
    if f[0] >= 0.0:
        diag[0] += c[0]
        upper[0] += -c[0]
    if f[-1] <= 0.0:
        diag[-1] += -c[-1]
        lower[-1] += c[-1]
    return lower, diag, upper, f


def _solve_tridiag(lower, diag, upper, rhs):
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    out = solve_banded((1, 1), ab, rhs)
    if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > DIVERGENCE_CAP:
        raise SchemeDiverged("value step produced non-finite or huge values")
    return out


def _apply_dirichlet(lower, diag, upper, rhs, mask, values):
    idx = np.flatnonzero(mask)
    diag[idx] = 1.0
    rhs[idx] = values[idx]
    up_idx = idx[idx < diag.size - 1]
    lo_idx = idx[idx > 0]
    upper[up_idx] = 0.0
    lower[lo_idx - 1] = 0.0


def solve_hjb_dirichlet(spec: ProblemSpec, boundary: Optional[StoppingBoundary],
                        grid: Grid1D, time_grid: TimeGrid,
                        terminal: Optional[Callable] = None,
                        control=None, discount: float = 0.0,
                        dirichlet_ends=None) -> ValueField:
    """Backward sweep of the dynamic-programming equation with stopping data.

    The value is pinned to the terminal-cost surface on every node outside
    the continuation region (and at the horizon).  `control` selects the
    minimization: None for an uncontrolled problem, "closed" for the
    affine-quadratic Newton form, or an explicit control grid.
    """
    if terminal is None:
        terminal = spec.terminal_cost
    times = time_grid.times
    x = grid.nodes
    frames = [None] * (time_grid.steps + 1)
    v = np.asarray(terminal(times[-1], x), dtype=float) * np.ones(grid.n)
    if boundary is not None and boundary.kind != "none":
        stopped = boundary.level(times[-1], x) >= 0.0
        phi_end = np.asarray(spec.terminal_cost(times[-1], x), dtype=float) * np.ones(grid.n)
        v = np.where(stopped, phi_end, v)
    frames[-1] = Field(grid, v)

    dt = time_grid.dt
    for k in range(time_grid.steps - 1, -1, -1):
        t_new = times[k]
        t_old = times[k + 1]
        v_x = gradient_central(frames[k + 1]).values
        u = _optimal_control(spec, t_old, x, v_x, control)
        lower, diag, upper, _ = _step_matrix(spec, t_new, grid, u, dt, discount)
        l_run = np.asarray(spec.running_cost(t_new, x, u), dtype=float) * np.ones(grid.n)
        rhs = frames[k + 1].values + dt * l_run

        if dirichlet_ends is not None:
            mask = np.zeros(grid.n, dtype=bool)
            vals = np.zeros(grid.n)
            if dirichlet_ends[0] is not None:
                mask[0] = True
                vals[0] = dirichlet_ends[0]
            if dirichlet_ends[1] is not None:
                mask[-1] = True
                vals[-1] = dirichlet_ends[1]
            _apply_dirichlet(lower, diag, upper, rhs, mask, vals)

        if boundary is not None and boundary.kind != "none":
            stopped = boundary.level(t_new, x) >= 0.0
            phi = np.asarray(spec.terminal_cost(t_new, x), dtype=float) * np.ones(grid.n)
            _apply_dirichlet(lower, diag, upper, rhs, stopped, phi)

        frames[k] = Field(grid, _solve_tridiag(lower, diag, upper, rhs))
    return ValueField(time_grid, frames)


def hjb_feedback(spec: ProblemSpec, value: ValueField, control) -> Callable:
    """Feedback (t, x) -> u* recovered from a solved value field."""
    tg = value.time_grid
    grid = value.grid
    tables = []
    for k, t in enumerate(tg.times):
        v_x = gradient_central(value.frames[k]).values
        tables.append(_optimal_control(spec, t, grid.nodes, v_x, control))
    table = np.stack(tables)

    def u_fn(t, x):
        x = np.asarray(x, dtype=float)
        k = int(np.clip(round((np.asarray(t, dtype=float) - tg.t0) / tg.dt), 0, tg.steps))
        return np.interp(x, grid.nodes, table[k])

    return u_fn


def _psor(lower, diag, upper, rhs, v0, obstacle, omega, tol, max_sweeps):
    """Projected red-black SOR on min(A v - rhs, v - obstacle) = 0."""
    v = np.maximum(v0.copy(), obstacle)
    n = v.size
    even = np.arange(0, n, 2)
    odd = np.arange(1, n, 2)
    scale = max(1.0, float(np.max(np.abs(rhs))))

    def sweep(idx):
        contrib = rhs[idx].copy()
        has_lo = idx > 0
        contrib[has_lo] -= lower[idx[has_lo] - 1] * v[idx[has_lo] - 1]
        has_up = idx < n - 1
        contrib[has_up] -= upper[idx[has_up]] * v[idx[has_up] + 1]
        gs = contrib / diag[idx]
        v[idx] = np.maximum((1.0 - omega) * v[idx] + omega * gs, obstacle[idx])

    for it in range(max_sweeps):
        sweep(even)
        sweep(odd)
        av = diag * v
        av[:-1] += upper * v[1:]
        av[1:] += lower * v[:-1]
        res = np.minimum(av - rhs, v - obstacle)
        if np.max(np.abs(res)) <= tol * scale:
            return v, it + 1
    raise PsorStalled(f"PSOR residual above {tol} after {max_sweeps} sweeps")


def _free_boundary_from_contact(xs, gap, contact_tol):
    """Sub-grid contact edge via square-root growth of the gap V - Phi."""
    contact = gap <= contact_tol
    if not np.any(contact) or np.all(contact):
        return float("nan")
    if contact[0]:
        i = int(np.flatnonzero(~contact)[0]) - 1  # last contact node from the left
        j1, j2 = i + 1, min(i + 2, xs.size - 1)
    else:
        i = int(np.flatnonzero(~contact)[-1]) + 1  # first contact node from the right
        j1, j2 = i - 1, max(i - 2, 0)
    s1, s2 = np.sqrt(max(gap[j1], 0.0)), np.sqrt(max(gap[j2], 0.0))
    if s2 > s1 > 0.0:
        r = s1 / s2
        xb = (xs[j1] - r * xs[j2]) / (1.0 - r)
        lo, hi = min(xs[i], xs[j1]), max(xs[i], xs[j1])
        return float(np.clip(xb, lo, hi))
    return float(0.5 * (xs[i] + xs[j1]))


def solve_obstacle_vi(spec: ProblemSpec, obstacle: Callable, grid: Grid1D,
                      time_grid: Optional[TimeGrid] = None, stationary: bool = False,
                      discount: float = 0.0, control=None, omega: float = 1.5,
                      tol: float = 1e-8, max_sweeps: int = 20000,
                      dirichlet_ends=None, terminal: Optional[Callable] = None,
                      pseudo_dt: float = 0.5, pseudo_tol: float = 1e-8,
                      max_pseudo_steps: int = 5000) -> ValueField:
    """Obstacle problem by projected SOR on the implicit-step complementarity.

    In stationary mode the time-dependent kernel is marched in pseudo-time
    until the relative frame change drops below pseudo_tol; otherwise a
    backward solve over time_grid is performed.  The returned vi_report
    carries worst-case complementarity residuals of the final frame, scaled
    by the problem magnitude.
    """
    x = grid.nodes

    def obstacle_at(t):
        return np.asarray(obstacle(t, x), dtype=float) * np.ones(grid.n)

    def build(t, v_prev, dt):
        v_x = gradient_central(Field(grid, v_prev)).values
        u = _optimal_control(spec, t, x, v_x, control)
        lower, diag, upper, _ = _step_matrix(spec, t, grid, u, dt, discount)
        l_run = np.asarray(spec.running_cost(t, x, u), dtype=float) * np.ones(grid.n)
        rhs = v_prev + dt * l_run
        if dirichlet_ends is not None:
            mask = np.zeros(grid.n, dtype=bool)
            vals = np.zeros(grid.n)
            if dirichlet_ends[0] is not None:
                mask[0], vals[0] = True, dirichlet_ends[0]
            if dirichlet_ends[1] is not None:
                mask[-1], vals[-1] = True, dirichlet_ends[1]
            _apply_dirichlet(lower, diag, upper, rhs, mask, vals)
        return lower, diag, upper, rhs

    def lcp_report(lower, diag, upper, rhs, v, phi):
        av = diag * v
        av[:-1] += upper * v[1:]
        av[1:] += lower * v[:-1]
        op = av - rhs
        gap = v - phi
        scale = max(1.0, float(np.max(np.abs(rhs))))
        return ViReport(float(np.min(op)) / scale, float(np.min(gap)) / scale,
                        float(np.max(op * gap)) / scale ** 2, scale)

    if stationary:
        phi = obstacle_at(0.0)
        v = phi.copy()
        report = None
        bands = None
        dt_k = pseudo_dt
        for _ in range(max_pseudo_steps):
            bands = build(0.0, v, dt_k)
            v_new, _ = _psor(*bands, v, phi, omega, tol, max_sweeps)
            change = np.max(np.abs(v_new - v)) / max(1.0, np.max(np.abs(v_new)))
            v = v_new
            if change < pseudo_tol:
                break
            # implicit step is unconditionally stable: ramp toward the fixed point
            dt_k = min(dt_k * 1.5, 1e4 * pseudo_dt)
        else:
            raise PsorStalled("stationary marching did not reach a fixed point")
        # residuals reported on a unit-step rescaling of the fixed-point system
        bands = build(0.0, v, pseudo_dt)
        v, _ = _psor(*bands, v, phi, omega, tol, max_sweeps)
        report = lcp_report(*bands, v, phi)
        tg = time_grid if time_grid is not None else TimeGrid(0.0, 1.0, 1)
        contact_tol = 1e-9 * max(1.0, np.max(np.abs(v)))
        fb = _free_boundary_from_contact(x, v - phi, contact_tol)
        frames = [Field(grid, v) for _ in range(tg.steps + 1)]
        return ValueField(tg, frames, np.full(tg.steps + 1, fb), report)

    if time_grid is None:
        raise ValueError("time-dependent solve needs a time_grid")
    times = time_grid.times
    term = terminal if terminal is not None else obstacle
    v = np.asarray(term(times[-1], x), dtype=float) * np.ones(grid.n)
    v = np.maximum(v, obstacle_at(times[-1]))
    frames = [None] * (time_grid.steps + 1)
    frames[-1] = Field(grid, v)
    fb = np.full(time_grid.steps + 1, np.nan)
    contact_tol = 1e-9 * max(1.0, np.max(np.abs(v)))
    fb[-1] = _free_boundary_from_contact(x, v - obstacle_at(times[-1]), contact_tol)
    report = None
    for k in range(time_grid.steps - 1, -1, -1):
        phi = obstacle_at(times[k])
        bands = build(times[k], frames[k + 1].values, time_grid.dt)
        v, _ = _psor(*bands, frames[k + 1].values, phi, omega, tol, max_sweeps)
        frames[k] = Field(grid, v)
        contact_tol = 1e-9 * max(1.0, np.max(np.abs(v)))
        fb[k] = _free_boundary_from_contact(x, v - phi, contact_tol)
        if k == 0:
            report = lcp_report(*bands, v, phi)
    return ValueField(time_grid, frames, fb, report)


def distributional_value(value: ValueField, mu: Field, t: float) -> float:
    """Expected value under mu: the quadrature of V(t, .) * mu."""
    frame = value.frame_at(t)
    if frame.grid != mu.grid:
        raise ValueError("value and density must share a grid")
    return trapezoid(Field(frame.grid, frame.values * mu.values))
