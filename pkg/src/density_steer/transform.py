"""Score fields, score-corrected velocity fields, and characteristic transport.

The velocity field rewrites drift-diffusion density evolution as a pure
transport problem: moving particles along dx/dt = f - (sigma^2/2) * d(log rho)/dx
reproduces the diffusion's one-time marginals.  The score is only trusted away
from absorbing boundaries and density floors; masked nodes take the constant
extrapolation of the nearest valid value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Union

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import AllMasked, NotMonotone, TooFewParticles
from .fokker_planck import DensityPath, drift_diffusion_step
from .grids import CSV_FMT, Field, Grid1D, TimeGrid, gradient_central, trapezoid
from .model import InitialDensity, ProblemSpec, StoppingBoundary, TimeAssignment

__all__ = [
    "ScoreField",
    "VelocityField",
    "ParticleEnsemble",
    "score_field",
    "transformed_drift",
    "velocity_from_density",
    "advect_particles",
    "pushforward_density",
    "ito_recovery_residual",
]


@dataclass(frozen=True)
class ScoreField:
    """Spatial gradient of log density with a validity mask.

    Nodes where the density sits below the floor, or inside the boundary
    layer of an absorbing interface, carry extrapolated values and
    valid_mask False.
    """

    grid: Grid1D
    values: np.ndarray
    valid_mask: np.ndarray


def score_field(frame: Field, floor: Optional[float] = None,
                layer_width: Optional[float] = None,
                boundary: Optional[StoppingBoundary] = None,
                t: float = 0.0) -> ScoreField:
    """Score d(log rho)/dx of a density frame.

    floor defaults to 1e-10 * max(rho); layer_width defaults to 3 grid
    spacings and masks nodes near an active absorbing interface.
    """
    grid = frame.grid
    rho = frame.values
    peak = float(np.max(rho))
    if floor is None:
        floor = 1e-10 * peak if peak > 0.0 else 1e-300
    if layer_width is None:
        layer_width = 3.0 * grid.dx

    grad = gradient_central(frame).values
    score = grad / np.maximum(rho, floor)
    valid = rho >= floor

    if boundary is not None and boundary.kind != "none":
        stopped = boundary.level(t, grid.nodes) >= 0.0
        if np.any(stopped):
            alive_idx = np.flatnonzero(~stopped)
            if alive_idx.size:
                k = int(np.ceil(layer_width / grid.dx))
                i_lo, i_hi = alive_idx[0], alive_idx[-1]
                if i_lo > 0:
                    valid[: min(i_lo + k, grid.n)] = False
                if i_hi < grid.n - 1:
                    valid[max(i_hi - k + 1, 0):] = False
            else:
                valid[:] = False

    if not np.any(valid):
        raise AllMasked("no valid node for the score field")
    if not np.all(valid):
        idx = np.flatnonzero(valid)
        score = np.interp(np.arange(grid.n), idx, score[idx])
    return ScoreField(grid, score, valid)


def _control_on_nodes(u, t, x):
    if u is None:
        return np.zeros_like(x)
    if callable(u):
        return np.asarray(u(t, x), dtype=float) * np.ones_like(x)
    return float(u) * np.ones_like(x)


def transformed_drift(spec: ProblemSpec, u, score: ScoreField, t: float) -> Field:
    """Velocity field f(t, x, u(x)) - (sigma^2/2) * score on the grid."""
    x = score.grid.nodes
    uu = _control_on_nodes(u, t, x)
    f = np.asarray(spec.drift(t, x, uu), dtype=float) * np.ones_like(x)
    return Field(score.grid, f - spec.diffusivity(t) * score.values)


@dataclass
class VelocityField:
    """Per-time-node velocity frames with bilinear space-time evaluation."""

    time_grid: TimeGrid
    frames: List[Field]

    def __post_init__(self):
        if len(self.frames) != self.time_grid.steps + 1:
            raise ValueError("need one velocity frame per time node")
        self._table = np.stack([f.values for f in self.frames])
        self._grid = self.frames[0].grid

    @property
    def grid(self) -> Grid1D:
        return self._grid

    def eval(self, t, x):
        """Velocity at (t, x); t may be a scalar or per-point array."""
        tg, g = self.time_grid, self._grid
        x = np.asarray(x, dtype=float)
        s = np.clip((np.asarray(t, dtype=float) - tg.t0) / tg.dt, 0.0, tg.steps)
        k = np.minimum(s.astype(int), tg.steps - 1)
        theta = s - k
        pos = np.clip((x - g.x_min) / g.dx, 0.0, g.n - 1)
        j = np.minimum(pos.astype(int), g.n - 2)
        frac = pos - j
        if np.ndim(k) == 0:
            row_lo, row_hi = self._table[k], self._table[k + 1]
            v_lo = row_lo[j] * (1.0 - frac) + row_lo[j + 1] * frac
            v_hi = row_hi[j] * (1.0 - frac) + row_hi[j + 1] * frac
        else:
            v_lo = self._table[k, j] * (1.0 - frac) + self._table[k, j + 1] * frac
            v_hi = self._table[k + 1, j] * (1.0 - frac) + self._table[k + 1, j + 1] * frac
        return v_lo * (1.0 - theta) + v_hi * theta

    def to_csv(self, path) -> None:
        times = self.time_grid.times
        xs = self._grid.nodes
        rows = np.empty((len(times) * len(xs), 3))
        for k, t in enumerate(times):
            sl = slice(k * len(xs), (k + 1) * len(xs))
            rows[sl, 0] = t
            rows[sl, 1] = xs
            rows[sl, 2] = self.frames[k].values
        np.savetxt(path, rows, fmt=CSV_FMT, delimiter=",", header="t,x,f_tilde", comments="")


def velocity_from_density(spec: ProblemSpec, u, path: DensityPath,
                          boundary: Optional[StoppingBoundary] = None,
                          floor: Optional[float] = None,
                          layer_width: Optional[float] = None) -> VelocityField:
    """Build the velocity field from a solved density path under feedback u."""
    frames = []
    for k, t in enumerate(path.time_grid.times):
        sc = score_field(path.frames[k], floor=floor, layer_width=layer_width,
                         boundary=boundary, t=t)
        frames.append(transformed_drift(spec, u, sc, t))
    return VelocityField(path.time_grid, frames)


@dataclass
class ParticleEnsemble:
    """Deterministic characteristic particles with uniform weights 1/N."""

    positions: np.ndarray
    alive: np.ndarray
    stop_time: np.ndarray
    x0: np.ndarray
    out_of_grid: np.ndarray

    @classmethod
    def from_initial(cls, x0: np.ndarray) -> "ParticleEnsemble":
        x0 = np.asarray(x0, dtype=float)
        n = x0.size
        return cls(positions=x0.copy(), alive=np.ones(n, dtype=bool),
                   stop_time=np.full(n, np.inf), x0=x0.copy(),
                   out_of_grid=np.zeros(n, dtype=bool))

    @classmethod
    def from_density(cls, rho0: InitialDensity, n: int) -> "ParticleEnsemble":
        return cls.from_initial(rho0.sample(n))

    @property
    def n(self) -> int:
        return self.positions.size

    @property
    def weight(self) -> float:
        return 1.0 / self.n

    def alive_fraction(self) -> float:
        return float(np.mean(self.alive))

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions.copy(), self.alive.copy(),
                                self.stop_time.copy(), self.x0.copy(),
                                self.out_of_grid.copy())

    def to_csv(self, path) -> None:
        rows = np.column_stack([np.arange(self.n), self.positions,
                                self.alive.astype(float), self.stop_time])
        np.savetxt(path, rows, fmt=CSV_FMT, delimiter=",",
                   header="id,x,alive,stop_time", comments="")


def advect_particles(ensemble: ParticleEnsemble,
                     velocity: Union[VelocityField, Callable],
                     dt: float,
                     boundary: Optional[StoppingBoundary] = None,
                     time_assignment: Optional[TimeAssignment] = None,
                     t_start: Optional[float] = None,
                     t_end: Optional[float] = None) -> ParticleEnsemble:
    """Transport alive particles along the velocity field with RK4 steps.

    A particle stops when its boundary level function changes sign inside a
    step (crossing time estimated linearly in time) or when it reaches its
    assigned final time.  Stopped particles never move again; particles
    leaving the velocity grid are clamped and flagged.
    """
    if isinstance(velocity, VelocityField):
        v_eval = velocity.eval
        if t_start is None:
            t_start = velocity.time_grid.t0
        if t_end is None:
            t_end = velocity.time_grid.t1
        grid = velocity.grid
    else:
        v_eval = velocity
        if t_start is None or t_end is None:
            raise ValueError("callable velocity needs explicit t_start and t_end")
        grid = None

    out = ensemble.copy()
    tau = None
    if time_assignment is not None:
        tau = np.asarray(time_assignment.tau(out.x0), dtype=float) * np.ones(out.n)
        newly = out.alive & (tau <= t_start)
        out.stop_time[newly] = tau[newly]
        out.alive[newly] = False

    n_steps = max(int(round((t_end - t_start) / dt)), 1)
    h_full = (t_end - t_start) / n_steps

    t = t_start
    for _ in range(n_steps):
        act = np.flatnonzero(out.alive)
        if act.size == 0:
            break
        x = out.positions[act]
        if tau is not None:
            h = np.minimum(h_full, np.maximum(tau[act] - t, 0.0))
        else:
            h = np.full(act.size, h_full)

        k1 = v_eval(t, x)
        k2 = v_eval(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = v_eval(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = v_eval(t + h, x + h * k3)
        x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        if grid is not None:
            off = (x_new < grid.x_min) | (x_new > grid.x_max)
            if np.any(off):
                out.out_of_grid[act[off]] = True
                x_new = np.clip(x_new, grid.x_min, grid.x_max)

        if boundary is not None and boundary.kind != "none":
            lev_old = boundary.level(t, x)
            lev_new = boundary.level(t + h_full, x_new)
            crossed = (lev_new >= 0.0) & (lev_old < 0.0)
            if np.any(crossed):
                den = lev_old[crossed] - lev_new[crossed]
                frac = np.clip(lev_old[crossed] / np.where(den == 0.0, -1.0, den), 0.0, 1.0)
                idx = act[crossed]
                out.positions[idx] = x[crossed] + frac * (x_new[crossed] - x[crossed])
                out.stop_time[idx] = t + frac * h_full
                out.alive[idx] = False
            still = ~crossed
            # particles that started at or past the boundary stop in place
            started_out = lev_old >= 0.0
            if np.any(started_out):
                idx0 = act[started_out]
                out.stop_time[idx0] = t
                out.alive[idx0] = False
                still &= ~started_out
            out.positions[act[still]] = x_new[still]
        else:
            out.positions[act] = x_new

        t += h_full
        if tau is not None:
            done = out.alive & (tau <= t + 1e-15)
            out.stop_time[done] = tau[done]
            out.alive[done] = False
    return out


def pushforward_density(ensemble: ParticleEnsemble, grid: Grid1D,
                        bandwidth: Optional[float] = None) -> Field:
    """Kernel density estimate of the alive particles, scaled to alive mass.

    Linear binning onto the grid followed by a Gaussian smooth; the
    bandwidth defaults to Silverman's rule on the alive positions.
    """
    alive_x = ensemble.positions[ensemble.alive]
    m = alive_x.size
    if m < 100:
        raise TooFewParticles(f"need >= 100 alive particles, have {m}")

    if bandwidth is None:
        std = float(np.std(alive_x))
        q75, q25 = np.percentile(alive_x, [75.0, 25.0])
        iqr = float(q75 - q25)
        spread = min(std, iqr / 1.34) if iqr > 0.0 else std
        bandwidth = 0.9 * spread * m ** (-0.2)
    if not bandwidth > 0.0:
        bandwidth = grid.dx

    pos = np.clip((alive_x - grid.x_min) / grid.dx, 0.0, grid.n - 1)
    j = np.minimum(pos.astype(int), grid.n - 2)
    frac = pos - j
    hist = np.zeros(grid.n)
    np.add.at(hist, j, 1.0 - frac)
    np.add.at(hist, j + 1, frac)
    dens = gaussian_filter1d(hist / (ensemble.n * grid.dx), sigma=bandwidth / grid.dx,
                             mode="constant")
    target = m / ensemble.n
    total = float(np.trapezoid(dens, dx=grid.dx))
    if total > 0.0:
        dens = dens * (target / total)
    return Field(grid, dens)


def ito_recovery_residual(spec: ProblemSpec, u, rho0: InitialDensity,
                          g: Callable, g_prime: Callable, g_double_prime: Callable,
                          horizon: float, x_grid: Grid1D, y_grid: Grid1D,
                          dt: float = 1e-3, n_particles: int = 20000) -> float:
    """Consistency check between characteristic transport and the mapped SDE.

    Route (a) pushes characteristic particles of the transformed dynamics
    through the monotone map g; route (b) solves the drift-diffusion
    equation of the mapped state y = g(x), whose drift is
    g'*f + (sigma^2/2)*g'' and noise level is g'*sigma, directly on the
    y grid.  Returns the Wasserstein-1 distance between the two terminal
    laws.  Raises NotMonotone when g' changes sign on the x grid.
    """
    from .sde_mc import wasserstein1

    gp_nodes = np.asarray(g_prime(x_grid.nodes), dtype=float)
    if np.any(gp_nodes == 0.0) or (np.any(gp_nodes > 0.0) and np.any(gp_nodes < 0.0)):
        raise NotMonotone("g' changes sign on the grid")
    increasing = bool(gp_nodes[0] > 0.0)

    # route (a): transformed characteristics of the original dynamics
    from .fokker_planck import solve_fp

    steps = max(int(round(horizon / dt)), 1)
    tg = TimeGrid(0.0, horizon, steps)
    path = solve_fp(spec, u, rho0, x_grid, tg)
    vel = velocity_from_density(spec, u, path)
    ens = ParticleEnsemble.from_density(rho0, n_particles)
    ens = advect_particles(ens, vel, dt)
    y_samples = np.asarray(g(ens.positions), dtype=float)

    # route (b): drift-diffusion solve of the mapped state on the y grid
    y_of_x = np.asarray(g(x_grid.nodes), dtype=float)
    if not increasing:
        order = np.argsort(y_of_x)
        y_sorted, x_sorted = y_of_x[order], x_grid.nodes[order]
    else:
        y_sorted, x_sorted = y_of_x, x_grid.nodes
    y_nodes = y_grid.nodes
    x_at_y = np.interp(y_nodes, y_sorted, x_sorted)
    y_edges = 0.5 * (y_nodes[1:] + y_nodes[:-1])
    x_at_edges = np.interp(y_edges, y_sorted, x_sorted)
    gp_e = np.asarray(g_prime(x_at_edges), dtype=float)
    gpp_e = np.asarray(g_double_prime(x_at_edges), dtype=float)

    gp_n = np.asarray(g_prime(x_at_y), dtype=float)
    w0 = np.maximum(rho0.density(x_at_y), 0.0) / np.abs(gp_n)
    w = w0.copy()
    for k in range(steps):
        t_new = (k + 1) * tg.dt
        sig = spec.sigma(t_new)
        uu = _control_on_nodes(u, t_new, x_at_edges)
        f_e = np.asarray(spec.drift(t_new, x_at_edges, uu), dtype=float) * np.ones_like(x_at_edges)
        # flux-form drift a - dD/dy with a = g' f + (sigma^2/2) g'' and D = (g' sigma)^2/2
        alpha = gp_e * f_e - 0.5 * sig * sig * gpp_e
        diff_e = 0.5 * (gp_e * sig) ** 2
        w = drift_diffusion_step(w, alpha, diff_e, y_grid.dx, tg.dt)
        w = np.maximum(w, 0.0)
    return wasserstein1(y_samples, Field(y_grid, w))
