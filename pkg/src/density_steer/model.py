"""Problem definitions: dynamics, costs, stopping rules, initial densities.

All evaluation maps are plain callables that must accept numpy arrays for the
state (and control) argument and broadcast; they must be pure, so specs are
safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteEvaluation
from .grids import Grid1D, Field, trapezoid

__all__ = [
    "ProblemSpec",
    "StoppingBoundary",
    "TimeAssignment",
    "InitialDensity",
    "eval_drift",
    "inside_continuation",
    "finite_diff_partials",
    "partial_value",
]

# Tags accepted by finite_diff_partials / partial_value.
PARTIAL_TAGS = (
    "drift_dx",
    "drift_du",
    "running_cost_dx",
    "running_cost_du",
    "terminal_cost_dx",
    "terminal_cost_dt",
    "constraint_dx",
    "constraint_dt",
)


@dataclass(frozen=True)
class ProblemSpec:
    """Controlled diffusion with running/terminal costs.

    drift(t, x, u) is the state rate, diffusion(t) the scalar noise level
    (must stay positive), running_cost(t, x, u) the cost rate, and
    terminal_cost(t, x) the stopping payoff.  constraint(t, x) enters only
    through the terminal distributional condition.  Analytic partials are
    optional; central finite differences are used when absent.
    """

    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    constraint: Optional[Callable] = None
    control_dim: int = 1
    drift_du: Optional[Callable] = None
    drift_dx: Optional[Callable] = None
    running_cost_du: Optional[Callable] = None
    running_cost_dx: Optional[Callable] = None
    terminal_cost_dx: Optional[Callable] = None
    terminal_cost_dt: Optional[Callable] = None
    constraint_dx: Optional[Callable] = None
    constraint_dt: Optional[Callable] = None

    def sigma(self, t) -> float:
        s = float(self.diffusion(t))
        if not s > 0.0:
            raise ValueError(f"diffusion must be positive, got {s} at t={t}")
        return s

    def diffusivity(self, t) -> float:
        """Half squared noise level, the coefficient of the second derivative."""
        s = self.sigma(t)
        return 0.5 * s * s


def eval_drift(spec: ProblemSpec, t, x, u):
    """Evaluate the drift f(t, x, u)."""
    return spec.drift(t, x, u)


@dataclass(frozen=True)
class StoppingBoundary:
    """Stopping rule encoded as a space-time region.

    kind is one of:
      - "none":         never stop
      - "level_set":    stop where g(t, x) >= 0 (continuation is {g < 0})
      - "absorb_below": stop where x <= lower(t)
      - "absorb_above": stop where x >= upper(t)
      - "interval":     alive strictly inside (lower(t), upper(t))
    """

    kind: str = "none"
    g: Optional[Callable] = None
    lower: Optional[Callable] = None
    upper: Optional[Callable] = None

    def __post_init__(self):
        kinds = ("none", "level_set", "absorb_below", "absorb_above", "interval")
        if self.kind not in kinds:
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "level_set" and self.g is None:
            raise ValueError("level_set boundary needs g")
        if self.kind == "absorb_below" and self.lower is None:
            raise ValueError("absorb_below boundary needs lower")
        if self.kind == "absorb_above" and self.upper is None:
            raise ValueError("absorb_above boundary needs upper")
        if self.kind == "interval" and (self.lower is None or self.upper is None):
            raise ValueError("interval boundary needs lower and upper")

    def level(self, t, x):
        """Unified level function: continuation region is {level < 0}."""
        x = np.asarray(x, dtype=float)
        if self.kind == "none":
            return -np.ones_like(x)
        if self.kind == "level_set":
            return np.asarray(self.g(t, x), dtype=float) * np.ones_like(x)
        if self.kind == "absorb_below":
            return self.lower(t) - x
        if self.kind == "absorb_above":
            return x - self.upper(t)
        lo, hi = self.lower(t), self.upper(t)
        if not lo < hi:
            raise ValueError(f"interval boundary requires lower(t) < upper(t) at t={t}")
        return np.maximum(lo - x, x - hi)


def inside_continuation(b: StoppingBoundary, t, x):
    """True where (t, x) lies strictly inside the continuation region."""
    lev = b.level(t, x)
    out = lev < 0.0
    if np.ndim(x) == 0:
        return bool(out)
    return out


@dataclass(frozen=True)
class TimeAssignment:
    """Final-time rule: a common scalar or a per-initial-condition map.

    Admissibility of per-state rules is not certified; tau() only checks
    nonnegativity and finiteness of the returned times.
    """

    kind: str = "common"
    value: object = 1.0

    def __post_init__(self):
        if self.kind not in ("common", "per_state"):
            raise ValueError(f"unknown time assignment kind {self.kind!r}")
        if self.kind == "common" and not np.isscalar(self.value):
            raise ValueError("common time assignment needs a scalar value")
        if self.kind == "per_state" and not callable(self.value):
            raise ValueError("per_state time assignment needs a callable")

    def tau(self, x0):
        x0 = np.asarray(x0, dtype=float)
        if self.kind == "common":
            out = np.full(x0.shape, float(self.value))
        else:
            out = np.asarray(self.value(x0), dtype=float) * np.ones_like(x0)
        if np.any(~np.isfinite(out)) or np.any(out < 0.0):
            raise ValueError("time assignment must be finite and nonnegative")
        if np.ndim(x0) == 0:
            return float(out)
        return out


@dataclass(frozen=True)
class InitialDensity:
    """Initial state density on a finite support interval.

    The density must integrate to 1 (within 1e-8) over its support under
    trapezoidal quadrature; this is checked at construction.
    """

    density: Callable
    support: tuple
    moments: Optional[tuple] = None

    def __post_init__(self):
        a, b = self.support
        if not b > a:
            raise ValueError("support must be a nonempty interval")
        mass = self.mass()
        if abs(mass - 1.0) > 1e-8:
            raise ValueError(f"initial density integrates to {mass}, expected 1")

    def mass(self, n: int = 8193) -> float:
        a, b = self.support
        xs = np.linspace(a, b, n)
        return float(np.trapezoid(self.density(xs), xs))

    @classmethod
    def gaussian(cls, mean: float, std: float, half_width: float = 10.0) -> "InitialDensity":
        m, s = float(mean), float(std)

        def pdf(x):
            return np.exp(-0.5 * ((x - m) / s) ** 2) / (s * np.sqrt(2.0 * np.pi))

        return cls(pdf, (m - half_width * s, m + half_width * s), moments=(m, s * s))

    def discretize(self, grid: Grid1D) -> Field:
        return Field(grid, np.maximum(self.density(grid.nodes), 0.0))

    def sample(self, n: int) -> np.ndarray:
        """Deterministic quantile sample: inverse CDF at midpoint ranks."""
        a, b = self.support
        xs = np.linspace(a, b, 16385)
        pdf = np.maximum(self.density(xs), 0.0)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(xs))])
        cdf /= cdf[-1]
        ranks = (np.arange(n) + 0.5) / n
        return np.interp(ranks, cdf, xs)


def _fd_step(h, arg):
    if h is not None:
        return float(h)
    return 1e-5 * max(1.0, abs(float(arg)))


def finite_diff_partials(spec: ProblemSpec, which: str, t, x, u=None, h=None):
    """Central finite-difference approximation of the requested partial.

    `which` is one of PARTIAL_TAGS.  Raises NonFiniteEvaluation if a probe
    returns a non-finite value.
    """
    if which not in PARTIAL_TAGS:
        raise ValueError(f"unknown partial tag {which!r}")
    name, _, var = which.rpartition("_d")
    fn = getattr(spec, name)
    if fn is None:
        raise ValueError(f"spec has no map {name!r}")

    def probe(tt, xx, uu):
        if name in ("terminal_cost", "constraint"):
            val = fn(tt, xx)
        else:
            val = fn(tt, xx, uu)
        val = np.asarray(val, dtype=float)
        if not np.all(np.isfinite(val)):
            raise NonFiniteEvaluation(f"{name} returned non-finite value at t={tt}")
        return val

    if var == "t":
        step = _fd_step(h, t)
        return (probe(t + step, x, u) - probe(t - step, x, u)) / (2.0 * step)
    if var == "x":
        x = np.asarray(x, dtype=float)
        step = _fd_step(h, np.max(np.abs(x)) if x.size else 0.0)
        return (probe(t, x + step, u) - probe(t, x - step, u)) / (2.0 * step)
    # var == "u"
    u = np.asarray(u, dtype=float)
    step = _fd_step(h, np.max(np.abs(u)) if u.size else 0.0)
    return (probe(t, x, u + step) - probe(t, x, u - step)) / (2.0 * step)


def partial_value(spec: ProblemSpec, which: str, t, x, u=None):
    """Analytic partial when supplied on the spec, else the FD fallback."""
    fn = getattr(spec, which)
    if fn is not None:
        name = which.rpartition("_d")[0]
        if name in ("terminal_cost", "constraint"):
            return fn(t, x)
        return fn(t, x, u)
    return finite_diff_partials(spec, which, t, x, u)


def on_grid_mass(rho0: InitialDensity, grid: Grid1D) -> float:
    """Mass of the initial density restricted to the grid."""
    return trapezoid(rho0.discretize(grid))
