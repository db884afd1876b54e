"""Uniform 1-D space/time grids, grid-sampled fields, and discrete calculus."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid1D",
    "TimeGrid",
    "Field",
    "gradient_central",
    "second_derivative",
    "trapezoid",
    "interp_linear",
    "field_to_csv",
    "field_from_csv",
]

# 17 significant digits round-trips IEEE doubles exactly.
CSV_FMT = "%.17g"


@dataclass(frozen=True)
class Grid1D:
    """Uniform spatial grid with n >= 3 nodes on [x_min, x_max]."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError(f"grid needs >= 3 nodes, got {self.n}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    def clip(self, x):
        return np.clip(x, self.x_min, self.x_max)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid from t0 to t1 with `steps` intervals."""

    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t1, self.steps + 1)


@dataclass(frozen=True)
class Field:
    """Real values sampled on a Grid1D. Treated as an immutable value."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n,):
            raise ValueError(f"values shape {vals.shape} != grid size ({self.grid.n},)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_callable(cls, grid: Grid1D, fn) -> "Field":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float) * np.ones(grid.n))


def gradient_central(f: Field) -> Field:
    """First derivative: second-order central interior, one-sided at the ends."""
    return Field(f.grid, np.gradient(f.values, f.grid.dx, edge_order=2))


def second_derivative(f: Field) -> Field:
    """Second derivative: three-point stencil interior, one-sided second-order ends."""
    v = f.values
    dx2 = f.grid.dx ** 2
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dx2
    out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / dx2
    out[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / dx2
    return Field(f.grid, out)


def trapezoid(f: Field) -> float:
    """Trapezoidal quadrature of the field over its grid."""
    return float(np.trapezoid(f.values, dx=f.grid.dx))


def interp_linear(f: Field, x):
    """Piecewise-linear interpolation at x.

    Points outside [x_min, x_max] are clamped to the boundary value; the
    second return value flags which query points were in range.
    """
    x = np.asarray(x, dtype=float)
    in_range = (x >= f.grid.x_min) & (x <= f.grid.x_max)
    vals = np.interp(x, f.grid.nodes, f.values)
    if vals.ndim == 0:
        return float(vals), bool(in_range)
    return vals, in_range


def field_to_csv(f: Field, path) -> None:
    """Write the field as a two-column CSV with header x,value."""
    data = np.column_stack([f.grid.nodes, f.values])
    np.savetxt(path, data, fmt=CSV_FMT, delimiter=",", header="x,value", comments="")


def field_from_csv(path) -> Field:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    x, v = data[:, 0], data[:, 1]
    grid = Grid1D(float(x[0]), float(x[-1]), len(x))
    if not np.allclose(x, grid.nodes, atol=1e-12 * max(1.0, abs(x[-1]))):
        raise ValueError("CSV nodes are not a uniform grid")
    return Field(grid, v)
