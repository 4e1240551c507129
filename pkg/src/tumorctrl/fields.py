"""Discrete geometry and field algebra on uniform Neumann grids.

Cell-centered finite volumes in 1D or 2D with mirror ghost cells, so the
discrete Laplacian is symmetric, negative semidefinite and exactly
conservative (its volume-weighted sum vanishes to round-off).  States live on
time nodes (n_steps + 1 snapshots); controls are piecewise constant on the
intervals between nodes (n_steps slices).  All inner products are volume- and
tau-weighted so norms approximate their L^2 counterparts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Fields do not live on compatible grids."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell-centered grid on a 1D interval or 2D rectangle."""

    dim: int
    n: tuple[int, ...]
    length: tuple[float, ...]

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "length", tuple(float(v) for v in self.length))
        if len(self.n) != self.dim or len(self.length) != self.dim:
            raise ValueError("n and length must have one entry per dimension")
        if any(v < 1 for v in self.n):
            raise ValueError("need at least one cell per axis")
        if any(v <= 0.0 for v in self.length):
            raise ValueError("domain extents must be positive")

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.n))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / m for L, m in zip(self.length, self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.length))

    def cell_centers(self) -> tuple[np.ndarray, ...]:
        """Per-axis center coordinates broadcast to flat cell order."""
        axes = [(np.arange(m) + 0.5) * h for m, h in zip(self.n, self.spacing)]
        if self.dim == 1:
            return (axes[0],)
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        return X.ravel(), Y.ravel()


def grid1d(n: int, length: float = 1.0) -> GridSpec:
    return GridSpec(1, (n,), (length,))


def grid2d(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> GridSpec:
    return GridSpec(2, (nx, ny), (lx, ly))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [0, T] with n_steps intervals."""

    t_final: float
    n_steps: int

    def __post_init__(self):
        if not self.t_final > 0.0:
            raise ValueError("t_final must be positive")
        if int(self.n_steps) < 1:
            raise ValueError("need at least one time step")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def tau(self) -> float:
        return self.t_final / self.n_steps

    def node_times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_steps + 1)

    def slice_times(self) -> np.ndarray:
        """Midpoints of the control intervals (t_n, t_{n+1}]."""
        return (np.arange(self.n_steps) + 0.5) * self.tau

    def node_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights over the nodes (sum = T)."""
        w = np.full(self.n_steps + 1, self.tau)
        w[0] = w[-1] = 0.5 * self.tau
        return w


def _freeze(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=float)
    if not np.all(np.isfinite(out)):
        raise ValueError("field values must be finite")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Field:
    """A single snapshot: one value per grid cell, flat storage."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = _freeze(np.ravel(self.values))
        if v.size != self.grid.n_cells:
            raise ShapeMismatch(
                f"expected {self.grid.n_cells} values, got {v.size}")
        object.__setattr__(self, "values", v)

    @classmethod
    def full(cls, grid: GridSpec, value: float) -> "Field":
        return cls(grid, np.full(grid.n_cells, float(value)))


@dataclass(frozen=True)
class SpaceTimeField:
    """Time-indexed field: (n_slices, n_cells) storage.

    n_slices = n_steps + 1 means a node field (states, adjoints);
    n_slices = n_steps means a piecewise-constant interval field (controls,
    linearization sources).
    """

    timegrid: TimeGrid
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = _freeze(np.atleast_2d(self.values))
        nt = self.timegrid.n_steps
        if v.shape[1] != self.grid.n_cells or v.shape[0] not in (nt, nt + 1):
            raise ShapeMismatch(
                f"expected ({nt} or {nt + 1}, {self.grid.n_cells}) values, "
                f"got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def on_nodes(self) -> bool:
        return self.values.shape[0] == self.timegrid.n_steps + 1

    @property
    def n_slices(self) -> int:
        return self.values.shape[0]

    def time_weights(self) -> np.ndarray:
        if self.on_nodes:
            return self.timegrid.node_weights()
        return np.full(self.timegrid.n_steps, self.timegrid.tau)

    def slice(self, k: int) -> Field:
        return Field(self.grid, self.values[k])

    @classmethod
    def zeros(cls, timegrid: TimeGrid, grid: GridSpec,
              on_nodes: bool = False) -> "SpaceTimeField":
        ns = timegrid.n_steps + (1 if on_nodes else 0)
        return cls(timegrid, grid, np.zeros((ns, grid.n_cells)))

    @classmethod
    def from_values(cls, timegrid, grid, values) -> "SpaceTimeField":
        return cls(timegrid, grid, values)


@dataclass(frozen=True)
class StateTriple:
    """Initial data (mu0, phi0, sigma0) as single snapshots."""

    mu: Field
    phi: Field
    sigma: Field

    def __post_init__(self):
        if not (self.mu.grid == self.phi.grid == self.sigma.grid):
            raise ShapeMismatch("state fields must share one grid")

    @property
    def grid(self) -> GridSpec:
        return self.mu.grid


@dataclass(frozen=True)
class Trajectory:
    """Time-resolved state (mu, phi, sigma), each on time nodes."""

    mu: SpaceTimeField
    phi: SpaceTimeField
    sigma: SpaceTimeField

    def __post_init__(self):
        for f in (self.mu, self.phi, self.sigma):
            if not f.on_nodes:
                raise ShapeMismatch("trajectory components live on time nodes")
        if not (self.mu.grid == self.phi.grid == self.sigma.grid):
            raise ShapeMismatch("trajectory components must share one grid")

    @property
    def grid(self) -> GridSpec:
        return self.mu.grid

    @property
    def timegrid(self) -> TimeGrid:
        return self.mu.timegrid

    def final_state(self) -> StateTriple:
        return StateTriple(self.mu.slice(-1), self.phi.slice(-1),
                           self.sigma.slice(-1))


def make_laplacian(grid: GridSpec):
    """Return a callable applying the mirrored-ghost Neumann Laplacian.

    Works on arrays whose last axis is the flat cell index, so a whole
    space-time block can be processed in one call.
    """
    if grid.dim == 1:
        h2 = grid.spacing[0] ** 2
        if grid.n[0] == 1:
            # both mirror ghosts equal the single cell value
            return lambda v: np.zeros_like(np.asarray(v, dtype=float))

        def lap(v: np.ndarray) -> np.ndarray:
            v = np.asarray(v, dtype=float)
            out = np.empty_like(v)
            out[..., 1:-1] = v[..., :-2] - 2.0 * v[..., 1:-1] + v[..., 2:]
            out[..., 0] = v[..., 1] - v[..., 0]
            out[..., -1] = v[..., -2] - v[..., -1]
            out /= h2
            return out

        return lap

    nx, ny = grid.n
    hx2, hy2 = (s ** 2 for s in grid.spacing)

    def lap(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        w = v.reshape(v.shape[:-1] + (nx, ny))
        out = np.zeros_like(w)
        if nx > 1:  # x-direction (axis -2)
            out[..., 1:-1, :] += (w[..., :-2, :] - 2.0 * w[..., 1:-1, :]
                                  + w[..., 2:, :]) / hx2
            out[..., 0, :] += (w[..., 1, :] - w[..., 0, :]) / hx2
            out[..., -1, :] += (w[..., -2, :] - w[..., -1, :]) / hx2
        if ny > 1:  # y-direction (axis -1)
            out[..., :, 1:-1] += (w[..., :, :-2] - 2.0 * w[..., :, 1:-1]
                                  + w[..., :, 2:]) / hy2
            out[..., :, 0] += (w[..., :, 1] - w[..., :, 0]) / hy2
            out[..., :, -1] += (w[..., :, -2] - w[..., :, -1]) / hy2
        return out.reshape(v.shape)

    return lap


def laplacian_neumann(f: Field) -> Field:
    """Discrete Neumann Laplacian of a single field."""
    return Field(f.grid, make_laplacian(f.grid)(f.values))


def _check_same_kind(a, b):
    if isinstance(a, Field) and isinstance(b, Field):
        if a.grid != b.grid:
            raise ShapeMismatch("fields on different grids")
        return "field"
    if isinstance(a, SpaceTimeField) and isinstance(b, SpaceTimeField):
        if a.grid != b.grid or a.timegrid != b.timegrid \
                or a.n_slices != b.n_slices:
            raise ShapeMismatch("space-time fields on different grids")
        return "spacetime"
    raise ShapeMismatch(f"cannot pair {type(a).__name__} with {type(b).__name__}")


def inner(a, b) -> float:
    """Volume-weighted (and tau-weighted) L^2 inner product."""
    kind = _check_same_kind(a, b)
    vol = a.grid.cell_volume
    if kind == "field":
        return float(vol * np.dot(a.values, b.values))
    w = a.time_weights()
    return float(vol * np.dot(w, np.einsum("ij,ij->i", a.values, b.values)))


def norm(a) -> float:
    return math.sqrt(max(inner(a, a), 0.0))


def slice_norms(u: SpaceTimeField, direction: str) -> np.ndarray:
    """Per-slice L^2 norms of a space-time field.

    direction "time": one spatial L^2(Omega) norm per time slice.
    direction "space": one temporal L^2(0,T) norm per cell.
    """
    vol = u.grid.cell_volume
    if direction == "time":
        return np.sqrt(vol * np.sum(u.values ** 2, axis=1))
    if direction == "space":
        w = u.time_weights()
        return np.sqrt(np.einsum("i,ij->j", w, u.values ** 2))
    raise ValueError(f"direction must be 'time' or 'space', got {direction!r}")


def spacetime_from_slices(timegrid, grid, slices) -> SpaceTimeField:
    return SpaceTimeField(timegrid, grid, np.stack([s for s in slices]))


def write_field_csv(path, u: SpaceTimeField, name: str) -> None:
    """CSV export: one row per cell per snapshot, columns t, x[, y], value."""
    coords = u.grid.cell_centers()
    times = u.timegrid.node_times() if u.on_nodes else u.timegrid.slice_times()
    cols = ["t", "x"] + (["y"] if u.grid.dim == 2 else []) + [name]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(times):
            row = u.values[k]
            for j in range(u.grid.n_cells):
                xy = ",".join(repr(float(c[j])) for c in coords)
                fh.write(f"{float(t)!r},{xy},{float(row[j])!r}\n")
