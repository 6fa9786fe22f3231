"""Uniform box grids, node fields and the discrete H/V norms.

Nodes are stored in row-major order (axis 0 slowest). A field is a flat
array with one value per node; ensembles stack extra leading axes in front
of the node axis. Outside the closed box every field is taken to be zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor grid on a box ``D = prod_k (a_k, b_k)`` in one or two dimensions.

    ``resolution[k]`` counts nodes along axis ``k``, boundary nodes included.
    """

    extents: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @cached_property
    def h(self) -> np.ndarray:
        return np.array([(b - a) / (n - 1) for (a, b), n in zip(self.extents, self.resolution)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weight per node: volume of the node's cell clipped to the box."""
        w = np.ones(1)
        for n, hk in zip(self.resolution, self.h):
            wk = np.full(n, hk)
            wk[[0, -1]] = 0.5 * hk
            w = np.multiply.outer(w, wk).ravel()
        return w

    @property
    def volume(self) -> float:
        """Exact Lebesgue measure of the box."""
        return float(np.prod([b - a for a, b in self.extents]))

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(a, b, n) for (a, b), n in zip(self.extents, self.resolution))

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``."""
        mesh = np.meshgrid(*self.coords, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.shape)
        mask = np.zeros(self.shape, dtype=bool)
        for k, n in enumerate(self.shape):
            mask |= (idx[k] == 0) | (idx[k] == n - 1)
        return mask.ravel()

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @property
    def n_interior(self) -> int:
        return int(self.interior_mask.sum())

    def check(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.size:
            raise GridError(f"field has {values.shape[-1]} node values, grid has {self.size}")
        return values

    # quadrature -----------------------------------------------------------

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Node quadrature over the closed box (trapezoid weights, last axis)."""
        return self.check(values) @ self.weights

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.integrate(np.asarray(f) * np.asarray(g))

    def gradient(self, values: np.ndarray) -> list[np.ndarray]:
        """Central differences inside, first-order one-sided at the index boundary."""
        values = self.check(values)
        arr = values.reshape(values.shape[:-1] + self.shape)
        lead = values.ndim - 1
        out = []
        for k in range(self.dim):
            g = np.gradient(arr, self.h[k], axis=lead + k, edge_order=1)
            out.append(g.reshape(values.shape))
        return out

    def l2_norm(self, values: np.ndarray) -> np.ndarray:
        return np.sqrt(self.inner(values, values))

    def sobolev_norm(self, values: np.ndarray) -> np.ndarray:
        sq = self.inner(values, values)
        for g in self.gradient(values):
            sq = sq + self.inner(g, g)
        return np.sqrt(sq)

    def evaluate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation inside the closed box, exactly 0 outside."""
        values = self.check(values)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.dim == 1 and pts.shape[-1] != 1:
            pts = pts.reshape(-1, 1)
        interp = RegularGridInterpolator(
            self.coords, values.reshape(self.shape), bounds_error=False, fill_value=0.0
        )
        return interp(pts)

    def node_values(self, func) -> np.ndarray:
        """Evaluate ``func(*coords)`` at every node."""
        return np.asarray(func(*self.points.T), dtype=float) * np.ones(self.size)

    def describe(self) -> dict:
        return {"extents": [list(e) for e in self.extents], "resolution": list(self.resolution)}


def build_grid(domain: Sequence, resolution: int | Sequence[int]) -> Grid:
    """Build a uniform grid on a box.

    ``domain`` is ``(a, b)`` for an interval or a sequence of per-axis
    intervals; ``resolution`` is a node count per axis (a scalar applies to
    every axis).
    """
    dom = np.asarray(domain, dtype=float)
    if dom.ndim == 1:
        dom = dom[None, :]
    if dom.ndim != 2 or dom.shape[1] != 2:
        raise GridError("domain must be an interval (a, b) or a list of intervals")
    dim = dom.shape[0]
    if dim not in (1, 2):
        raise GridError(f"only 1D and 2D boxes are supported, got dim={dim}")
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (dim,))
    for (a, b) in dom:
        if not np.isfinite(a) or not np.isfinite(b) or b - a <= 0:
            raise GridError(f"degenerate extent ({a}, {b})")
    if np.any(res < 3):
        raise GridError(f"resolution must be >= 3 per axis, got {res.tolist()}")
    return Grid(tuple((float(a), float(b)) for a, b in dom), tuple(int(n) for n in res))


@dataclass(frozen=True, eq=False)
class Field:
    """Node values bound to a grid; evaluates to 0 outside the closed box."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", self.grid.check(self.values))

    def __call__(self, points) -> np.ndarray:
        return self.grid.evaluate(self.values, points)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @classmethod
    def from_function(cls, grid: Grid, func) -> Field:
        return cls(grid, grid.node_values(func))


@dataclass(frozen=True, eq=False)
class TimeField:
    """Fields on the uniform time grid ``t_m = m T / M``.

    ``values`` has shape ``(..., M + 1, size)``; a leading axis, when present,
    indexes Monte Carlo paths.
    """

    grid: Grid
    T: float
    values: np.ndarray

    @property
    def M(self) -> int:
        return self.values.shape[-2] - 1

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    def at(self, m: int) -> np.ndarray:
        return self.values[..., m, :]


def l2_norm(f: Field) -> float:
    return float(f.grid.l2_norm(f.values))


def sobolev_norm(f: Field) -> float:
    return float(f.grid.sobolev_norm(f.values))
