"""Ball averages over ``K_theta`` and their duals on a grid.

The averaging operator

    G f(x) = 1/V(K_theta) * integral over K_theta of f(x + y) dy

is discretized by summing the quadrature weights of the nodes whose
centres fall strictly inside the ball around ``x``. Nodes outside the
closed box are simply absent, which is the zero extension of the field;
the missing mass near the boundary is not renormalized.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .grid import Field, Grid, GridError

EXACT = "exact"
PAPER_POINTWISE = "paper-pointwise"
DUAL_MODES = (EXACT, PAPER_POINTWISE)

# offsets with |d h| within this relative distance of theta count as outside
_EDGE_RTOL = 1e-9


def ball_volume(theta: float, dim: int) -> float:
    if dim == 1:
        return 2.0 * theta
    if dim == 2:
        return np.pi * theta**2
    raise ValueError(f"unsupported dimension {dim}")


@dataclass(frozen=True, eq=False)
class BallKernel:
    """Sparse node-weight table of the ball average on one grid.

    ``matrix[x, y] = w_y / V(K_theta)`` whenever ``|x - y| < theta``, with
    ``w_y`` the quadrature weight of node ``y``.
    """

    grid: Grid
    theta: float
    offsets: np.ndarray
    matrix: sp.csr_matrix

    @property
    def volume(self) -> float:
        return ball_volume(self.theta, self.grid.dim)

    @cached_property
    def dual_matrix(self) -> sp.csr_matrix:
        # transpose in the weighted inner product <f, g> = sum w f g
        w = self.grid.weights
        return (sp.diags(1.0 / w) @ self.matrix.T @ sp.diags(w)).tocsr()

    @cached_property
    def coverage(self) -> np.ndarray:
        return coverage_vD(self.grid, self.theta)

    def stencil(self, node: int) -> list[tuple[int, float]]:
        row = self.matrix.getrow(node)
        return list(zip(row.indices.tolist(), row.data.tolist()))

    def weight_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def build_kernel(grid: Grid, theta: float) -> BallKernel:
    """Assemble the ball-average table for radius ``theta``."""
    theta = float(theta)
    if not np.isfinite(theta) or theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    reach = [int(np.floor(theta / hk)) for hk in grid.h]
    offsets = []
    for d in itertools.product(*(range(-r, r + 1) for r in reach)):
        dist = np.sqrt(np.sum((np.asarray(d) * grid.h) ** 2))
        if dist < theta * (1.0 - _EDGE_RTOL):
            offsets.append(d)
    offsets = np.asarray(offsets, dtype=int).reshape(-1, grid.dim)
    if len(offsets) <= 1:
        raise ValueError(
            f"theta={theta} does not reach any neighbour (h={grid.h.tolist()}); "
            "the ball average would be the node value alone"
        )

    idx = np.indices(grid.shape).reshape(grid.dim, -1).T
    V = ball_volume(theta, grid.dim)
    w = grid.weights
    rows, cols = [], []
    for d in offsets:
        nb = idx + d
        ok = np.all((nb >= 0) & (nb < np.asarray(grid.shape)), axis=1)
        rows.append(np.flatnonzero(ok))
        cols.append(np.ravel_multi_index(nb[ok].T, grid.shape))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    mat = sp.csr_matrix((w[cols] / V, (rows, cols)), shape=(grid.size, grid.size))
    mat.sort_indices()
    return BallKernel(grid, theta, offsets, mat)


def _apply(mat: sp.csr_matrix, f, grid: Grid):
    if isinstance(f, Field):
        if f.grid is not grid:
            raise GridError("field and kernel live on different grids")
        return Field(grid, mat @ f.values)
    arr = grid.check(f)
    flat = arr.reshape(-1, grid.size)
    return (mat @ flat.T).T.reshape(arr.shape)


def apply_G(f, kernel: BallKernel):
    """Ball average of ``f`` (a Field or an array whose last axis is the node axis)."""
    return _apply(kernel.matrix, f, kernel.grid)


def apply_G_dual(psi, kernel: BallKernel):
    """Adjoint of :func:`apply_G` with respect to the grid inner product."""
    return _apply(kernel.dual_matrix, psi, kernel.grid)


def _overlap_1d(x, a, b, theta):
    # written as 2*theta minus the clipped parts so full balls give exactly 2*theta
    cut_lo = np.clip(a - (x - theta), 0.0, None)
    cut_hi = np.clip((x + theta) - b, 0.0, None)
    return np.clip(2.0 * theta - cut_lo - cut_hi, 0.0, None)


def _disc_strip_integral(s0, s1, c, theta):
    """Integral over s in [s0, s1] of min(c, sqrt(theta^2 - s^2)), c >= 0."""

    def arc(s):
        s = np.clip(s, -theta, theta)
        return 0.5 * (s * np.sqrt(np.maximum(theta**2 - s**2, 0.0)) + theta**2 * np.arcsin(s / theta))

    sc = np.sqrt(np.maximum(theta**2 - c**2, 0.0))
    # |s| <= sc: the chord half-width exceeds c, the integrand is c
    lo = np.clip(s0, -sc, sc)
    hi = np.clip(s1, -sc, sc)
    flat = c * np.clip(hi - lo, 0.0, None)
    left = arc(np.minimum(s1, -sc)) - arc(np.minimum(s0, -sc))
    right = arc(np.maximum(s1, sc)) - arc(np.maximum(s0, sc))
    return flat + np.clip(left, 0.0, None) + np.clip(right, 0.0, None)


def coverage_vD(grid: Grid, theta: float) -> np.ndarray:
    """Fraction of the ball ``x + K_theta`` lying inside the box, per node.

    Exact in both dimensions: interval overlap in 1D, a closed-form
    disc/box intersection area in 2D.
    """
    theta = float(theta)
    if not np.isfinite(theta) or theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    pts = grid.points
    if grid.dim == 1:
        (a, b), = grid.extents
        return _overlap_1d(pts[:, 0], a, b, theta) / (2.0 * theta)
    (a1, b1), (a2, b2) = grid.extents
    x1, x2 = pts[:, 0], pts[:, 1]
    s0 = np.maximum(a1 - x1, -theta)
    s1 = np.minimum(b1 - x1, theta)
    up = np.clip(b2 - x2, 0.0, None)
    down = np.clip(x2 - a2, 0.0, None)
    area = _disc_strip_integral(s0, s1, up, theta) + _disc_strip_integral(s0, s1, down, theta)
    v = np.clip(area / (np.pi * theta**2), 0.0, 1.0)
    inside = np.minimum.reduce([x1 - a1, b1 - x1, x2 - a2, b2 - x2]) >= theta
    v[inside] = 1.0
    return v


def averaged_dual(c, kernel: BallKernel, mode: str = EXACT):
    """Row integral of the dual kernel applied to a slope field ``c``.

    ``exact`` averages ``c`` over ``(x + K_theta) ∩ D``; ``paper-pointwise``
    multiplies ``c(x)`` by the coverage fraction. The two agree for
    spatially constant ``c``.
    """
    if mode == EXACT:
        return apply_G_dual(c, kernel)
    if mode == PAPER_POINTWISE:
        if isinstance(c, Field):
            if c.grid is not kernel.grid:
                raise GridError("field and kernel live on different grids")
            return Field(kernel.grid, kernel.coverage * c.values)
        return kernel.coverage * kernel.grid.check(c)
    raise ValueError(f"unknown dual mode {mode!r}; expected one of {DUAL_MODES}")
