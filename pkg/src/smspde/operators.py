"""Finite-difference second-order operators and their formal adjoints.

    A phi  = sum_ij a_ij d_i d_j phi + sum_i b_i d_i phi + c phi
    A* phi = sum_ij d_i d_j (a_ij phi) - sum_i d_i (b_i phi)

Coefficients are polynomial descriptors, so the derivatives entering the
adjoint are exact. Boundary rows of every assembled matrix are zero: the
operator does not act on Dirichlet nodes, and time steppers impose the
boundary data themselves (``I - dt A`` has identity boundary rows).

Sign convention for the coercivity check: the evolution uses ``+A`` in the
drift, so the Garding form is evaluated for ``-A`` (the Dirichlet energy of
``-1/2 Laplacian`` is positive).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import numpy.polynomial.polynomial as npoly
import scipy.sparse as sp

from .grid import Grid


class Coefficient:
    """Polynomial in the spatial coordinates (degree <= 2 per axis by convention).

    ``coef[i, j]`` multiplies ``x**i * y**j`` in 2D; a 1D descriptor is a
    plain coefficient vector.
    """

    def __init__(self, coef, dim: int):
        coef = np.atleast_1d(np.asarray(coef, dtype=float))
        if coef.ndim == 1 and dim == 2:
            coef = coef[:, None]
        if coef.ndim != dim:
            raise ValueError(f"coefficient array must have {dim} axes, got shape {coef.shape}")
        self.coef = coef
        self.dim = dim

    @classmethod
    def constant(cls, value: float, dim: int) -> Coefficient:
        return cls(np.full((1,) * dim, float(value)), dim)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        if self.dim == 1:
            return npoly.polyval(points[:, 0], self.coef)
        return npoly.polyval2d(points[:, 0], points[:, 1], self.coef)

    def deriv(self, axis: int) -> Coefficient:
        if self.coef.shape[axis] == 1:
            return Coefficient(np.zeros_like(self.coef), self.dim)
        return Coefficient(npoly.polyder(self.coef, axis=axis), self.dim)

    def __repr__(self):
        return f"Coefficient({self.coef.tolist()})"


def as_coefficient(value, dim: int) -> Coefficient:
    if isinstance(value, Coefficient):
        return value
    if np.isscalar(value):
        return Coefficient.constant(value, dim)
    return Coefficient(value, dim)


def _alpha_descriptors(alpha, dim: int) -> list[list[Coefficient]]:
    if isinstance(alpha, Coefficient) or np.isscalar(alpha):
        a = as_coefficient(alpha, dim)
        zero = Coefficient.constant(0.0, dim)
        return [[a if i == j else zero for j in range(dim)] for i in range(dim)]
    rows = list(alpha)
    if len(rows) != dim or any(len(r) != dim for r in rows):
        raise ValueError(f"alpha must be a scalar or a {dim}x{dim} nested list")
    return [[as_coefficient(rows[i][j], dim) for j in range(dim)] for i in range(dim)]


def _beta_descriptors(beta, dim: int) -> list[Coefficient]:
    if beta is None:
        return [Coefficient.constant(0.0, dim) for _ in range(dim)]
    if isinstance(beta, Coefficient) or np.isscalar(beta):
        if dim != 1:
            raise ValueError("beta must list one coefficient per axis")
        return [as_coefficient(beta, dim)]
    items = list(beta)
    if dim == 1 and len(items) != 1:
        return [as_coefficient(items, dim)]
    if len(items) != dim:
        raise ValueError(f"beta must have {dim} entries")
    return [as_coefficient(b, dim) for b in items]


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    """Assembled operator: nodal coefficient fields plus the sparse action table."""

    grid: Grid
    alpha: np.ndarray  # (dim, dim, size)
    beta: np.ndarray  # (dim, size)
    c: np.ndarray  # (size,)
    matrix: sp.csr_matrix
    descriptors: dict = field(default_factory=dict, repr=False)

    def apply(self, values: np.ndarray) -> np.ndarray:
        arr = self.grid.check(values)
        flat = arr.reshape(-1, self.grid.size)
        return (self.matrix @ flat.T).T.reshape(arr.shape)

    def interior_block(self) -> sp.csr_matrix:
        idx = np.flatnonzero(self.grid.interior_mask)
        return self.matrix[idx][:, idx]

    def stepping_matrix(self, dt: float) -> sp.csc_matrix:
        return (sp.identity(self.grid.size, format="csc") - dt * self.matrix).tocsc()


def _assemble(grid: Grid, alpha: np.ndarray, beta: np.ndarray, c: np.ndarray) -> sp.csr_matrix:
    dim, shape, h = grid.dim, grid.shape, grid.h
    idx = np.indices(shape).reshape(dim, -1).T
    interior = np.flatnonzero(grid.interior_mask)
    I = idx[interior]
    rows, cols, vals = [], [], []

    def add(offset, weight):
        nb = I + np.asarray(offset)
        rows.append(interior)
        cols.append(np.ravel_multi_index(nb.T, shape))
        vals.append(weight)

    add((0,) * dim, c[interior])
    for k in range(dim):
        e = np.zeros(dim, dtype=int)
        e[k] = 1
        a = alpha[k, k, interior] / h[k] ** 2
        b = beta[k, interior] / (2.0 * h[k])
        add(e, a + b)
        add(-e, a - b)
        add((0,) * dim, -2.0 * a)
    if dim == 2:
        # mixed derivative: (a_12 + a_21) d1 d2 on the 4-point cross stencil
        m = (alpha[0, 1, interior] + alpha[1, 0, interior]) / (4.0 * h[0] * h[1])
        for (s0, s1, sgn) in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
            add((s0, s1), sgn * m)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


def _check_alpha(alpha: np.ndarray, tol: float = 1e-12):
    a = np.moveaxis(alpha, -1, 0)
    if not np.allclose(a, np.swapaxes(a, 1, 2), atol=tol):
        raise ValueError("alpha is not symmetric")
    eig = np.linalg.eigvalsh(a)
    scale = max(1.0, float(np.abs(eig).max()))
    bad = np.flatnonzero(eig.min(axis=1) < -tol * scale)
    if bad.size:
        raise ValueError(
            f"alpha is indefinite at {bad.size} node(s), e.g. node {bad[0]} "
            f"(min eigenvalue {eig[bad[0]].min():.3g})"
        )


def assemble_operator(grid: Grid, alpha, beta=None, c=0.0) -> EllipticOperator:
    """Central-difference discretization of ``A``.

    ``alpha`` is a scalar (times the identity) or a nested ``dim x dim`` list of
    coefficient descriptors; ``beta`` lists one descriptor per axis; ``c`` is
    an optional zeroth-order coefficient.
    """
    dim, pts = grid.dim, grid.points
    a_desc = _alpha_descriptors(alpha, dim)
    b_desc = _beta_descriptors(beta, dim)
    c_desc = as_coefficient(c, dim)
    a_val = np.array([[a_desc[i][j](pts) for j in range(dim)] for i in range(dim)])
    b_val = np.array([b(pts) for b in b_desc])
    c_val = c_desc(pts)
    _check_alpha(a_val)
    mat = _assemble(grid, a_val, b_val, c_val)
    return EllipticOperator(grid, a_val, b_val, c_val, mat, {"alpha": a_desc, "beta": b_desc, "c": c_desc})


def assemble_adjoint(grid: Grid, alpha, beta=None, c=0.0) -> EllipticOperator:
    """Discretize the formal adjoint of ``A`` from the analytic expansion.

    With symmetric ``a``:
        first-order coefficient  b*_j = sum_i (d_i a_ij + d_i a_ji) - b_j
        zeroth-order coefficient c*   = sum_ij d_i d_j a_ij - sum_i d_i b_i + c
    """
    dim, pts = grid.dim, grid.points
    a_desc = _alpha_descriptors(alpha, dim)
    b_desc = _beta_descriptors(beta, dim)
    c_desc = as_coefficient(c, dim)
    a_val = np.array([[a_desc[i][j](pts) for j in range(dim)] for i in range(dim)])
    _check_alpha(a_val)
    b_star = np.zeros((dim, grid.size))
    for j in range(dim):
        acc = -b_desc[j](pts)
        for i in range(dim):
            acc = acc + a_desc[i][j].deriv(i)(pts) + a_desc[j][i].deriv(i)(pts)
        b_star[j] = acc
    c_star = c_desc(pts).copy()
    for i in range(dim):
        c_star -= b_desc[i].deriv(i)(pts)
        for j in range(dim):
            c_star += a_desc[i][j].deriv(i).deriv(j)(pts)
    mat = _assemble(grid, a_val, b_star, c_star)
    return EllipticOperator(grid, a_val, b_star, c_star, mat, {"alpha": a_desc, "beta": b_desc, "c": c_desc})


def laplacian(grid: Grid, scale: float = 0.5) -> EllipticOperator:
    """``scale * Laplacian``; the harvesting models use ``scale = 1/2``."""
    return assemble_operator(grid, scale)


def zero_operator(grid: Grid) -> EllipticOperator:
    return assemble_operator(grid, 0.0)


@dataclass
class CoercivityReport:
    min_ratio: float
    ratios: np.ndarray
    passed: bool
    lam: float
    alpha_coer: float


def random_interior_fields(grid: Grid, trials: int, rng: np.random.Generator, margin: int = 2) -> np.ndarray:
    """White-noise fields vanishing within ``margin`` index layers of the boundary."""
    idx = np.indices(grid.shape).reshape(grid.dim, -1).T
    shape = np.asarray(grid.shape)
    keep = np.all((idx >= margin) & (idx <= shape - 1 - margin), axis=1)
    u = rng.standard_normal((trials, grid.size))
    u[:, ~keep] = 0.0
    return u


def check_coercivity(
    op: EllipticOperator,
    lam: float,
    alpha_coer: float,
    trials: int = 20,
    seed: int = 0,
    fields: Sequence[np.ndarray] | None = None,
) -> CoercivityReport:
    """Probe ``2<-A u, u> + lam |u|_H^2 >= alpha |u|_V^2`` on random fields.

    Reports the smallest observed ratio ``(2<-Au,u> + lam|u|_H^2) / |u|_V^2``.
    Explicit ``fields`` replace the random draws.
    """
    grid = op.grid
    if fields is None:
        if trials < 1:
            raise ValueError("trials must be >= 1")
        u = random_interior_fields(grid, trials, np.random.default_rng(seed))
    else:
        u = np.atleast_2d(np.asarray(fields, dtype=float))
    ratios = []
    for v in u:
        vv = grid.sobolev_norm(v) ** 2
        if vv == 0.0:
            continue
        form = 2.0 * grid.inner(-op.apply(v), v) + lam * grid.inner(v, v)
        ratios.append(form / vv)
    ratios = np.asarray(ratios)
    if ratios.size == 0:
        raise ValueError("all probe fields are zero")
    m = float(ratios.min())
    return CoercivityReport(m, ratios, bool(m >= alpha_coer), float(lam), float(alpha_coer))


def transpose_operator(op: EllipticOperator) -> EllipticOperator:
    """Weighted transpose of the discrete ``A`` restricted to interior nodes.

    Interior weights are uniform, so this is the plain transpose of the
    interior block, embedded with zero boundary rows. It coincides with
    :func:`assemble_adjoint` for constant coefficients and differs by O(h)
    otherwise; backward sweeps built on it give exact discrete gradients.
    """
    grid = op.grid
    keep = sp.diags(grid.interior_mask.astype(float))
    mat = (keep @ op.matrix.T @ keep).tocsr()
    mat.eliminate_zeros()
    return EllipticOperator(grid, op.alpha, op.beta, op.c, mat, dict(op.descriptors, transposed=True))
