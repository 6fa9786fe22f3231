import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smspde.grid import Field, GridError, build_grid
from smspde.spacemean import (
    EXACT,
    PAPER_POINTWISE,
    apply_G,
    apply_G_dual,
    averaged_dual,
    build_kernel,
    coverage_vD,
)


def node(grid, x):
    return int(np.argmin(np.abs(grid.points[:, 0] - x)))


def test_1d_stencil_offsets(unit1d):
    k = build_kernel(unit1d, 0.05)
    assert sorted(k.offsets[:, 0].tolist()) == list(range(-4, 5))
    assert k.volume == pytest.approx(0.1)


def test_2d_disc_stencil():
    g = build_grid([(0.0, 1.0), (0.0, 1.0)], 21)
    k = build_kernel(g, 1.5 * g.h[0])
    got = {tuple(d) for d in k.offsets.tolist()}
    assert got == {(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)}
    assert k.volume == pytest.approx(np.pi * (1.5 * g.h[0]) ** 2)


@pytest.mark.parametrize("theta", [0.0, -0.1, 0.005])
def test_bad_theta(unit1d, theta):
    with pytest.raises(ValueError):
        build_kernel(unit1d, theta)


def test_stencil_symmetric(unit1d):
    k = build_kernel(unit1d, 0.07)
    offs = {tuple(d) for d in k.offsets.tolist()}
    assert offs == {tuple(-np.asarray(d)) for d in offs}


def test_constant_and_zero_fields(unit1d):
    k = build_kernel(unit1d, 0.1)
    out = apply_G(np.full(unit1d.size, 3.0), k)
    inside = np.abs(unit1d.points[:, 0] - 0.5) < 0.35
    # cell-centre rule: 2r+1 nodes of width h cover 2 theta - h
    np.testing.assert_allclose(out[inside], 3.0, rtol=unit1d.h[0] / 0.1 + 1e-12)
    assert np.all(apply_G(np.zeros(unit1d.size), k) == 0.0)


def test_indicator_half_interval(unit1d):
    k = build_kernel(unit1d, 0.1)
    f = ((unit1d.points[:, 0] > 0) & (unit1d.points[:, 0] < 0.5)).astype(float)
    assert apply_G(f, k)[node(unit1d, 0.5)] == pytest.approx(0.5, abs=2 * unit1d.h[0] / 0.1)


def test_adjoint_identity_brute_force(rng):
    g = build_grid([(0.0, 1.0)], 41)
    k = build_kernel(g, 0.1)
    f, psi = rng.standard_normal((2, g.size))
    # brute-force double sum over node pairs
    V = 0.2
    lhs = rhs = 0.0
    pts, w = g.points[:, 0], g.weights
    for i in range(g.size):
        for j in range(g.size):
            if abs(pts[i] - pts[j]) < 0.1 * (1 - 1e-9):
                lhs += w[i] * psi[i] * w[j] * f[j] / V
    rhs = g.inner(f, apply_G_dual(psi, k))
    assert rhs == pytest.approx(lhs, rel=1e-12)
    assert g.inner(apply_G(f, k), psi) == pytest.approx(lhs, rel=1e-12)


def test_dual_of_delta(unit1d):
    k = build_kernel(unit1d, 0.05)
    y0 = node(unit1d, 0.5)
    psi = np.zeros(unit1d.size)
    psi[y0] = 1.0
    out = apply_G_dual(psi, k)
    near = np.abs(np.arange(unit1d.size) - y0) <= 4
    np.testing.assert_allclose(out[near], unit1d.h[0] / 0.1, rtol=1e-12)
    assert np.all(out[~near] == 0.0)
    assert np.all(apply_G_dual(np.zeros(unit1d.size), k) == 0.0)


def test_coverage_1d_and_2d(unit1d):
    v = coverage_vD(unit1d, 0.1)
    assert v[node(unit1d, 0.5)] == 1.0
    assert v[0] == 0.5
    g2 = build_grid([(0.0, 1.0), (0.0, 1.0)], 11)
    v2 = coverage_vD(g2, 0.1)
    assert v2[0] == pytest.approx(0.25, abs=1e-3)
    assert np.all((v2 >= 0) & (v2 <= 1))
    with pytest.raises(ValueError):
        coverage_vD(unit1d, 0.0)


def test_coverage_2d_against_sampling():
    g = build_grid([(0.0, 1.0), (0.0, 1.0)], 11)
    theta = 0.25
    v = coverage_vD(g, theta)
    rng = np.random.default_rng(0)
    r = theta * np.sqrt(rng.uniform(size=200_000))
    a = rng.uniform(0, 2 * np.pi, size=r.size)
    off = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    for i in (0, 3, 14, 60):
        pts = g.points[i] + off
        frac = np.mean(np.all((pts >= 0) & (pts <= 1), axis=1))
        assert v[i] == pytest.approx(frac, abs=5e-3)


def test_averaged_dual_modes():
    g = build_grid([(0.0, 1.0)], 1001)
    k = build_kernel(g, 0.1)
    ones = np.ones(g.size)
    v = coverage_vD(g, 0.1)
    tol = 2 * g.h[0] / 0.1
    np.testing.assert_allclose(averaged_dual(ones, k, EXACT), v, atol=tol)
    np.testing.assert_allclose(averaged_dual(ones, k, PAPER_POINTWISE), v, atol=1e-15)
    c = g.points[:, 0].copy()
    mid, near = node(g, 0.5), node(g, 0.05)
    assert averaged_dual(c, k, EXACT)[mid] == pytest.approx(0.5, rel=tol)
    assert averaged_dual(c, k, PAPER_POINTWISE)[mid] == pytest.approx(0.5, rel=1e-12)
    exact = averaged_dual(c, k, EXACT)[near]
    assert exact == pytest.approx(0.05625, rel=tol)
    assert averaged_dual(c, k, PAPER_POINTWISE)[near] == pytest.approx(0.0375, rel=1e-12)
    with pytest.raises(ValueError):
        averaged_dual(c, k, "other")


def test_exact_mode_is_dual(unit1d, rng):
    k = build_kernel(unit1d, 0.08)
    c = rng.standard_normal(unit1d.size)
    assert np.array_equal(averaged_dual(c, k, EXACT), apply_G_dual(c, k))


def test_grid_mismatch():
    g1 = build_grid([(0.0, 1.0)], 21)
    g2 = build_grid([(0.0, 1.0)], 21)
    k = build_kernel(g1, 0.2)
    with pytest.raises(GridError):
        apply_G(Field(g2, np.zeros(21)), k)
    with pytest.raises(GridError):
        apply_G(np.zeros(20), k)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    mult=st.sampled_from([5, 10, 20]),
    dim=st.sampled_from([1, 2]),
)
def test_contraction_linearity_adjointness(seed, mult, dim):
    n = 101 if dim == 1 else 41
    g = build_grid([(0.0, 1.0)] * dim, n)
    k = build_kernel(g, mult * g.h[0] * (1 if dim == 1 else 0.5))
    rng = np.random.default_rng(seed)
    f, h, psi = rng.standard_normal((3, g.size))
    a, b = rng.standard_normal(2)
    assert g.l2_norm(apply_G(f, k)) <= 1.02 * g.l2_norm(f)
    np.testing.assert_allclose(apply_G(a * f + b * h, k), a * apply_G(f, k) + b * apply_G(h, k), atol=1e-12)
    gap = abs(g.inner(apply_G(f, k), psi) - g.inner(f, apply_G_dual(psi, k)))
    assert gap <= 1e-12 * g.l2_norm(f) * g.l2_norm(psi)


@settings(max_examples=20, deadline=None)
@given(theta=st.floats(0.02, 0.6), n=st.integers(11, 80))
def test_coverage_bounds_and_interior(theta, n):
    g = build_grid([(0.0, 1.0)], n)
    v = coverage_vD(g, theta)
    assert np.all((v >= 0) & (v <= 1))
    x = g.points[:, 0]
    assert np.all(v[np.minimum(x, 1 - x) > theta] == 1.0)
