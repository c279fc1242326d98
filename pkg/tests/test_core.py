import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parakernel.core import (
    Grid, InsufficientDataError, InvalidDescriptorError, ScalarField, TimeGrid, Trajectory,
    boundary_contamination, holder_ratios, holder_seminorm, integrate, lp_norm, sample_field,
)


def test_grid_basics():
    g = Grid(2, 2.0, 8)
    assert g.h == 0.25 and g.shape == (8, 8) and g.size == 64
    assert g.cell_volume == pytest.approx(0.0625)
    assert np.allclose(g.node(g.center_index()), [1.0, 1.0])


def test_constant_descriptor():
    for g in (Grid(1, 1.0, 16), Grid(3, 2.0, 8)):
        f = sample_field(g, {"kind": "constant", "value": 1})
        assert np.all(f.values == 1.0)


def test_gaussian_peak_at_center():
    g = Grid(2, 1.0, 32)
    f = sample_field(g, {"kind": "gaussian", "center": [0.5, 0.5], "sigma": 0.1})
    assert f.values[16, 16] == 1.0


def test_random_reproducible():
    g = Grid(2, 1.0, 32)
    d = {"kind": "random", "seed": 7, "kmax": 3, "amplitude": 2.0}
    a, b = sample_field(g, d).values, sample_field(g, d).values
    assert np.array_equal(a, b)
    assert np.abs(a).max() == pytest.approx(2.0)
    assert not np.array_equal(a, sample_field(g, dict(d, seed=8)).values)


@pytest.mark.parametrize("desc", [
    {"kind": "nope"},
    {"kind": "gaussian", "sigma": 0.0},
    {"kind": "gaussian", "sigma": 0.1, "center": [2.0, 0.5]},
    {"kind": "random", "kmax": 2},
    {"kind": "random", "seed": 1, "kmax": 16},
    {"kind": "mode", "k": (1, 2, 3)},
])
def test_bad_descriptors(desc):
    with pytest.raises(InvalidDescriptorError):
        sample_field(Grid(2, 1.0, 32), desc)


def test_lp_norm_examples():
    for n in (1, 2, 3):
        g = Grid(n, 1.0, 8)
        one = np.ones(g.shape)
        for p in (1, 2, 3.5, math.inf):
            assert lp_norm(one, p, g) == pytest.approx(1.0, rel=1e-12)
    g = Grid(1, 1.0, 64)
    half = (g.coords() < 0.5).astype(float)
    assert lp_norm(half, 1, g) == pytest.approx(0.5, abs=1e-15)
    s = np.sin(2 * np.pi * g.coords())
    assert lp_norm(s, 2, g) == pytest.approx(math.sqrt(0.5), rel=1e-12)


def test_integrate_examples():
    g = Grid(3, 2.0, 8)
    assert integrate(np.ones(g.shape), g) == pytest.approx(8.0, rel=1e-14)
    g = Grid(1, 3.0, 50)
    assert abs(integrate(np.sin(2 * np.pi * g.coords() / 3.0), g)) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 3])
def test_integrate_narrow_gaussian(n):
    N = {1: 256, 2: 128, 3: 64}[n]
    g = Grid(n, 1.0, N)
    sigma = 0.05
    f = sample_field(g, {"kind": "gaussian", "sigma": sigma})
    # independent oracle: product of 1-D sums is the continuum integral for sigma >> h
    assert integrate(f) == pytest.approx((2 * np.pi) ** (n / 2) * sigma**n, rel=1e-3)
    nf = sample_field(g, {"kind": "gaussian", "sigma": sigma, "normalize": True, "amplitude": 3.0})
    assert integrate(nf) == pytest.approx(3.0, rel=1e-3)


fields = st.integers(0, 10_000).map(lambda s: sample_field(Grid(2, 1.0, 16), {"kind": "random", "seed": s, "kmax": 3}))


@settings(max_examples=40, deadline=None)
@given(fields, st.one_of(st.just(0.0), st.floats(1e-6, 50), st.floats(-50, -1e-6)), st.sampled_from([1.0, 1.5, 2.0, 4.0, math.inf]))
def test_lp_homogeneous(f, c, p):
    a = lp_norm(ScalarField(f.grid, c * f.values), p)
    assert a == pytest.approx(abs(c) * lp_norm(f, p), rel=1e-12, abs=1e-300)


def test_triangle_inequality_100_pairs():
    g = Grid(2, 1.0, 16)
    rng = np.random.default_rng(0)
    for k in range(100):
        f = rng.standard_normal(g.shape)
        h = rng.standard_normal(g.shape) * rng.uniform(0.1, 10)
        for p in (1, 2, 3, math.inf):
            assert lp_norm(f + h, p, g) <= lp_norm(f, p, g) + lp_norm(h, p, g) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_integrate_matches_l1_for_nonneg(seed):
    g = Grid(2, 1.0, 16)
    f = np.abs(sample_field(g, {"kind": "random", "seed": seed, "kmax": 3}).values)
    assert integrate(f, g) == pytest.approx(lp_norm(f, 1, g), rel=1e-12)


def test_holder_constant_zero():
    g = Grid(1, 1.0, 16)
    est = holder_seminorm(np.ones((3, 16)), 0.5, [0, 0.1, 0.2], g)
    assert est.value == 0.0 and est.exhaustive


def test_holder_linear_brute_force():
    g = Grid(1, 1.0, 64)
    x = g.coords()
    # independent O(M^2) loop
    best = 0.0
    for i in range(64):
        for j in range(i + 1, 64):
            d = abs(i - j)
            d = min(d, 64 - d) / 64
            best = max(best, abs(x[i] - x[j]) / d**0.5)
    est = holder_seminorm(x[None], 0.5, [0.0], g)
    assert est.value == pytest.approx(best, rel=1e-14)


def test_holder_monte_carlo_lower_bound():
    g = Grid(2, 1.0, 16)
    f = sample_field(g, {"kind": "random", "seed": 2, "kmax": 3}).values
    traj = np.stack([f, 0.5 * f, f**2])
    ex = holder_seminorm(traj, 0.4, [0, 0.1, 0.2], g)
    mc = holder_seminorm(traj, 0.4, [0, 0.1, 0.2], g, exhaustive_limit=10, n_pairs=2000, seed=3)
    assert ex.exhaustive and not mc.exhaustive
    assert mc.value <= ex.value


def test_holder_pairwise_monotone_in_beta():
    g = Grid(2, 1.0, 16)
    f = sample_field(g, {"kind": "random", "seed": 4, "kmax": 3}).values
    traj = np.stack([f, np.roll(f, 1, 0)])
    times = np.array([0.0, 0.3])
    est = holder_seminorm(traj, 0.3, times, g, exhaustive_limit=0, n_pairs=5000)
    i, j = est.pair_index
    r1 = holder_ratios(traj, times, g, 0.3, i, j)
    r2 = holder_ratios(traj, times, g, 0.7, i, j)
    # all distances <= 1, so d^0.7 <= d^0.3 and the larger exponent gives the larger ratio
    assert np.all(r2 >= r1 * (1 - 1e-14))


def test_holder_errors():
    g = Grid(1, 1.0, 8)
    with pytest.raises(ValueError):
        holder_seminorm(np.zeros((2, 8)), 1.0, [0, 1], g)
    with pytest.raises(InsufficientDataError):
        holder_seminorm(np.zeros(1), 0.5, [0], g)
    with pytest.raises(ValueError):
        Grid(1, 1.0, 4)


def test_boundary_contamination():
    g = Grid(2, 1.0, 64)
    bump = sample_field(g, {"kind": "gaussian", "sigma": 0.05})
    assert boundary_contamination(bump) < 1e-6
    assert boundary_contamination(np.ones(g.shape), g) > 0.1


def test_trajectory_interpolation():
    g = Grid(1, 1.0, 8)
    tr = Trajectory(g, [0.0, 1.0], np.array([np.zeros(8), np.ones(8)]))
    assert np.allclose(tr.at(0.25), 0.25)
    assert np.allclose(tr.at(5.0), 1.0)
    assert TimeGrid(0, 1, 4).dt == 0.25
    with pytest.raises(ValueError):
        TimeGrid(1, 1, 4)
