import math
from pathlib import Path

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parakernel import dual
from parakernel.core import Grid, ScalarField, TimeGrid, Trajectory, sample_field
from parakernel.dual import (
    DualProblem, Snapshots, auxiliary_solve, assemble_source, duality_identity, duality_identity_residual,
    energy_budget, operator_residual, picard_solve, quotient_A, source_terms, spectral_time_energy,
    viscosity_sweep,
)
from parakernel.green import StabilityError
from parakernel.harness import load_config
from parakernel.harness.experiments import snapshots_from, smooth_test_trajectory
from parakernel.spectral import plan_for

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def coupled():
    """Short coupled difference experiment on a 16^2 grid."""
    cfg = load_config(CONFIGS / "dual.cfg").with_overrides(**{"grid.N": 16, "time.M": 16})
    snap, r1, r2 = snapshots_from(cfg)
    psi0 = sample_field(snap.grid, {"kind": "random", "seed": 4, "kmax": 3}).values
    return snap, r1, r2, DualProblem(snap, 0.01, 0.5, 1.0, psi0)


# -- secant quotient --------------------------------------------------------------------------------


def test_quotient_examples():
    assert quotient_A(np.array([4.0]), np.array([0.0]), 1.0)[0] == 4.0
    assert quotient_A(np.array([2.0]), np.array([2.0]), 1.0)[0] == 4.0
    g = Grid(1, 1.0, 8)
    out = quotient_A(ScalarField(g, np.full(8, 4.0)), ScalarField(g, np.zeros(8)), 1.0)
    assert isinstance(out, ScalarField) and np.all(out.values == 4.0)


def test_quotient_negative_input():
    with pytest.raises(ValueError):
        quotient_A(np.array([-1.0]), np.array([1.0]), 0.5)


def test_quotient_high_precision_oracle():
    rng = np.random.default_rng(17)
    e1 = rng.uniform(0, 3, 200)
    e2 = rng.uniform(0, 3, 200)
    alpha = 0.37
    got = quotient_A(e1, e2, alpha)
    mpmath.mp.dps = 50
    for a, b, q in zip(e1, e2, got):
        A, B = mpmath.mpf(float(a)), mpmath.mpf(float(b))
        m = 1 + mpmath.mpf(alpha)
        ref = (A**m - B**m) / (A - B)
        assert abs(q - float(ref)) <= 1e-12 * max(1.0, abs(float(ref)))


_dens = st.floats(0.0, 10.0, allow_subnormal=False)


@settings(max_examples=200, deadline=None)
@given(_dens, _dens, st.floats(0.05, 2.0))
def test_quotient_mean_value_bounds_and_symmetry(a, b, alpha):
    q = quotient_A(np.array([a]), np.array([b]), alpha)[0]
    q2 = quotient_A(np.array([b]), np.array([a]), alpha)[0]
    lo = (1 + alpha) * min(a, b) ** alpha
    hi = (1 + alpha) * max(a, b) ** alpha
    assert lo - 1e-12 * max(1, hi) <= q <= hi + 1e-12 * max(1, hi)
    assert abs(q - q2) <= 1e-12 * max(1.0, q)


# -- snapshots --------------------------------------------------------------------------------------


def test_snapshots_validation():
    g = Grid(2, 1.0, 8)
    Snapshots.zeros(g, [0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        Snapshots.zeros(g, [0.1, 0.5])
    with pytest.raises(ValueError):
        Snapshots.zeros(g, [0.0, 0.2, 1.0])
    with pytest.raises(ValueError):
        Snapshots.zeros(g, [0.0, 1.0], eta1=-1.0)
    z = np.zeros((2,) + g.shape)
    x, _ = g.mesh()
    v = np.zeros((2, 2) + g.shape)
    v[:, 0] = np.cos(2 * np.pi * x)  # compressible
    with pytest.raises(ValueError):
        Snapshots(g, [0.0, 1.0], z, z, z, z, v, None)
    bad = z.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Snapshots(g, [0.0, 1.0], bad, z, z, z, np.zeros((2, 2) + g.shape), None)


def test_snapshots_reversed_is_view(coupled):
    snap = coupled[0]
    r = snap.reversed("eta1")
    assert np.shares_memory(r, snap.eta1)
    assert np.array_equal(r[0], snap.eta1[-1])


def test_problem_validation():
    snap = Snapshots.zeros(Grid(1, 1.0, 8), [0.0, 1.0])
    with pytest.raises(ValueError):
        DualProblem(snap, 0.0, 0.5)
    with pytest.raises(ValueError):
        DualProblem(snap, 0.1, 0.5, mu=-1.0)


# -- auxiliary solver -------------------------------------------------------------------------------


def test_auxiliary_eigenmode():
    g = Grid(1, 2.0, 32)
    f0 = ScalarField(g, np.sin(2 * np.pi * g.coords() / g.L))
    delta, mu = 0.3, 0.7
    tg = TimeGrid(0, 0.5, 10)
    sol = auxiliary_solve(np.zeros(g.shape), delta, mu, None, f0, tg)
    rate = delta * (2 * np.pi / g.L) ** 2 + mu
    for t, f in zip(tg.times, sol.trajectory.values):
        assert np.abs(f - math.exp(-rate * t) * f0.values).max() < 1e-6


def test_auxiliary_constant_datum():
    g = Grid(2, 1.0, 16)
    V = 0.5 + 0.4 * np.abs(sample_field(g, {"kind": "random", "seed": 3, "kmax": 3}).values)
    tg = TimeGrid(0, 0.2, 8)
    nsub = math.ceil(tg.dt / dual.aux_admissible_dt(float(V.max()), g))
    sol = auxiliary_solve(V, 0.1, 2.0, None, ScalarField(g, np.ones(g.shape)), tg, substeps=nsub)
    for t, f in zip(tg.times, sol.trajectory.values):
        assert np.allclose(f, math.exp(-2.0 * t), rtol=1e-12)


def test_auxiliary_stability_refusal():
    g = Grid(2, 1.0, 16)
    with pytest.raises(StabilityError) as e:
        auxiliary_solve(np.full(g.shape, 10.0), 0.1, 0.0, None, ScalarField(g, np.ones(g.shape)), TimeGrid(0, 0.1, 1))
    assert e.value.required_dt == pytest.approx(dual.aux_admissible_dt(10.0, g))


def test_auxiliary_input_checks():
    g = Grid(1, 1.0, 8)
    f0 = ScalarField(g, np.ones(8))
    with pytest.raises(ValueError):
        auxiliary_solve(-np.ones(8), 0.1, 0.0, None, f0, TimeGrid(0, 0.1, 1))
    with pytest.raises(ValueError):
        auxiliary_solve(np.ones(8), 0.0, 0.0, None, f0, TimeGrid(0, 0.1, 1))
    with pytest.raises(TypeError):
        auxiliary_solve(np.ones(8), 0.1, 0.0, None, np.ones(8), TimeGrid(0, 0.1, 1))


def _aux_residual(N, M):
    g = Grid(1, 1.0, N)
    x = g.coords()
    tg = TimeGrid(0, 0.05, M)
    V = np.array([0.2 * (1.2 + np.cos(2 * np.pi * x) * (1 + t)) for t in tg.times])
    G = np.array([np.sin(2 * np.pi * x) * np.cos(3 * t) for t in tg.times])
    f0 = ScalarField(g, np.cos(2 * np.pi * x) + 0.3 * np.sin(4 * np.pi * x))
    nsub = max(1, math.ceil(tg.dt / dual.aux_admissible_dt(float(V.max()), g)))
    sol = auxiliary_solve(V, 0.05, 1.0, G, f0, tg, substeps=nsub)
    return operator_residual(sol, V, 0.05, 1.0, G)


def test_auxiliary_residual_refines():
    r = [_aux_residual(16 * 2**j, 20 * 4**j) for j in range(3)]
    assert r[1] < r[0] and r[2] < r[1]
    assert r[2] < 0.5 * r[1]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 3.0))
def test_auxiliary_damping_property(seed, mu):
    g = Grid(2, 1.0, 16)
    V = np.abs(sample_field(g, {"kind": "random", "seed": seed, "kmax": 2}).values)
    f0 = sample_field(g, {"kind": "random", "seed": seed + 1, "kmax": 4})
    tg = TimeGrid(0, 0.1, 10)
    nsub = max(1, math.ceil(tg.dt / dual.aux_admissible_dt(float(V.max()), g)))
    sol = auxiliary_solve(V, 0.05, mu, None, f0, tg, substeps=nsub)
    n0 = np.linalg.norm(f0.values)
    for t, f in zip(tg.times, sol.trajectory.values):
        assert np.linalg.norm(f) <= math.exp(-mu * t) * n0 * (1 + 1e-6)


# -- sources ----------------------------------------------------------------------------------------


def test_source_vanishes_for_constant_iterate(coupled):
    prob = coupled[3]
    K = prob.theta.size
    G = assemble_source(np.full((K,) + prob.grid.shape, 2.5), prob)
    assert np.abs(G).max() < 1e-12


def test_source_vanishes_without_prefactors():
    g = Grid(2, 1.0, 16)
    snap = Snapshots.zeros(g, np.linspace(0, 0.1, 5), eta1=1.0, eta2=0.5)
    prob = DualProblem(snap, 0.01, 0.5)
    psi = np.array([sample_field(g, {"kind": "random", "seed": 1, "kmax": 3}).values] * 5)
    assert not np.any(assemble_source(psi, prob))


def test_source_first_term_activation(coupled):
    snap, _, _, prob = coupled
    psi = np.array([sample_field(snap.grid, {"kind": "random", "seed": 9, "kmax": 3}).values * (1 + t) for t in snap.times])
    st_ = source_terms(psi, prob, terms=(1,))
    plan = plan_for(snap.grid)
    direct = np.sum(snap.v1[::-1] * plan.grad(psi), axis=1)
    assert np.abs(st_.F1 - direct).max() <= 1e-10 * max(1.0, np.abs(direct).max())
    assert not np.any(st_.F2) and not np.any(st_.F3) and not np.any(st_.F4) and not np.any(st_.F5)
    assert np.any(st_.F1)


def test_source_coverage(coupled):
    prob = coupled[3]
    with pytest.raises(ValueError):
        assemble_source(np.zeros((3,) + prob.grid.shape), prob)


# -- Picard -----------------------------------------------------------------------------------------


def test_picard_decoupled():
    g = Grid(2, 1.0, 16)
    snap = Snapshots.zeros(g, np.linspace(0, 0.1, 11), eta1=0.6, eta2=0.6)
    psi0 = sample_field(g, {"kind": "random", "seed": 2, "kmax": 3}).values
    prob = DualProblem(snap, 0.02, 0.5, 1.0, psi0)
    psi, rep = picard_solve(prob, tol=1e-12)
    tg = TimeGrid(0, 0.1, 10)
    V = prob.A[::-1]
    nsub = max(1, math.ceil(tg.dt / dual.aux_admissible_dt(float(V.max()), g) - 1e-12))
    ref = auxiliary_solve(V, 0.02, 1.0, None, ScalarField(g, psi0), tg, nsub).trajectory.values
    assert np.array_equal(psi.values, ref)
    assert rep.converged and rep.iterations <= 2


def test_picard_coupled_contraction(coupled):
    prob = coupled[3]
    psi, rep = picard_solve(prob, tol=1e-8)
    assert rep.converged and not rep.flagged
    assert rep.max_ratio <= 0.6
    assert all(r > 0 for r in rep.ratios)
    assert max(rep.norms) <= 2 * rep.norms[0] * (1 + 1e-8)
    _, rep2 = picard_solve(prob, tol=1e-8)
    assert rep2.to_json() == rep.to_json()


def test_picard_needs_datum():
    snap = Snapshots.zeros(Grid(1, 1.0, 8), [0.0, 1.0])
    with pytest.raises(ValueError):
        picard_solve(DualProblem(snap, 0.1, 0.5))


def test_picard_divergence_error(coupled, monkeypatch):
    prob = coupled[3]
    monkeypatch.setattr(dual, "_iterate", lambda *a, **k: (None, [1.0], [1.0, 1.0], [0.95], 2, False, 1))
    with pytest.raises(dual.DivergenceError) as e:
        picard_solve(prob, mu_cap=4.0)
    assert e.value.report.flagged and e.value.report.mu_history == [1.0, 2.0, 4.0]


def test_picard_json(tmp_path, coupled):
    _, rep = picard_solve(coupled[3], tol=1e-6)
    p = dual.write_picard_json(rep, tmp_path / "p.json")
    import json
    data = json.loads(p.read_text())
    assert data["mu"] == rep.mu and data["ratios"] == rep.ratios


# -- sweep ------------------------------------------------------------------------------------------


def test_sweep_zero_datum(coupled):
    prob = coupled[3]
    chi = np.ones(prob.grid.shape)
    res = viscosity_sweep(prob, [0.1, 0.01, 0.001], chi, psi0=np.zeros(prob.grid.shape))
    for r in res.records:
        assert r.delta_l2_dpsi_sq == 0.0 and r.delta_chi_pairing == 0.0


def test_sweep_needs_two_decades(coupled):
    with pytest.raises(ValueError):
        viscosity_sweep(coupled[3], [0.1, 0.01], np.ones(coupled[3].grid.shape))


def test_sweep_csv(tmp_path):
    recs = [dual.SweepRecord(0.1, 1.0, 5, 0.2, 1.5, -0.25)]
    lines = dual.write_sweep_csv(recs, tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "delta,mu,iters,max_ratio,delta_l2_dpsi_sq,delta_chi_pairing"
    assert lines[1] == "0.10000000000000001,1,5,0.20000000000000001,1.5,-0.25"


def test_spectral_time_energy_exact_for_heat_decay():
    g = Grid(2, 1.0, 16)
    plan = plan_for(g)
    x, y = g.mesh()
    T = 0.03
    theta = np.linspace(0, T, 4)
    k1, k2 = (2 * np.pi) ** 2, (2 * np.pi * 3) ** 2 * 2
    f = np.array([np.cos(2 * np.pi * x) * np.exp(-k1 * t) + np.sin(6 * np.pi * (x + y)) * np.exp(-k2 * t) for t in theta])
    # closed form: each mode has L2 energy 1/2 on the unit torus
    exact = 0.5 * (1 - math.exp(-2 * k1 * T)) / (2 * k1) + 0.5 * (1 - math.exp(-2 * k2 * T)) / (2 * k2)
    assert spectral_time_energy(plan, f, theta) == pytest.approx(exact, rel=1e-12)
    # trapezoid weights overcharge the stiff mode by a wide margin on the same samples
    w = dual._trapz_weights(theta)
    trap = float(np.sum(w * np.sum(f**2, axis=(1, 2))) * g.cell_volume)
    assert trap > 1.3 * exact
    const = np.ones((4,) + g.shape)
    assert spectral_time_energy(plan, const, theta) == pytest.approx(T, rel=1e-14)


def test_spectral_time_energy_odd_grid():
    g = Grid(1, 2.0, 9)
    plan = plan_for(g)
    f = np.array([np.sin(2 * np.pi * 3 * g.coords() / g.L)] * 3)
    assert spectral_time_energy(plan, f, np.array([0.0, 0.5, 1.0])) == pytest.approx(1.0, rel=1e-12)


# -- energy budget ----------------------------------------------------------------------------------


def test_energy_budget_zero_snapshots():
    g = Grid(2, 1.0, 16)
    snap = Snapshots.zeros(g, np.linspace(0, 0.1, 6))
    psi0 = sample_field(g, {"kind": "random", "seed": 2, "kmax": 3}).values
    prob = DualProblem(snap, 0.05, 0.5, 1.0, psi0)
    psi, _ = picard_solve(prob)
    eb = energy_budget(psi, prob)
    assert not np.any(eb.J) and not np.any(eb.terms)
    assert eb.pointwise_ok


def test_energy_budget_prefactor_structure(coupled):
    snap = coupled[0]
    K = snap.times.size
    no_flow = Snapshots(snap.grid, snap.times, snap.eta1, snap.eta2, snap.c1, snap.c2,
                        np.zeros_like(snap.v1), None)
    prob = DualProblem(no_flow, 0.01, 0.5, 1.0, coupled[3].psi0)
    psi, _ = picard_solve(prob)
    eb = energy_budget(psi, prob)
    assert not np.any(eb.terms[0]) and not np.any(eb.terms[2]) and not np.any(eb.terms[4])
    assert np.any(eb.terms[1]) and np.any(eb.terms[3])


def test_energy_budget_coupled(coupled):
    prob = coupled[3]
    psi, _ = picard_solve(prob)
    eb = energy_budget(psi, prob)
    assert eb.pointwise_ok and eb.integrated_ok
    assert np.all(eb.J > 0)


# -- duality identity -------------------------------------------------------------------------------


def test_duality_zero_difference(coupled):
    prob = coupled[3]
    Phi = smooth_test_trajectory(prob.grid, prob.theta)
    assert duality_identity_residual(np.zeros_like(Phi), Phi, prob) == 0.0


def test_duality_constant_test_function(coupled):
    snap, r1, r2, prob = coupled
    eta = r1.eta - r2.eta
    a = 1.0 + snap.times**2
    Phi = np.broadcast_to(a[:, None, None], eta.shape).copy()
    terms = duality_identity(eta, Phi, prob)
    assert terms.viscous == pytest.approx(0.0, abs=1e-12)
    # mass of the difference, taken from the simulation diagnostics
    m = r1.diagnostics[0].mass - r2.diagnostics[0].mass
    assert r1.diagnostics[-1].mass - r2.diagnostics[-1].mass == pytest.approx(m, rel=1e-10)
    assert terms.final - terms.initial == pytest.approx(m * (a[-1] - a[0]), rel=1e-9)
    assert terms.rhs == pytest.approx(m * (a[-1] - a[0]), rel=1e-9)


def test_duality_residual_small(coupled):
    snap, r1, r2, prob = coupled
    Phi = smooth_test_trajectory(snap.grid, snap.times)
    assert duality_identity_residual(r1.eta - r2.eta, Phi, prob) < 0.01


# -- serialisation ----------------------------------------------------------------------------------


def test_dump_json_stable():
    obj = {"b": [1, 2.5, True], "a": {"z": None, "y": float("inf")}, "c": np.float64(0.1)}
    s = dual.dump_json(obj)
    assert s == dual.dump_json(dict(reversed(list(obj.items()))))
    assert s.index('"a"') < s.index('"b"') < s.index('"c"')
    assert "0.10000000000000001" in s and '"inf"' in s
