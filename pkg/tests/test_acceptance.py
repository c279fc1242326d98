"""End-to-end acceptance battery; each test prints one PASS/FAIL line."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from parakernel import dual, green, kssim
from parakernel.core import Grid, ScalarField, TimeGrid, lp_norm, sample_field
from parakernel.green import Coefficients, SourcePoint, smooth_coefficients
from parakernel.harness import load_config, parse_config
from parakernel.harness.experiments import (
    _problem, duality_residual, run_smoothing, run_sweep, snapshots_from, uniqueness_experiment,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def emit(capsys):
    def _emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}")
    return _emit


def _heat_errors(n, L, N, times):
    g = Grid(n, L, N)
    y = g.center_index()
    tab = green.green_function(Coefficients.zero(g), SourcePoint(0.0, y), times)
    errs = []
    for sl, t in zip(tab.slices, tab.times):
        ref = green.heat_kernel(g, y, t)
        bulk = ref >= 1e-6 * ref.max()
        errs.append(float(np.abs(sl - ref)[bulk].max() / ref.max()))
    return max(errs)


def test_c01_heat_kernel_oracle(emit):
    t0 = time.perf_counter()
    errs = {
        1: _heat_errors(1, 8.0, 256, [0.1, 0.2, 0.4]),
        2: _heat_errors(2, 8.0, 128, [0.2, 0.3, 0.5]),
        3: _heat_errors(3, 1.0, 48, [0.04, 0.06, 0.08]),
    }
    wall = time.perf_counter() - t0
    ok = all(e <= 0.01 for e in errs.values()) and wall < 120
    emit(1, "heat-kernel oracle", ok, f"rel Linf n=1 {errs[1]:.2e}, n=2 {errs[2]:.2e}, n=3 {errs[3]:.2e}; {wall:.1f}s")
    assert ok


def test_c02_gaussian_envelope(emit):
    parts = []
    ok = True
    for n, N, times in [(1, 256, [0.05, 0.1, 0.2, 0.35, 0.5]), (2, 128, [0.2, 0.3, 0.4, 0.5])]:
        g = Grid(n, 8.0, N)
        tab = green.green_function(Coefficients.zero(g), SourcePoint(0.0, g.center_index()), times)
        fit = green.envelope_fit(tab)
        C_ref = (4 * math.pi) ** (-n / 2)
        good = abs(fit.c_fit - 0.25) <= 0.01 and abs(fit.C_fit / C_ref - 1) <= 0.05
        ok &= good
        parts.append(f"n={n} c={fit.c_fit:.4f} C/C_ref={fit.C_fit / C_ref:.4f}")
    g = Grid(2, 8.0, 128)
    coeffs = smooth_coefficients(g, 3, a_max=1.0, b_max=1.0, T=0.5)
    tab = green.green_function(coeffs, SourcePoint(0.0, g.center_index()), [0.15, 0.25, 0.4, 0.5])
    fit = green.envelope_fit(tab)
    good = fit.c_fit >= 0.20 and fit.violation_fraction < 0.01
    ok &= good
    parts.append(f"variable c={fit.c_fit:.4f} violations={fit.violation_fraction:.4f}")
    emit(2, "Gaussian envelope", ok, "; ".join(parts))
    assert ok


def test_c03_derivative_envelopes(emit):
    parts = []
    ok = True
    for n, N, times in [(1, 256, [0.05, 0.1, 0.2, 0.35, 0.5]), (2, 128, [0.2, 0.3, 0.4, 0.5])]:
        g = Grid(n, 8.0, N)
        tab = green.green_function(Coefficients.zero(g), SourcePoint(0.0, g.center_index()), times)
        rep = green.derivative_envelope_check(tab)
        e1, e2 = (n + 1) / 2, (n + 2) / 2
        good = abs(rep.gradient_exponent / e1 - 1) <= 0.1 and abs(rep.second_exponent / e2 - 1) <= 0.1
        ok &= good
        parts.append(f"n={n} exponents {rep.gradient_exponent:.3f}/{e1:g}, {rep.second_exponent:.3f}/{e2:g}")
    g = Grid(2, 8.0, 128)
    coeffs = smooth_coefficients(g, 5, a_max=1.0, b_max=1.0, T=0.6)
    tab = green.green_function(coeffs, SourcePoint(0.0, g.center_index()), [0.25, 0.35, 0.45, 0.6])
    rep = green.derivative_envelope_check(tab)
    good = rep.gradient.violation_fraction < 0.01 and rep.second.violation_fraction < 0.01
    ok &= good
    parts.append(f"variable violations {rep.gradient.violation_fraction:.4f}, {rep.second.violation_fraction:.4f}")
    emit(3, "derivative envelopes", ok, "; ".join(parts))
    assert ok


def test_c04_smoothing_rates(emit):
    parts = []
    ok = True
    for text in ("grid.n = 1\ngrid.L = 8.0\ngrid.N = 256", "grid.n = 2\ngrid.L = 1.0\ngrid.N = 128"):
        rep = run_smoothing(parse_config(text))
        ok &= rep.passed
        worst = max(abs(c.measured - c.expected) for c in rep.criteria)
        parts.append(f"n={parse_config(text).int('grid.n')} {sum(c.passed for c in rep.criteria)}/{len(rep.criteria)} within tol, worst |slope error| {worst:.3f}")
    emit(4, "smoothing rates", ok, "; ".join(parts))
    assert ok


def test_c05_chapman_kolmogorov(emit):
    res = {}
    g1 = Grid(1, 8.0, 128)
    res["zero 1D"] = green.chapman_kolmogorov_residual(Coefficients.zero(g1), 0.0, 0.3, 0.6, g1.center_index())
    g2 = Grid(2, 8.0, 64)
    res["zero 2D"] = green.chapman_kolmogorov_residual(Coefficients.zero(g2), 0.0, 0.4, 0.8, g2.center_index())
    c1 = smooth_coefficients(g1, 2, a_max=1.0, b_max=1.0, T=0.8)
    res["variable 1D"] = green.chapman_kolmogorov_residual(c1, 0.0, 0.3, 0.6, g1.center_index())
    g3 = Grid(2, 4.0, 32)
    c2 = smooth_coefficients(g3, 2, a_max=1.0, b_max=1.0, T=0.8)
    res["variable 2D"] = green.chapman_kolmogorov_residual(c2, 0.0, 0.4, 0.8, g3.center_index())
    ok = res["zero 1D"] <= 0.01 and res["zero 2D"] <= 0.01 and res["variable 1D"] <= 0.03 and res["variable 2D"] <= 0.03
    emit(5, "Chapman-Kolmogorov", ok, ", ".join(f"{k} {v:.2e}" for k, v in res.items()))
    assert ok


def _battery_run(seed: int) -> dict:
    g = Grid(2, 1.0, 24)
    eta = 0.5 + 0.4 * sample_field(g, {"kind": "random", "seed": seed, "kmax": 3}).values
    c = 0.5 + 0.4 * sample_field(g, {"kind": "random", "seed": seed + 100, "kmax": 3}).values
    phi = sample_field(g, {"kind": "random", "seed": seed + 200, "kmax": 2})
    p = kssim.KSParams(g, alpha=0.5, phi=phi)
    r = kssim.run_simulation(p, kssim.KSState.from_arrays(g, 0.0, np.clip(eta, 0, None), np.clip(c, 0, None)), TimeGrid(0, 0.05, 10))
    mass = np.array([d.mass for d in r.diagnostics])
    cinf = np.array([d.c_inf for d in r.diagnostics])
    # mass drift is normalised per 1000 steps
    drift = float(np.abs(mass - mass[0]).max() / mass[0] * 1000 / max(r.steps, 1))
    gg = Grid(2, 4.0, 32)
    y = (8 + seed % 16, 20)
    free = green.green_function(smooth_coefficients(gg, seed, a_max=1.0, b_max=0.0, T=0.4), SourcePoint(0.0, y), [0.1, 0.2, 0.4])
    pot = green.green_function(smooth_coefficients(gg, seed, a_max=1.0, b_max=1.0, T=0.4), SourcePoint(0.0, y), [0.1, 0.2, 0.4])
    return {
        "eta_min": float(r.eta.min()),
        "mass_drift": drift,
        "c_inf_increase": float(np.diff(cinf).max()),
        "green_mass_err": float(np.abs(free.masses() - 1).max()),
        "green_mass_increase": float(np.diff(np.concatenate([[1.0], pot.masses()])).max()),
        "green_min": float(min(free.slices.min(), pot.slices.min())),
    }


def test_c06_invariant_battery(emit):
    runs = [_battery_run(s) for s in range(10)]
    worst = {k: (min if k in ("eta_min", "green_min") else max)(r[k] for r in runs) for k in runs[0]}
    ok = (worst["eta_min"] >= 0 and worst["mass_drift"] <= 1e-8 and worst["c_inf_increase"] <= 0
          and worst["green_mass_err"] <= 1e-6 and worst["green_mass_increase"] <= 0 and worst["green_min"] >= -1e-10)
    emit(6, "invariant battery (10 seeds)", ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    assert ok


def test_c07_barenblatt(emit):
    g = Grid(1, 8.0, 128)
    t0, T = 0.05, 0.5
    times = t0 + np.linspace(0, T, 11)
    parts = []
    ok = True
    for alpha in (0.25, 0.5, 1.0):
        prof = kssim.Barenblatt(1, 1 + alpha, 1.0)
        st = kssim.KSState.from_arrays(g, t0, prof.profile(g, t0), np.zeros(g.shape))
        r = kssim.run_simulation(kssim.KSParams(g, alpha=alpha), st, times)
        ref = prof.profile(g, times[-1])
        err = lp_norm(ScalarField(g, r.eta[-1] - ref), 1) / lp_norm(ScalarField(g, ref), 1)
        radii = [kssim.second_moment_radius(e, g) for e in r.eta]
        expo = float(np.polyfit(np.log(times), np.log(radii), 1)[0])
        target = 1 / (alpha + 2)
        good = err <= 0.05 and abs(expo / target - 1) <= 0.05
        ok &= good
        parts.append(f"alpha={alpha:g} L1 {err:.2e} exponent {expo:.4f}/{target:.4f}")
    emit(7, "Barenblatt oracle", ok, "; ".join(parts))
    assert ok


def test_c08_duhamel_reconstruction(emit):
    g = Grid(2, 1.0, 64)
    eta0 = sample_field(g, {"kind": "gaussian", "center": [0.5, 0.5], "sigma": 0.1, "amplitude": 2.0}).values
    c0 = 0.5 + 0.5 * sample_field(g, {"kind": "random", "seed": 3, "kmax": 2, "amplitude": 1.0}).values
    phi = sample_field(g, {"kind": "random", "seed": 5, "kmax": 2, "amplitude": 1.0})
    p = kssim.KSParams(g, 0.25, phi)
    r = kssim.run_simulation(p, kssim.KSState.from_arrays(g, 0.0, eta0, c0), TimeGrid(0, 0.2, 40))
    rep = kssim.reconstruct_fields(r, p)
    ok = rep.c_error is not None and rep.v_error <= 0.05 and rep.c_error <= 0.05
    emit(8, "Duhamel reconstruction (64^2, T=0.2)", ok, f"v rel L2 {rep.v_error:.2e}, c rel L2 {rep.c_error}")
    assert ok


def test_c09_picard_contraction(emit):
    cfg = load_config(CONFIGS / "dual.cfg")
    snap, _, _ = snapshots_from(cfg)
    prob = _problem(cfg, snap)
    _, rep = dual.picard_solve(prob, tol=1e-8)
    default = dual.picard_solve(prob, tol=1e-8, escalate=False)[1] if rep.mu == prob.mu else None
    growth = max(rep.norms) / rep.norms[0]
    ok = (rep.max_ratio <= 0.9 and rep.converged and growth <= 2 * (1 + 1e-8)
          and (default is None or default.max_ratio <= 0.6) and rep.max_ratio <= 0.6)
    emit(9, "Picard contraction", ok,
         f"mu={rep.mu:g} max ratio {rep.max_ratio:.3f}, iterations {rep.iterations}, norm growth {growth:.3f}")
    assert ok


def test_c10_vanishing_viscosity(emit):
    cfg = load_config(CONFIGS / "sweep.cfg")
    t0 = time.perf_counter()
    rep = run_sweep(cfg)
    wall = time.perf_counter() - t0
    ratio, expo = rep.values["bound_ratio"], rep.values["pairing_exponent"]
    ok = ratio <= 3 and expo >= 0.4 and wall < 600
    emit(10, "vanishing viscosity (64^2, M=128)", ok, f"bound ratio {ratio:.3f}, pairing exponent {expo:.3f}, {wall:.0f}s")
    assert ok


def test_c11_duality_identity(emit):
    cfg = load_config(CONFIGS / "dual.cfg")
    # (h, dt) refinement with dt ~ h^2
    Ns, Ms = [16, 32, 64], [32, 128, 512]
    res = [duality_residual(cfg, N, M) for N, M in zip(Ns, Ms)]
    order = math.log(res[-2] / res[-1]) / math.log(2)
    ok = order >= 1 and res[-1] <= 1e-3
    emit(11, "duality identity", ok, f"residuals {', '.join(f'{r:.2e}' for r in res)}; order {order:.2f}")
    assert ok


def test_c12_uniqueness(emit):
    rep = uniqueness_experiment(load_config(CONFIGS / "default.cfg"))
    crit = {c.name: c for c in rep.criteria}
    ok = all(crit[k].passed for k in ("identical_variants", "refinement_factor", "linear_response_deviation"))
    emit(12, "uniqueness experiment", ok,
         f"identical diff {crit['identical_variants'].measured:g}, refinement factor {crit['refinement_factor'].measured:.2f}, "
         f"linear-response deviation {crit['linear_response_deviation'].measured:.3f}")
    assert ok
