"""Experiment drivers behind the CLI subcommands.

Each driver takes a ``RunConfig`` and an optional output directory for its
bulk artifacts, and returns a ``Report``.  Independent runs go through
``parallel_map``, whose worker count is capped by ``PARAKERNEL_THREADS``;
results are always assembled in submission order.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import dual, green, kssim
from ..core import Grid, ScalarField, TimeGrid, lp_norm, sample_field
from ..spectral import smoothing_exponent, verify_smoothing
from .config import ConfigError, RunConfig
from .report import Report

PACKAGE_VERSION = "0.1.0"


def workers() -> int:
    env = os.environ.get("PARAKERNEL_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PARAKERNEL_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError("PARAKERNEL_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items) -> list:
    items = list(items)
    nw = min(workers(), len(items))
    if nw <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=nw) as pool:
        return list(pool.map(fn, items))


def _stamps() -> dict:
    return {"package": PACKAGE_VERSION, "kssim_scheme": kssim.SCHEME_VERSION, "numpy": np.__version__}


def _report(name: str, cfg: RunConfig) -> Report:
    return Report(name, stamps=_stamps(), config=cfg.resolved())


# -- config helpers ----------------------------------------------------------------------------


def grid_from(cfg: RunConfig, prefix: str = "grid", N: int | None = None) -> Grid:
    return Grid(cfg.int(f"{prefix}.n", 2), cfg.float(f"{prefix}.L", 1.0), N if N is not None else cfg.int(f"{prefix}.N", 32))


def time_from(cfg: RunConfig, prefix: str = "time") -> TimeGrid:
    return TimeGrid(cfg.float(f"{prefix}.t0", 0.0), cfg.float(f"{prefix}.T", 0.1), cfg.int(f"{prefix}.M", 20))


def coefficients_from(cfg: RunConfig, grid: Grid) -> green.Coefficients:
    kind = cfg.get("coeff.kind", "zero")
    if kind == "zero":
        return green.Coefficients.zero(grid)
    if kind == "smooth":
        seed = cfg.get("coeff.seed")
        seed = cfg.derived_seed("coeff") if seed is None else int(seed)
        return green.smooth_coefficients(
            grid, seed, cfg.float("coeff.a_max", 1.0), cfg.float("coeff.b_max", 1.0),
            cfg.float("coeff.T", 1.0), cfg.int("coeff.samples", 5), cfg.int("coeff.kmax", 2),
        )
    raise ConfigError(f"{cfg.source}: unknown coeff.kind {kind!r}")


def ks_params_from(cfg: RunConfig, grid: Grid) -> kssim.KSParams:
    phi = sample_field(grid, cfg.descriptor("physics.phi")) if cfg.section("physics.phi") else None
    return kssim.KSParams(grid, cfg.float("physics.alpha", 0.5), phi, cfg.float("physics.safety", 0.9),
                          scheme=cfg.get("physics.scheme", "muscl"))


def initial_from(cfg: RunConfig, grid: Grid, t0: float, eta_scale: float = 1.0, perturb: np.ndarray | None = None) -> kssim.KSState:
    eta = sample_field(grid, cfg.descriptor("init.eta", {"kind": "constant", "value": 1.0})).values
    eta = eta + cfg.float("init.eta_offset", 0.0)
    c = sample_field(grid, cfg.descriptor("init.c", {"kind": "constant", "value": 1.0})).values
    c = c + cfg.float("init.c_offset", 0.0)
    eta = eta_scale * eta
    if perturb is not None:
        eta = eta + perturb
    if eta.min() < 0 or c.min() < 0:
        raise ConfigError(f"{cfg.source}: initial density and oxygen must be nonnegative (add init.*_offset)")
    return kssim.KSState.from_arrays(grid, t0, eta, c)


def _ks_run(cfg: RunConfig, grid: Grid, tg: TimeGrid, **init_kw) -> kssim.SimulationResult:
    params = ks_params_from(cfg, grid)
    return kssim.run_simulation(params, initial_from(cfg, grid, tg.t0, **init_kw), tg)


def _inject(fine: np.ndarray, coarse: Grid) -> np.ndarray:
    """Restrict node values to a coarser nested grid by taking every r-th node."""
    r = (fine.shape[-1]) // coarse.N
    sl = (Ellipsis,) + (slice(None, None, r),) * coarse.n
    return fine[sl]


# -- green / envelope / smoothing --------------------------------------------------------------


def _green_table(cfg: RunConfig):
    g = grid_from(cfg)
    coeffs = coefficients_from(cfg, g)
    y = cfg.get("green.y")
    y = tuple(int(i) for i in (y if isinstance(y, list) else [y] * g.n)) if y is not None else g.center_index()
    s = cfg.float("green.s", 0.0)
    times = [float(t) for t in cfg.list("green.times", [0.05, 0.1, 0.2])]
    eps = cfg.get("green.eps")
    table = green.green_function(coeffs, green.SourcePoint(s, y), times, None if eps is None else float(eps))
    return g, coeffs, table


def run_green(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("green", cfg)
    g, coeffs, table = _green_table(cfg)
    masses = table.masses()
    rep.values.update({"times": table.times, "masses": masses, "agreement": table.agreement,
                       "converged": table.converged, "eps": table.eps, "s_eff": table.s_eff})
    rep.check("construction_agreement", table.agreement, 0.0, 0.03, "le", "cross-check threshold")
    peak = float(table.slices.max())
    rep.check("min_over_peak", float(table.slices.min()) / peak, 0.0, 1e-10, "ge", "positivity")
    if not coeffs.has_potential:
        rep.check("mass_error", float(np.abs(masses - 1.0).max()), 0.0, 1e-6, "le", "conservation for b = 0")
    else:
        rep.check("mass_increase", float(np.diff(masses).max(initial=0.0)), 0.0, 1e-12, "le", "dissipation for b >= 0")
    if out is not None:
        green.write_green_csv(table, Path(out) / "green.csv")
    return rep


def run_envelope(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("envelope", cfg)
    g, coeffs, table = _green_table(cfg)
    fit = green.envelope_fit(table, cfg.float("envelope.floor", 1e-6))
    rep.values.update({"C_fit": fit.C_fit, "c_fit": fit.c_fit, "violation_fraction": fit.violation_fraction,
                       "rms_residual": fit.rms_residual, "samples": fit.samples})
    rows = [["value", fit.C_fit, fit.c_fit, fit.violation_fraction, fit.rms_residual, fit.samples]]
    zero = not (coeffs.has_drift or coeffs.has_potential)
    if zero:
        rep.check("c_fit", fit.c_fit, 0.25, 0.01, "abs", "heat kernel exponent")
        rep.check("C_fit", fit.C_fit, (4 * math.pi) ** (-g.n / 2), 0.05, "rel", "heat kernel prefactor")
    else:
        rep.check("c_fit", fit.c_fit, 0.20, 0.0, "ge", "bounded coefficients")
        rep.check("violation_fraction", fit.violation_fraction, 0.0, 0.01, "le", "one-sided bound")
    if table.tau.min() >= 36 * g.h**2 * (1 - 1e-12) and len(table.times) >= 3:
        d = green.derivative_envelope_check(table, cfg.float("envelope.floor", 1e-6))
        rep.values.update({"gradient_exponent": d.gradient_exponent, "second_exponent": d.second_exponent})
        rows.append(["gradient", d.gradient.C_fit, d.gradient.c_fit, d.gradient.violation_fraction, d.gradient.rms_residual, d.gradient.samples])
        rows.append(["second", d.second.C_fit, d.second.c_fit, d.second.violation_fraction, d.second.rms_residual, d.second.samples])
        if zero:
            rep.check("gradient_exponent", d.gradient_exponent, (g.n + 1) / 2, 0.1, "rel", "derivative order 1")
            rep.check("second_exponent", d.second_exponent, (g.n + 2) / 2, 0.1, "rel", "derivative order 2")
        else:
            rep.check("gradient_violations", d.gradient.violation_fraction, 0.0, 0.01, "le", "one-sided bound")
            rep.check("second_violations", d.second.violation_fraction, 0.0, 0.01, "le", "one-sided bound")
    rep.tables["envelope"] = ("quantity,C_fit,c_fit,violation_fraction,rms_residual,samples", rows)
    return rep


def smoothing_family(grid: Grid) -> list[ScalarField]:
    """Near-delta bumps for the L1 rates, a constant for L2->L2, and modes for gradient rates."""
    fam = [sample_field(grid, {"kind": "gaussian", "sigma": s * grid.h, "amplitude": 1.0}) for s in (1.0, 1.5)]
    fam.append(sample_field(grid, {"kind": "constant", "value": 1.0}))
    k = 1
    while 2 * k < grid.N // 2 + 1 and k <= 16:
        fam.append(sample_field(grid, {"kind": "mode", "k": (k,) + (0,) * (grid.n - 1), "phase": "cos"}))
        k *= 2
    return fam


def _pair(tok) -> tuple[float, float]:
    p, r = str(tok).split(":")
    return float(p), float(r)


def run_smoothing(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("smoothing", cfg)
    g = grid_from(cfg)
    fam = smoothing_family(g)
    times = np.geomspace(cfg.float("smoothing.t_min", max(16 * g.h**2, 1e-3)),
                         cfg.float("smoothing.t_max", max(160 * g.h**2, 1e-2)), cfg.int("smoothing.samples", 6))
    pairs = [_pair(x) for x in cfg.list("smoothing.pairs", ["1:inf", "1:2", "2:2"])]
    rows = []
    for grad in (False, True):
        tol = 0.1 if grad else 0.08
        for p, r in pairs:
            fit = verify_smoothing(p, r, fam, times, gradient=grad)
            tag = f"{'grad_' if grad else ''}p{p:g}_r{r:g}"
            rep.check(f"slope_{tag}", fit.slope, smoothing_exponent(g.n, p, r, grad), tol, "abs", "semigroup rate")
            rows.append([tag, fit.slope, fit.expected_slope])
    rep.tables["smoothing"] = ("case,slope,expected_slope", rows)
    return rep


# -- simulation --------------------------------------------------------------------------------


def run_simulate(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("simulate", cfg)
    g = grid_from(cfg)
    tg = time_from(cfg)
    params = ks_params_from(cfg, g)
    res = kssim.run_simulation(params, initial_from(cfg, g, tg.t0), tg)
    d = res.diagnostics
    mass = np.array([x.mass for x in d])
    cinf = np.array([x.c_inf for x in d])
    rep.values.update({"steps": res.steps, "final": dict(zip(kssim.DIAGNOSTICS_HEADER.split(","), d[-1].row()))})
    rep.check("min_eta", float(res.eta.min()), 0.0, 0.0, "ge", "positivity")
    rep.check("mass_drift", float(np.abs(mass - mass[0]).max() / max(mass[0], 1e-300)), 0.0, 1e-8, "le", "conservation")
    rep.check("c_inf_increase", float(np.diff(cinf).max(initial=0.0)), 0.0, 1e-12, "le", "maximum principle")
    rep.check("div_residual", max(x.div_res for x in d), 0.0, 1e-8, "le", "incompressibility")
    rep.tables["diagnostics"] = (kssim.DIAGNOSTICS_HEADER, [x.row() for x in d])
    if out is not None and cfg.get("simulate.write_trajectory", False):
        kssim.write_trajectory_csv(res, Path(out) / "trajectory.csv")
    if out is not None:
        kssim.write_run_summary(res, params, Path(out) / "run_summary.json")
    return rep


# -- dual machinery ----------------------------------------------------------------------------


def _difference_runs(cfg: RunConfig, g: Grid, tg: TimeGrid):
    scale = cfg.float("dual.eta2_scale", 0.8)
    r1, r2 = parallel_map(lambda s: _ks_run(cfg, g, tg, eta_scale=s), [1.0, scale])
    params = ks_params_from(cfg, g)
    return r1, r2, params.phi


def snapshots_from(cfg: RunConfig, N: int | None = None, M: int | None = None):
    g = grid_from(cfg, N=N)
    tg = time_from(cfg)
    if M is not None:
        tg = TimeGrid(tg.t0, tg.t1, M)
    r1, r2, phi = _difference_runs(cfg, g, tg)
    return dual.Snapshots.from_runs(r1, r2, phi), r1, r2


def _psi0(cfg: RunConfig, g: Grid) -> np.ndarray:
    """``dual.psi0`` plus an optional additive ``dual.psi0_extra`` component."""
    psi = sample_field(g, cfg.descriptor("dual.psi0", {"kind": "mode", "k": [1] + [0] * (g.n - 1), "phase": "cos"})).values
    if cfg.section("dual.psi0_extra"):
        psi = psi + sample_field(g, cfg.descriptor("dual.psi0_extra")).values
    return psi


def _problem(cfg: RunConfig, snap: dual.Snapshots) -> dual.DualProblem:
    return dual.DualProblem(snap, cfg.float("dual.delta", 0.01), cfg.float("physics.alpha", 0.5),
                            cfg.float("dual.mu", 1.0), _psi0(cfg, snap.grid))


def run_dual(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("dual", cfg)
    snap, _, _ = snapshots_from(cfg)
    prob = _problem(cfg, snap)
    psi, pr = dual.picard_solve(prob, tol=cfg.float("dual.tol", 1e-8), max_iter=cfg.int("dual.max_iter", 60))
    norms = np.array(pr.norms)
    rep.values.update({"mu": pr.mu, "iterations": pr.iterations, "ratios": pr.ratios, "norms": pr.norms,
                       "converged": pr.converged, "mu_history": pr.mu_history})
    rep.check("max_ratio", pr.max_ratio, 0.9, 0.0, "le", "contraction")
    rep.check("norm_growth", float(norms.max() / max(norms[0], 1e-300)), 2.0, 0.0, "le", "iterate bound")
    rep.check("converged", float(pr.converged), 1.0, 0.0, "eq", "iteration tolerance")
    eb = dual.energy_budget(psi, prob)
    rep.check("energy_pointwise", float(eb.pointwise_ok), 1.0, 0.0, "eq", "Gronwall inequality")
    rep.tables["picard"] = ("iteration,norm,diff", [[i + 1, n, d] for i, (n, d) in enumerate(zip(pr.norms[1:], pr.diffs))])
    if out is not None:
        dual.write_picard_json(pr, Path(out) / "picard.json")
    return rep


def run_sweep(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("sweep", cfg)
    snap, _, _ = snapshots_from(cfg)
    prob = _problem(cfg, snap)
    g = snap.grid
    chi = sample_field(g, cfg.descriptor("dual.chi", {"kind": "mode", "k": [1] + [0] * (g.n - 1), "phase": "cos"})).values
    deltas = [float(d) for d in cfg.list("dual.delta_list", [1e-1, 1e-2, 1e-3])]
    res = dual.viscosity_sweep(prob, deltas, chi, tol=cfg.float("dual.tol", 1e-8), max_iter=cfg.int("dual.max_iter", 60))
    rep.values.update({"pairing_exponent": res.pairing_exponent, "bound_ratio": res.bound_ratio})
    rep.check("bound_ratio", res.bound_ratio, 3.0, 0.0, "le", "viscosity-uniform bound")
    rep.check("pairing_exponent", res.pairing_exponent, 0.4, 0.0, "ge", "Cauchy-Schwarz scaling")
    rep.tables["sweep"] = (dual.SWEEP_HEADER, [r.row() for r in res.records])
    return rep


def smooth_test_trajectory(g: Grid, times: np.ndarray) -> np.ndarray:
    """Smooth band-limited space-time test trajectory."""
    x = g.mesh()
    base = np.cos(2 * np.pi * x[0] / g.L)
    other = 0.5 * np.sin(2 * np.pi * x[-1] / g.L) if g.n > 1 else 0.5 * np.sin(4 * np.pi * x[0] / g.L)
    return np.array([base * (1 + t) + other for t in times])


def duality_residual(cfg: RunConfig, N: int | None = None, M: int | None = None) -> float:
    snap, r1, r2 = snapshots_from(cfg, N, M)
    prob = _problem(cfg, snap)
    Phi = smooth_test_trajectory(snap.grid, snap.times)
    return dual.duality_identity_residual(r1.eta - r2.eta, Phi, prob)


def run_duality(cfg: RunConfig, out: Path | None = None) -> Report:
    rep = _report("duality", cfg)
    Ns = [int(n) for n in cfg.list("duality.N_list", [16, 32])]
    if "duality.M_list" in cfg:
        Ms = [int(m) for m in cfg.list("duality.M_list")]
        if len(Ms) != len(Ns):
            raise ConfigError(f"{cfg.source}: duality.M_list and duality.N_list differ in length")
    else:
        ratio = cfg.float("duality.steps_per_node", 1.0)
        Ms = [max(2, int(round(ratio * N))) for N in Ns]
    res = [duality_residual(cfg, N, M) for N, M in zip(Ns, Ms)]
    rows = [[N, r] for N, r in zip(Ns, res)]
    rep.values["residuals"] = res
    if len(Ns) >= 2 and res[-1] > 0 and res[-2] > 0:
        order = math.log(res[-2] / res[-1]) / math.log(Ns[-1] / Ns[-2])
        rep.values["observed_order"] = order
        rep.check("observed_order", order, 1.0, 0.0, "ge", "refinement study")
    rep.check("residual_finest", res[-1], cfg.float("duality.tol", 1e-2), 0.0, "le", "identity closure")
    rep.tables["duality"] = ("N,residual", rows)
    return rep


# -- uniqueness study --------------------------------------------------------------------------


def _diff_norms(a: kssim.SimulationResult, b: kssim.SimulationResult) -> np.ndarray:
    """Per output time: L2 norms of eta, c, v differences, on the coarser of the two grids."""
    ga, gb = a.grid, b.grid
    coarse = ga if ga.N <= gb.N else gb
    A = [_inject(x, coarse) for x in (a.eta, a.c, a.v)]
    B = [_inject(x, coarse) for x in (b.eta, b.c, b.v)]
    out = np.empty((a.times.size, 3))
    for k in range(a.times.size):
        out[k] = [lp_norm(A[i][k] - B[i][k], 2, coarse) if i < 2 else lp_norm(np.sqrt(np.sum((A[2][k] - B[2][k]) ** 2, axis=0)), 2, coarse)
                  for i in range(3)]
    return out


def uniqueness_experiment(cfg: RunConfig, out: Path | None = None) -> Report:
    """Self-convergence, identical-variant, linear-response and duality checks on one datum.

    Variants are ``unique.variant_a`` / ``unique.variant_b`` given as
    ``N:scheme`` tokens.  The refinement study runs ``N, 2N, 4N`` from
    ``unique.N``; the admissible step is diffusive, so halving ``h``
    quarters ``dt``.
    """
    rep = _report("uniqueness", cfg)
    tg = time_from(cfg)
    n = cfg.int("grid.n", 2)
    L = cfg.float("grid.L", 1.0)

    def variant(tok):
        N, scheme = str(tok).split(":") if ":" in str(tok) else (tok, "muscl")
        return int(N), scheme

    va = variant(cfg.get("unique.variant_a", f"{cfg.int('grid.N', 32)}:muscl"))
    vb = variant(cfg.get("unique.variant_b", f"{cfg.int('grid.N', 32)}:muscl"))

    def run_variant(v, **kw):
        sub = cfg.with_overrides(**{"physics.scheme": v[1]})
        return _ks_run(sub, Grid(n, L, v[0]), tg, **kw)

    ra, rb = parallel_map(run_variant, [va, vb])
    dn = _diff_norms(ra, rb)
    rows = [[float(t), *map(float, r)] for t, r in zip(tg.times, dn)]
    rep.tables["variant_differences"] = ("t,eta_l2,c_l2,v_l2", rows)
    rep.values["variant_max_difference"] = float(dn.max())
    if va == vb:
        rep.check("identical_variants", float(dn.max()), 0.0, 0.0, "eq", "same computation twice")

    # refinement
    N0 = cfg.int("unique.N", 16)
    runs = parallel_map(lambda N: run_variant((N, va[1])), [N0, 2 * N0, 4 * N0])
    e1 = _diff_norms(runs[0], runs[1])[-1, 0]
    e2 = _diff_norms(runs[1], runs[2])[-1, 0]
    factor = e1 / e2 if e2 > 0 else math.inf
    rep.values.update({"refinement_differences": [e1, e2], "refinement_factor": factor})
    rep.check("refinement_factor", factor, 2.0, 0.0, "ge", "self-convergence")

    # linear response
    amp = cfg.float("unique.perturbation", 1e-3)
    g = Grid(n, L, va[0])
    pert = sample_field(g, cfg.descriptor("unique.perturb_field", {"kind": "mode", "k": [1] + [0] * (n - 1), "phase": "cos"})).values
    base, one, two = parallel_map(lambda a: run_variant(va, perturb=a * pert) if a else ra, [0.0, amp, 2 * amp])
    d1 = _diff_norms(base, one)[-1]
    d2 = _diff_norms(base, two)[-1]
    mask = d1 > 0
    lin = float(np.max(np.abs(d2[mask] / d1[mask] / 2.0 - 1.0))) if mask.any() else math.inf
    rep.values.update({"response_a": d1, "response_2a": d2})
    rep.check("linear_response_deviation", lin, 0.0, 0.25, "le", "well-posedness")

    # duality residual on the difference of the base and perturbed runs
    snap = dual.Snapshots(g, tg.times - tg.t0, base.eta, two.eta, base.c, two.c, base.v, base.params.phi)
    prob = dual.DualProblem(snap, cfg.float("dual.delta", 0.01), cfg.float("physics.alpha", 0.5), 1.0)
    res = dual.duality_identity_residual(base.eta - two.eta, smooth_test_trajectory(g, snap.times), prob)
    rep.values["duality_residual"] = res
    rep.check("duality_residual", res, cfg.float("unique.duality_tol", 1e-2), 0.0, "le", "identity closure")
    return rep


def run_verify(cfg: RunConfig, out: Path | None = None) -> Report:
    """Fast battery: heat-kernel oracle, kssim invariants, and the uniqueness study."""
    rep = _report("verify", cfg)
    g = Grid(1, 8.0, cfg.int("verify.heat_N", 256))
    times = [0.1, 0.2, 0.4]
    y = g.center_index()
    table = green.green_function(green.Coefficients.zero(g), green.SourcePoint(0.0, y), times)
    err = max(float(np.abs(s - green.heat_kernel(g, y, t)).max() / np.abs(green.heat_kernel(g, y, t)).max())
              for s, t in zip(table.slices, times))
    rep.check("heat_kernel_rel_linf", err, 0.0, 0.01, "le", "closed-form kernel")
    sim = run_simulate(cfg)
    uq = uniqueness_experiment(cfg)
    for sub in (sim, uq):
        for c in sub.criteria:
            c.name = f"{sub.experiment}.{c.name}"
            rep.criteria.append(c)
        for k, v in sub.tables.items():
            rep.tables[f"{sub.experiment}_{k}"] = v
    rep.values.update({"uniqueness": uq.values, "simulate": sim.values})
    return rep


EXPERIMENTS = {
    "green": run_green,
    "envelope": run_envelope,
    "smoothing": run_smoothing,
    "simulate": run_simulate,
    "dual": run_dual,
    "sweep": run_sweep,
    "duality": run_duality,
    "verify": run_verify,
}


def run_experiment(name: str, cfg: RunConfig, out: Path | None = None) -> Report:
    t0 = time.perf_counter()
    rep = EXPERIMENTS[name](cfg, out)
    rep.wall_clock = time.perf_counter() - t0
    return rep
