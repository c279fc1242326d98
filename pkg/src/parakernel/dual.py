"""Dual problem for the difference of two solutions: secant diffusivity, auxiliary solver,
nonlocal sources, Picard iteration, viscosity sweep, energy budget and the duality identity.

All dual quantities live on the reversed clock ``theta = t - tau``.  Snapshot
arrays are read through reversed views (``arr[::-1]``), never copied.

Kernel terms are realised as forward solves on the theta clock:

* ``U3``: Stokes with ``U3(0) = 0`` forced by ``eta2 grad psi``;
* ``U4``: ``U_theta - Lap U - v1.grad U + eta2 U = -div(eta2 grad psi)``, ``U4(0) = 0``;
* ``U5``: Stokes with ``U5(0) = 0`` forced by ``U4 grad c2``;

and the source is ``G = v1.grad psi + grad c1.grad psi - grad phi.U3 - c1 U4 + grad phi.U5``.
The signs of the last two terms follow from the difference of the
chemotaxis fluxes, ``eta1 grad c1 - eta2 grad c2 = eta grad c1 + eta2 grad c``;
with them the duality identity closes to discretisation error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Grid, NormSpec, ScalarField, TimeGrid, Trajectory, lp_norm, mixed_norm
from .green import Coefficients, ForwardStepper, StabilityError
from .spectral import plan_for


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: PicardReport | None = None):
        super().__init__(message)
        self.report = report


def quotient_A(eta1, eta2, alpha: float):
    """Secant quotient ``(eta1^(1+a) - eta2^(1+a)) / (eta1 - eta2)``; tangent ``(1+a) eta1^a`` where they coincide."""
    wrap = isinstance(eta1, ScalarField)
    e1 = np.asarray(eta1.values if wrap else eta1, dtype=float)
    e2 = np.asarray(eta2.values if isinstance(eta2, ScalarField) else eta2, dtype=float)
    if e1.min(initial=0.0) < 0 or e2.min(initial=0.0) < 0:
        raise ValueError("secant quotient needs nonnegative densities")
    m = 1.0 + alpha
    diff = e1 - e2
    close = np.abs(diff) < 1e-12
    sec = (e1**m - e2**m) / np.where(close, 1.0, diff)
    out = np.maximum(np.where(close, m * (0.5 * (e1 + e2)) ** alpha, sec), 0.0)
    return ScalarField(eta1.grid, out) if wrap else out


@dataclass(eq=False)
class Snapshots:
    """Two solutions sampled on a uniform clock ``0 = tau_0 < ... < tau_M = t``."""

    grid: Grid
    times: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    v1: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        g = self.grid
        self.times = np.asarray(self.times, dtype=float)
        K = self.times.size
        if K < 2 or abs(self.times[0]) > 1e-14:
            raise ValueError("snapshots must start at time 0 and hold at least two samples")
        if not np.allclose(np.diff(self.times), self.times[-1] / (K - 1), rtol=1e-9, atol=0):
            raise ValueError("snapshot times must be uniform")
        for name in ("eta1", "eta2", "c1", "c2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (K,) + g.shape:
                raise ValueError(f"{name} has shape {arr.shape}")
            if arr.min() < -1e-12:
                raise ValueError(f"{name} must be nonnegative")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} not finite")
            setattr(self, name, arr)
        self.v1 = np.asarray(self.v1, dtype=float).reshape((K, g.n) + g.shape)
        phi = self.phi.values if isinstance(self.phi, ScalarField) else self.phi
        self.phi = np.zeros(g.shape) if phi is None else np.asarray(phi, dtype=float).reshape(g.shape)
        plan = plan_for(g)
        div = max(float(np.abs(plan.div(v)).max()) for v in self.v1)
        if div > 1e-8:
            raise ValueError(f"v1 not divergence free (residual {div:.3e})")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def M(self) -> int:
        return self.times.size - 1

    def reversed(self, name: str) -> np.ndarray:
        """View of a snapshot series on the theta clock (index ``k`` is ``tau = t - theta_k``)."""
        return getattr(self, name)[::-1]

    @classmethod
    def from_runs(cls, run1, run2, phi) -> Snapshots:
        t0 = run1.times[0]
        phi = phi.values if isinstance(phi, ScalarField) else (np.zeros(run1.grid.shape) if phi is None else phi)
        return cls(run1.grid, run1.times - t0, run1.eta, run2.eta, run1.c, run2.c, run1.v, phi)

    @classmethod
    def zeros(cls, grid: Grid, times, eta1: float = 0.0, eta2: float = 0.0) -> Snapshots:
        times = np.asarray(times, dtype=float)
        K = times.size
        z = np.zeros((K,) + grid.shape)
        return cls(grid, times, z + eta1, z + eta2, z, z, np.zeros((K, grid.n) + grid.shape), np.zeros(grid.shape))


@dataclass(eq=False)
class DualProblem:
    snapshots: Snapshots
    delta: float
    alpha: float
    mu: float = 1.0
    psi0: np.ndarray | None = None
    A: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("viscosity must be positive")
        if self.mu < 0:
            raise ValueError("damping must be nonnegative")
        s = self.snapshots
        self.A = quotient_A(s.eta1, s.eta2, self.alpha)
        if self.psi0 is not None:
            self.psi0 = np.asarray(self.psi0.values if isinstance(self.psi0, ScalarField) else self.psi0, dtype=float)
        self._stepper = None

    @property
    def grid(self) -> Grid:
        return self.snapshots.grid

    @property
    def theta(self) -> np.ndarray:
        return self.snapshots.times

    def with_(self, **kw) -> DualProblem:
        new = replace(self, **kw)
        new._stepper = self._stepper
        return new

    def kernel_stepper(self) -> ForwardStepper:
        """Stepper for the scalar kernel equation: drift ``-v1`` and potential ``eta2`` on the theta clock."""
        if self._stepper is None:
            s = self.snapshots
            coeffs = Coefficients(s.grid, s.times, -s.reversed("v1"), s.reversed("eta2"))
            self._stepper = ForwardStepper(coeffs)
        return self._stepper


# -- auxiliary variable-diffusivity solver ---------------------------------------------------


@dataclass(eq=False)
class AuxiliarySolution:
    trajectory: Trajectory
    time_derivative_norm: float
    delta_hessian_norm: float
    mu_norm: float
    substeps: int


def aux_admissible_dt(V_max: float, grid: Grid) -> float:
    return math.inf if V_max <= 0 else 0.4 * grid.h**2 / (grid.n * V_max)


def auxiliary_solve(
    V: np.ndarray, delta: float, mu: float, g: np.ndarray | None, f0, tg: TimeGrid,
    substeps: int = 1, spec: NormSpec = NormSpec(2.0, 2.0),
) -> AuxiliarySolution:
    """Solve ``f_t - (delta + V) Lap f + mu f = g`` on the nodes of ``tg``.

    The constant part ``delta Lap - mu`` is integrated exactly in Fourier
    space (exponential Euler); the variable part ``V Lap_h f`` uses the
    second-order difference Laplacian and is explicit, which requires
    ``dt V <= 0.4 h^2 / n`` for the internal step ``dt = tg.dt / substeps``.
    ``V`` and ``g`` are sampled on the nodes and interpolated linearly.
    """
    grid = _grid_of(f0, V)
    f = np.array(f0.values if isinstance(f0, ScalarField) else f0, dtype=float)
    V = np.asarray(V, dtype=float)
    if V.min() < -1e-12:
        raise ValueError("variable diffusivity must be nonnegative")
    if not delta > 0:
        raise ValueError("viscosity must be positive")
    M = tg.M
    if V.shape == grid.shape:
        V = np.broadcast_to(V, (M + 1,) + grid.shape)
    if g is not None:
        g = np.asarray(g, dtype=float)
        if g.shape == grid.shape:
            g = np.broadcast_to(g, (M + 1,) + grid.shape)
    h = tg.dt / substeps
    vmax = float(V.max())
    adm = aux_admissible_dt(vmax, grid)
    if h > adm * (1 + 1e-12):
        need = math.ceil(tg.dt / adm)
        raise StabilityError(f"internal step {h:.4g} exceeds admissible {adm:.4g}; use substeps >= {need}", adm)
    plan = plan_for(grid)
    lam = delta * plan.k2 + mu
    E = np.exp(-lam * h)
    phi1 = np.where(lam == 0, h, -np.expm1(-lam * h) / np.where(lam == 0, 1.0, lam))
    out = np.empty((M + 1,) + grid.shape)
    out[0] = f
    explicit = vmax > 0
    for k in range(M):
        for j in range(substeps):
            w = (j + 0.5) / substeps
            rhs = 0.0
            if explicit:
                Vk = (1 - w) * V[k] + w * V[k + 1]
                rhs = Vk * plan.laplacian_fd(f)
            if g is not None:
                rhs = rhs + (1 - w) * g[k] + w * g[k + 1]
            fh = plan.fft(f)
            if explicit or g is not None:
                fh = E * fh + phi1 * plan.fft(rhs)
            else:
                fh = E * fh
            f = plan.ifft(fh)
        out[k + 1] = f
    traj = Trajectory(grid, tg.times, out)
    dfdt = np.gradient(out, tg.dt, axis=0, edge_order=2) if M >= 2 else np.diff(out, axis=0) / tg.dt
    hess = np.array([plan.hessian_norm(x) for x in out])
    return AuxiliarySolution(
        traj,
        mixed_norm(dfdt, grid, tg.dt, spec),
        delta * mixed_norm(hess, grid, tg.dt, spec),
        mu * mixed_norm(out, grid, tg.dt, spec),
        substeps,
    )


def _grid_of(f0, V) -> Grid:
    if isinstance(f0, ScalarField):
        return f0.grid
    raise TypeError("initial datum must be a ScalarField")


def operator_residual(sol: AuxiliarySolution, V: np.ndarray, delta: float, mu: float, g: np.ndarray | None) -> float:
    """Relative L2 residual of ``f_t - (delta+V) Lap f + mu f - g`` at interior nodes (centred in time)."""
    tr = sol.trajectory
    plan = plan_for(tr.grid)
    dt = tr.times[1] - tr.times[0]
    f = tr.values
    V = np.broadcast_to(np.asarray(V, dtype=float), f.shape)
    dfdt = (f[2:] - f[:-2]) / (2 * dt)
    mid = f[1:-1]
    res = dfdt - (delta * plan.laplacian(mid) + V[1:-1] * plan.laplacian(mid)) + mu * mid
    if g is not None:
        res = res - np.broadcast_to(g, f.shape)[1:-1]
    scale = np.sqrt(np.sum(dfdt**2)) + np.sqrt(np.sum((mu * mid) ** 2)) + 1e-300
    return float(np.sqrt(np.sum(res**2)) / scale)


# -- nonlocal sources ------------------------------------------------------------------------


@dataclass
class SourceTerms:
    F1: np.ndarray
    F2: np.ndarray
    F3: np.ndarray
    F4: np.ndarray
    F5: np.ndarray
    U3: np.ndarray
    U4: np.ndarray
    U5: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.F1 + self.F2 + self.F3 + self.F4 + self.F5


def _stokes_series(plan, force: np.ndarray, dt: float) -> np.ndarray:
    """``U' = Lap U + P force``, ``U(0) = 0``, exponential steps with the interval-averaged force."""
    U = np.zeros_like(force)
    u = np.zeros_like(force[0])
    for k in range(force.shape[0] - 1):
        u = plan.stokes_duhamel_step(u, 0.5 * (force[k] + force[k + 1]), dt)
        U[k + 1] = u
    return U


def source_terms(psi: np.ndarray, prob: DualProblem, terms: Sequence[int] = (1, 2, 3, 4, 5)) -> SourceTerms:
    s = prob.snapshots
    g = s.grid
    plan = plan_for(g)
    theta = s.times
    dt = theta[1] - theta[0]
    K = theta.size
    if psi.shape != (K,) + g.shape:
        raise ValueError("iterate must be sampled on the snapshot clock")
    gp = plan.grad(psi)
    v1 = s.reversed("v1")
    eta2 = s.reversed("eta2")
    c1 = s.reversed("c1")
    gphi = plan.grad(s.phi)
    zero = np.zeros((K,) + g.shape)
    zvec = np.zeros((K, g.n) + g.shape)
    F1 = np.sum(v1 * gp, axis=1) if 1 in terms else zero
    F2 = np.sum(plan.grad(c1) * gp, axis=1) if 2 in terms else zero
    U3 = U4 = U5 = None
    F3 = F4 = F5 = zero
    weighted = eta2[:, None] * gp
    if 3 in terms and np.any(gphi):
        U3 = _stokes_series(plan, weighted, dt)
        F3 = -np.sum(gphi * U3, axis=1)
    need4 = (4 in terms and np.any(c1)) or (5 in terms and np.any(gphi))
    if need4:
        src = Trajectory(g, theta, -plan.div(weighted))
        stepper = prob.kernel_stepper()
        limit = stepper.coeffs.max_dt()
        U4 = np.zeros((K,) + g.shape)
        u = np.zeros(g.shape)
        for k in range(K - 1):
            u = stepper.advance(u, theta[k], theta[k + 1], limit, src.at)
            U4[k + 1] = u
        if 4 in terms:
            F4 = -c1 * U4
        if 5 in terms and np.any(gphi):
            gc2 = plan.grad(s.reversed("c2"))
            U5 = _stokes_series(plan, gc2 * U4[:, None], dt)
            F5 = np.sum(gphi * U5, axis=1)
    return SourceTerms(F1, F2, F3, F4, F5,
                       zvec if U3 is None else U3, zero if U4 is None else U4, zvec if U5 is None else U5)


def assemble_source(psi_prev, prob: DualProblem) -> np.ndarray:
    """``G = F1 + ... + F5`` on the theta clock for the iterate ``psi_prev``."""
    psi = psi_prev.values if isinstance(psi_prev, Trajectory) else np.asarray(psi_prev, dtype=float)
    if psi.shape[0] != prob.snapshots.times.size:
        raise ValueError("snapshots do not cover the iterate's time range")
    return source_terms(psi, prob).total


# -- Picard iteration ------------------------------------------------------------------------


@dataclass
class PicardReport:
    mu: float
    norms: list[float]
    diffs: list[float]
    ratios: list[float]
    iterations: int
    converged: bool
    flagged: bool
    tol: float
    substeps: int
    mu_history: list[float] = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    def to_json(self) -> str:
        d = {
            "mu": self.mu, "norms": self.norms, "diffs": self.diffs, "ratios": self.ratios,
            "iterations": self.iterations, "converged": self.converged, "flagged": self.flagged,
            "tol": self.tol, "substeps": self.substeps, "mu_history": self.mu_history,
        }
        return dump_json(d)


def heat_flow(psi0: np.ndarray, theta: np.ndarray, grid: Grid) -> np.ndarray:
    plan = plan_for(grid)
    fh = plan.fft(psi0)
    return np.array([plan.ifft(np.exp(-plan.k2 * t) * fh) for t in theta])


def _iterate(prob: DualProblem, psi0: np.ndarray, tol: float, max_iter: int, spec: NormSpec, stop_early: bool):
    s = prob.snapshots
    g = s.grid
    tg = TimeGrid(0.0, s.horizon, s.M)
    V = prob.A[::-1]
    nsub = max(1, math.ceil(tg.dt / aux_admissible_dt(float(V.max()), g) - 1e-12))
    f0 = ScalarField(g, psi0)
    psi = heat_flow(psi0, s.times, g)
    first = mixed_norm(psi, g, tg.dt, spec)
    norms, diffs, ratios = [first], [], []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        G = assemble_source(psi, prob)
        new = auxiliary_solve(V, prob.delta, prob.mu, G if np.any(G) else None, f0, tg, nsub, spec).trajectory.values
        d = mixed_norm(new - psi, g, tg.dt, spec)
        norms.append(mixed_norm(new, g, tg.dt, spec))
        if diffs and diffs[-1] > 0:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        psi = new
        if d <= tol * max(first, 1e-300) or first == 0:
            converged = True
            break
        if stop_early and len(ratios) >= 3 and any(r >= 0.9 for r in ratios[:3]):
            break
    return psi, norms, diffs, ratios, it, converged, nsub


def picard_solve(prob: DualProblem, psi0=None, tol: float = 1e-8, max_iter: int = 60,
                 spec: NormSpec = NormSpec(2.0, 2.0), escalate: bool = True, mu_cap: float = 2.0**20):
    """Fixed-point iteration ``psi_k = aux(V=A, delta, mu, G[psi_{k-1}], psi0)`` from ``psi_1 = heat flow of psi0``.

    With ``escalate`` the damping starts at ``prob.mu`` and doubles until the
    first three successive-difference ratios are all below 0.9.  Returns
    ``(Trajectory, PicardReport)``.
    """
    psi0 = prob.psi0 if psi0 is None else np.asarray(psi0.values if isinstance(psi0, ScalarField) else psi0, dtype=float)
    if psi0 is None:
        raise ValueError("no initial datum")
    s = prob.snapshots
    mu = prob.mu
    history = []
    while True:
        p = prob.with_(mu=mu)
        psi, norms, diffs, ratios, it, conv, nsub = _iterate(p, psi0, tol, max_iter, spec, escalate)
        history.append(mu)
        bad = any(r >= 0.9 for r in ratios[:3])
        if not escalate or not bad:
            break
        if mu * 2 > mu_cap:
            rep = PicardReport(mu, norms, diffs, ratios, it, conv, True, tol, nsub, history)
            raise DivergenceError(f"no contraction up to mu={mu:g}; ratios {ratios[:3]}", rep)
        mu *= 2
    flagged = bool(ratios) and max(ratios) > 0.9
    rep = PicardReport(mu, norms, diffs, ratios, it, conv, flagged, tol, nsub, history)
    if not conv and not flagged:
        rep.flagged = True
    return Trajectory(s.grid, s.times, psi), rep


# -- vanishing viscosity sweep ---------------------------------------------------------------


SWEEP_HEADER = "delta,mu,iters,max_ratio,delta_l2_dpsi_sq,delta_chi_pairing"


@dataclass
class SweepRecord:
    delta: float
    mu: float
    iters: int
    max_ratio: float
    delta_l2_dpsi_sq: float
    delta_chi_pairing: float

    def row(self) -> list:
        return [self.delta, self.mu, self.iters, self.max_ratio, self.delta_l2_dpsi_sq, self.delta_chi_pairing]


@dataclass
class SweepResult:
    records: list[SweepRecord]
    pairing_exponent: float
    bound_ratio: float


def _trapz_weights(theta: np.ndarray) -> np.ndarray:
    dt = theta[1] - theta[0]
    w = np.full(theta.size, dt)
    w[0] = w[-1] = dt / 2
    return w


def _log_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Logarithmic mean of non-negative arrays; exact interval average of an exponential."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = 0.5 * (a + b)
    ok = (a > 0) & (b > 0)
    r = np.where(ok, a / np.where(ok, b, 1.0), 1.0)
    far = ok & (np.abs(r - 1.0) > 1e-6)
    lr = np.log(np.where(far, r, 2.0))
    out = np.where(far, (a - b) / lr, out)
    return np.where(ok, out, 0.5 * (a + b))


def spectral_time_energy(plan, f: np.ndarray, theta: np.ndarray) -> float:
    """``int ||f(theta)||_2^2 dtheta`` with each Fourier mode's energy integrated
    as an exponential between samples.

    Stiff high modes of the regularised dual solution decay many e-folds inside
    one output interval; plain trapezoid weights then charge the whole first
    interval with the initial energy.  Pure heat decay is integrated exactly
    while both samples stay above round-off; a mode that sinks into FFT noise
    within one interval is charged as if it stopped there, an upper bound.
    """
    g = plan.grid
    fh = plan.fft(f)
    e = np.abs(fh) ** 2
    # rfft half-spectrum: interior modes of the last axis count twice
    mult = np.full(e.shape[-1], 2.0)
    mult[0] = 1.0
    if g.N % 2 == 0:
        mult[-1] = 1.0
    e = e * mult
    dt = np.diff(theta)
    tot = np.tensordot(dt, _log_mean(e[:-1], e[1:]), axes=([0], [0])).sum()
    return float(tot) * g.cell_volume / g.N**g.n


def viscosity_sweep(template: DualProblem, deltas: Sequence[float], chi: np.ndarray, psi0=None, **picard_kw) -> SweepResult:
    """For each viscosity: ``delta ||Lap psi||^2_{L2L2}`` and ``delta * sum chi Lap psi``, plus the pairing's decay exponent."""
    deltas = [float(d) for d in deltas]
    if max(deltas) / min(deltas) < 100 * (1 - 1e-12):
        raise ValueError("viscosity list must span at least two decades")
    g = template.grid
    plan = plan_for(g)
    theta = template.theta
    w = _trapz_weights(theta)
    chi = np.asarray(chi.values if isinstance(chi, Trajectory) else chi, dtype=float)
    recs = []
    for d in deltas:
        psi, rep = picard_solve(template.with_(delta=d), psi0, **picard_kw)
        lap = plan.laplacian(psi.values)
        sq = spectral_time_energy(plan, lap, theta)
        pair = float(np.sum(w * np.sum(np.broadcast_to(chi, lap.shape) * lap, axis=tuple(range(1, g.n + 1)))) * g.cell_volume)
        recs.append(SweepRecord(d, rep.mu, rep.iterations, rep.max_ratio, d * sq, d * pair))
    pairs = np.array([abs(r.delta_chi_pairing) for r in recs])
    sqs = np.array([r.delta_l2_dpsi_sq for r in recs])
    if np.all(pairs > 0):
        expo = float(np.polyfit(np.log(deltas), np.log(pairs), 1)[0])
    else:
        expo = math.inf if np.all(pairs == 0) else math.nan
    ratio = float(sqs.max() / sqs.min()) if sqs.min() > 0 else (1.0 if sqs.max() == 0 else math.inf)
    return SweepResult(recs, expo, ratio)


# -- energy budget ---------------------------------------------------------------------------


@dataclass
class EnergyBudget:
    theta: np.ndarray
    grad_sq: np.ndarray
    terms: np.ndarray  # rows I..V
    damping: np.ndarray
    dissipation: np.ndarray
    J: np.ndarray
    derivative: np.ndarray
    slack: np.ndarray
    pointwise_ok: bool
    integrated_ok: bool


def _snapshot_norms(prob: DualProblem) -> np.ndarray:
    s = prob.snapshots
    g = s.grid
    plan = plan_for(g)
    K = s.times.size
    out = np.zeros((K, 3))
    for k in range(K):
        j = K - 1 - k
        v1 = s.v1[j]
        gv = np.sqrt(sum((plan.grad(v1[i]) ** 2).sum(axis=0) for i in range(g.n))).max()
        c1 = s.c1[j]
        gc1 = plan.grad(c1)
        e2 = s.eta2[j]
        gc2 = plan.grad(s.c2[j])
        out[k, 0] = (gv + plan.hessian_norm(c1).max() + np.abs(plan.laplacian(c1)).max()
                     + (np.abs(c1).max() + np.sqrt((gc1**2).sum(axis=0)).max()) ** 2)
        out[k, 1] = (lp_norm(e2, 3, g) + np.abs(e2).max()) ** 2
        out[k, 2] = lp_norm(gc2, 3, g) ** 2 * np.abs(e2).max() ** 2
    return out


def gronwall_majorant(prob: DualProblem) -> np.ndarray:
    """``J(theta)`` with unit constants, from running sups of the snapshot norms over ``[t - theta, t]``."""
    s = prob.snapshots
    g = s.grid
    plan = plan_for(g)
    ph = s.phi
    phi_w2 = (np.abs(ph).max() + np.sqrt((plan.grad(ph) ** 2).sum(axis=0)).max() + plan.hessian_norm(ph).max()) ** 2
    sup = np.maximum.accumulate(_snapshot_norms(prob), axis=0)
    th = s.times
    return phi_w2 + sup[:, 0] + (1 + th**2) * (sup[:, 1] + sup[:, 2])


def energy_budget(psi: Trajectory, prob: DualProblem) -> EnergyBudget:
    """Terms of ``1/2 d|grad psi|^2 + mu|grad psi|^2 + int (delta+A)|Lap psi|^2 = I + ... + V``.

    Each term is ``-int F_i Lap psi``.  The pointwise check compares the
    centred derivative of ``|grad psi|^2`` with ``J |grad psi|^2`` plus a
    slack of 10% of that bound and the closure defect of the identity; the
    integrated check is the time-integrated Gronwall form.
    """
    g = psi.grid
    plan = plan_for(g)
    vals = psi.values
    th = psi.times
    dt = th[1] - th[0]
    hv = g.cell_volume
    ax = tuple(range(1, g.n + 1))
    st = source_terms(vals, prob)
    lap = plan.laplacian(vals)
    gsq = np.sum(plan.grad(vals) ** 2, axis=(1,) + tuple(a + 1 for a in ax)) * hv
    terms = np.array([-np.sum(F * lap, axis=ax) * hv for F in (st.F1, st.F2, st.F3, st.F4, st.F5)])
    damping = prob.mu * gsq
    A = prob.A[::-1]
    dissipation = np.sum((prob.delta + A) * lap * lap, axis=ax) * hv
    deriv = np.gradient(gsq, dt, edge_order=2)
    closure = np.abs(deriv - 2 * (terms.sum(axis=0) - damping - dissipation))
    J = gronwall_majorant(prob)
    bound = J * gsq
    slack = 0.1 * np.abs(bound) + closure
    pointwise = bool(np.all(deriv <= bound + slack))
    w = _trapz_weights(th)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (bound[1:] + bound[:-1]))])
    integrated = bool(np.all(gsq <= gsq[0] + cum + 0.1 * (gsq[0] + cum) + np.cumsum(closure * w)))
    return EnergyBudget(th, gsq, terms, damping, dissipation, J, deriv, slack, pointwise, integrated)


# -- duality identity ------------------------------------------------------------------------


@dataclass
class DualityTerms:
    final: float
    initial: float
    viscous: float
    rhs: float
    residual: float


def dual_operator(Phi: np.ndarray, prob: DualProblem) -> np.ndarray:
    """``D*Phi`` on the tau clock; the porous part uses the difference Laplacian."""
    s = prob.snapshots
    g = s.grid
    plan = plan_for(g)
    tau = s.times
    dt = tau[1] - tau[0]
    dPhi = np.gradient(Phi, dt, axis=0, edge_order=2)
    gP = plan.grad(Phi)
    out = dPhi + prob.delta * plan.laplacian(Phi) + prob.A * plan.laplacian_fd(Phi)
    out = out + np.sum(s.v1 * gP, axis=1) + np.sum(plan.grad(s.c1) * gP, axis=1)
    st = source_terms(Phi[::-1], prob, terms=(3, 4, 5))
    return out + (st.F3 + st.F4 + st.F5)[::-1]


def duality_identity(eta: np.ndarray, Phi: np.ndarray, prob: DualProblem) -> DualityTerms:
    s = prob.snapshots
    g = s.grid
    plan = plan_for(g)
    eta = np.asarray(eta.values if isinstance(eta, Trajectory) else eta, dtype=float)
    Phi = np.asarray(Phi.values if isinstance(Phi, Trajectory) else Phi, dtype=float)
    hv = g.cell_volume
    ax = tuple(range(1, g.n + 1))
    w = _trapz_weights(s.times)
    final = float(np.sum(eta[-1] * Phi[-1]) * hv)
    initial = float(np.sum(eta[0] * Phi[0]) * hv)
    visc = float(prob.delta * np.sum(w * np.sum(eta * plan.laplacian(Phi), axis=ax)) * hv)
    if not np.any(eta):
        return DualityTerms(final, initial, visc, 0.0, 0.0)
    rhs = float(np.sum(w * np.sum(eta * dual_operator(Phi, prob), axis=ax)) * hv)
    lhs = final - initial + visc
    scale = max(abs(final), abs(initial), 1e-300)
    return DualityTerms(final, initial, visc, rhs, abs(lhs - rhs) / scale)


def duality_identity_residual(eta, Phi, prob: DualProblem) -> float:
    """Relative gap in ``int eta(t)Phi(t) - int eta(0)Phi(0) + delta iint eta Lap Phi = iint eta D*Phi``.

    Normalised by ``max(|int eta(t)Phi(t)|, |int eta(0)Phi(0)|)``.
    """
    return duality_identity(eta, Phi, prob).residual


# -- exports ---------------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return json.dumps(str(x))
    return f"{x:.17g}"


def dump_json(obj, indent: int = 0) -> str:
    """JSON with sorted keys and 17-significant-digit floats; byte-stable for equal inputs."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dump_json(obj[k], indent + 1)}" for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[" + ", ".join(dump_json(x, indent + 1) for x in seq) + "]"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    return _fmt(obj)


def write_sweep_csv(result: SweepResult | Sequence[SweepRecord], path: str | Path) -> Path:
    recs = result.records if isinstance(result, SweepResult) else result
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for r in recs:
            fh.write(",".join(_fmt(x) for x in r.row()) + "\n")
    return path


def write_picard_json(report: PicardReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(report.to_json() + "\n")
    return path
