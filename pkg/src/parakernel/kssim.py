"""Time stepper for porous-medium chemotaxis coupled to oxygen consumption and Stokes flow.

    eta_t + v.grad eta - Lap eta^(1+alpha) + div(eta grad c) = 0
    c_t   + v.grad c   - Lap c + c eta = 0
    v_t   - Lap v + grad p + eta grad phi = 0,   div v = 0

Each step updates eta, then c with the new eta, then v with the new eta.
Fields live on the nodes of a periodic grid; transport uses MAC-projected
face velocities so that eta mass is conserved to round-off.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

from .core import Grid, ScalarField, TimeGrid, Trajectory, VectorField, boundary_contamination, integrate
from .fluxes import advective_fluxes, face_divergence, gradient_faces, solenoidal_faces
from .green import BudgetError, Coefficients, duhamel_reconstruct
from .spectral import plan_for

SCHEME_VERSION = "ks-muscl-fd-etd1/1"


class SimulationAbort(RuntimeError):
    def __init__(self, message: str, step: int, t: float):
        super().__init__(message)
        self.step = step
        self.t = t


class StepTooLarge(ValueError):
    def __init__(self, message: str, admissible: float):
        super().__init__(message)
        self.admissible = admissible


@dataclass(frozen=True, eq=False)
class KSParams:
    grid: Grid
    alpha: float = 0.25
    phi: ScalarField | None = None
    safety: float = 0.9
    delta_floor: float = 1e-10
    scheme: str = "muscl"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.alpha <= 0.125:
            warnings.warn(f"alpha={self.alpha} <= 1/8: outside the validated parameter range", stacklevel=2)
        if not 0 < self.safety <= 1:
            raise ValueError("safety factor must lie in (0, 1]")
        if self.phi is not None and self.phi.grid != self.grid:
            raise ValueError("potential lives on a different grid")

    @property
    def m(self) -> float:
        return 1.0 + self.alpha

    def grad_phi(self) -> np.ndarray:
        if self.phi is None:
            return np.zeros((self.grid.n,) + self.grid.shape)
        return plan_for(self.grid).grad(self.phi.values)


@dataclass(frozen=True, eq=False)
class KSState:
    t: float
    eta: ScalarField
    c: ScalarField
    v: VectorField

    def __post_init__(self):
        g = self.eta.grid
        if self.c.grid != g or self.v.grid != g:
            raise ValueError("state fields on different grids")
        if self.eta.values.min() < -1e-12 or self.c.values.min() < -1e-12:
            raise ValueError("cell density and oxygen must be nonnegative")

    @property
    def grid(self) -> Grid:
        return self.eta.grid

    @classmethod
    def from_arrays(cls, grid: Grid, t: float, eta, c, v=None) -> KSState:
        v = np.zeros((grid.n,) + grid.shape) if v is None else v
        return cls(t, ScalarField(grid, eta), ScalarField(grid, c), VectorField(grid, v))


@dataclass
class Diagnostics:
    t: float
    mass: float
    min_eta: float
    c_inf: float
    kinetic: float
    div_res: float
    boundary: float

    def row(self) -> list[float]:
        return [self.t, self.mass, self.min_eta, self.c_inf, self.kinetic, self.div_res, self.boundary]


def diagnostics(state: KSState) -> Diagnostics:
    g = state.grid
    v = state.v.values
    return Diagnostics(
        t=float(state.t),
        mass=integrate(state.eta),
        min_eta=float(state.eta.values.min()),
        c_inf=float(np.abs(state.c.values).max()),
        kinetic=0.5 * float(np.sum(v * v) * g.cell_volume),
        div_res=float(np.abs(plan_for(g).div(v)).max()),
        boundary=boundary_contamination(state.eta),
    )


def face_secant(eta: np.ndarray, m: float, n: int) -> list[np.ndarray]:
    """Per-face ``(eL^m - eR^m)/(eL - eR)``, with the tangent ``m e^(m-1)`` where the states nearly coincide."""
    out = []
    for d in range(n):
        eR = np.roll(eta, -1, axis=d - n)
        diff = eta - eR
        close = np.abs(diff) < 1e-12
        sec = (eta**m - eR**m) / np.where(close, 1.0, diff)
        tang = m * (0.5 * (eta + eR)) ** (m - 1)
        out.append(np.where(close, tang, sec))
    return out


def admissible_dt(state: KSState, params: KSParams) -> float:
    """``min(0.4 h^2 / (n A), 0.5 h / (n W))`` with ``A`` the peak diffusivity and ``W`` the transport speed."""
    g = state.grid
    h, n = g.h, g.n
    A = max(params.m * float(state.eta.values.max()) ** params.alpha, params.delta_floor)
    plan = plan_for(g)
    wv = solenoidal_faces(state.v.values, plan)
    gc = gradient_faces(state.c.values, h, n)
    W = max(float(np.abs(w).max()) for w in wv) + max(float(np.abs(q).max()) for q in gc) + 1e-12
    return min(0.4 * h * h / (n * A), 0.5 * h / (n * W))


def _limited_update(eta: np.ndarray, F: list[np.ndarray], dt: float, h: float, n: int) -> np.ndarray:
    """Conservative update with each donor's outgoing fluxes scaled so it cannot go negative."""
    out_rate = np.zeros_like(eta)
    for d in range(n):
        out_rate += np.maximum(F[d], 0.0) + np.maximum(-np.roll(F[d], 1, axis=d - n), 0.0)
    out_amt = dt / h * out_rate
    lam = np.where(out_amt > eta, eta / np.where(out_amt > 0, out_amt, 1.0), 1.0)
    lam = np.clip(lam, 0.0, 1.0)
    Fl = []
    for d in range(n):
        lam_R = np.roll(lam, -1, axis=d - n)
        Fl.append(np.where(F[d] > 0, lam, lam_R) * F[d])
    new = eta - dt / h * face_divergence(Fl, 1.0, n)
    return np.maximum(new, 0.0)


def ks_step(state: KSState, params: KSParams, dt: float, _check: bool = True) -> KSState:
    g = state.grid
    h, n = g.h, g.n
    if _check:
        adm = admissible_dt(state, params)
        if dt > adm * (1 + 1e-12):
            raise StepTooLarge(f"dt={dt:.6g} exceeds admissible {adm:.6g}", adm)
    plan = plan_for(g)
    eta, c, v = state.eta.values, state.c.values, state.v.values

    # (i) cell density: upwind/MUSCL for v + grad c, central porous-medium flux
    wv = solenoidal_faces(v, plan)
    gc = gradient_faces(c, h, n)
    w = [a + b for a, b in zip(wv, gc)]
    adv = advective_fluxes(eta, w, n, params.scheme)
    A = face_secant(eta, params.m, n)
    F = [adv[d] - A[d] * (np.roll(eta, -1, axis=d - n) - eta) / h for d in range(n)]
    eta_new = _limited_update(eta, F, dt, h, n)

    # (ii) oxygen: upwind transport, exact discrete diffusion, integrating-factor consumption
    c_max = c.max() if c.size else 0.0
    c1 = c - dt / h * face_divergence(advective_fluxes(c, wv, n, "upwind"), 1.0, n)
    c1 = np.clip(plan.heat(c1, dt, fd=True), 0.0, c_max)
    c_new = c1 * np.exp(-eta_new * dt)

    # (iii) velocity: exponential Euler for the forced Stokes system
    force = -eta_new * params.grad_phi()
    v_new = plan.stokes_duhamel_step(v, force, dt) if np.any(force) or np.any(v) else v

    return KSState(state.t + dt, ScalarField(g, eta_new), ScalarField(g, c_new), VectorField(g, v_new))


@dataclass(eq=False)
class SimulationResult:
    grid: Grid
    times: np.ndarray
    eta: np.ndarray
    c: np.ndarray
    v: np.ndarray
    diagnostics: list[Diagnostics]
    steps: int
    params: KSParams | None = field(default=None, repr=False)

    def state(self, k: int) -> KSState:
        return KSState.from_arrays(self.grid, self.times[k], self.eta[k], self.c[k], self.v[k])

    def trajectory(self, name: str) -> Trajectory:
        return Trajectory(self.grid, self.times, getattr(self, name))


def run_simulation(params: KSParams, initial: KSState, tg: TimeGrid | Sequence[float], max_steps: int = 10_000_000) -> SimulationResult:
    """Step from ``initial`` through the output times, substepping adaptively under ``admissible_dt``."""
    g = initial.grid
    times = tg.times if isinstance(tg, TimeGrid) else np.asarray(tg, dtype=float)
    if abs(times[0] - initial.t) > 1e-12 * max(1.0, abs(times[0])):
        raise ValueError("first output time must equal the initial state's time")
    K = times.size
    eta = np.empty((K,) + g.shape)
    c = np.empty((K,) + g.shape)
    v = np.empty((K, g.n) + g.shape)
    diags = []
    state = initial
    steps = 0
    for k, tk in enumerate(times):
        while tk - state.t > 1e-14 * max(1.0, tk):
            dt = min(params.safety * admissible_dt(state, params), tk - state.t)
            try:
                new = ks_step(state, params, dt, _check=False)
            except ValueError as exc:
                raise SimulationAbort(f"invariant breach at step {steps}, t={state.t:.6g}: {exc}", steps, state.t) from exc
            steps += 1
            if steps > max_steps:
                raise SimulationAbort(f"step budget exhausted at t={state.t:.6g}", steps, state.t)
            state = new
        state = KSState(tk, state.eta, state.c, state.v)
        eta[k], c[k], v[k] = state.eta.values, state.c.values, state.v.values
        diags.append(diagnostics(state))
    return SimulationResult(g, times, eta, c, v, diags, steps, params)


# -- closed-form porous-medium profile -------------------------------------------------------


@dataclass(frozen=True)
class Barenblatt:
    """Self-similar solution of ``u_t = Lap u^m`` with total mass ``mass`` centred at ``center``."""

    n: int
    m: float
    mass: float

    @property
    def a(self) -> float:
        return self.n / (self.n * (self.m - 1) + 2)

    @property
    def k(self) -> float:
        return self.a * (self.m - 1) / (2 * self.m * self.n)

    @property
    def C(self) -> float:
        p = 1.0 / (self.m - 1)
        unit = math.pi ** (self.n / 2) * gamma_fn(p + 1) / gamma_fn(p + 1 + self.n / 2) * self.k ** (-self.n / 2)
        return (self.mass / unit) ** (1.0 / (p + self.n / 2))

    def radius(self, t: float) -> float:
        return math.sqrt(self.C / self.k) * t ** (self.a / self.n)

    def profile(self, grid: Grid, t: float, center: Sequence[float] | None = None) -> np.ndarray:
        center = [grid.L / 2] * grid.n if center is None else center
        r2 = grid.periodic_distance(center) ** 2
        base = np.maximum(self.C - self.k * r2 * t ** (-2 * self.a / self.n), 0.0)
        return t ** (-self.a) * base ** (1.0 / (self.m - 1))


def second_moment_radius(eta: np.ndarray, grid: Grid, center: Sequence[float] | None = None) -> float:
    center = [grid.L / 2] * grid.n if center is None else center
    r2 = grid.periodic_distance(center) ** 2
    return math.sqrt(float(np.sum(r2 * eta) / np.sum(eta)))


# -- Duhamel cross-checks --------------------------------------------------------------------


@dataclass
class ReconstructionReport:
    v_error: float
    c_error: float | None
    v_reconstructed: np.ndarray
    c_reconstructed: np.ndarray | None
    note: str = ""


def _rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    den = np.sqrt(np.sum(b * b))
    num = np.sqrt(np.sum((a - b) ** 2))
    return float(num / den) if den > 0 else float(num)


def reconstruct_fields(result: SimulationResult, params: KSParams, c_mode: str = "full", memory_budget: float = 8e9) -> ReconstructionReport:
    """Rebuild ``v`` and ``c`` at the final output from the stored history by Duhamel quadrature.

    ``v(t) = S(t) v0 - int_0^t S(t-s) P(eta grad phi)(s) ds`` with the
    trapezoid rule on the output times; ``c`` from the fundamental solution
    of the oxygen equation with drift ``v`` and potential ``eta``.
    ``c_mode="stokes"`` skips the ``c`` part.
    """
    g = result.grid
    plan = plan_for(g)
    ts = result.times
    T = ts[-1] - ts[0]
    gphi = params.grad_phi()
    v_rec = plan.stokes(result.v[0], T)
    if np.any(gphi):
        w = np.zeros(ts.size)
        dts = np.diff(ts)
        w[:-1] += 0.5 * dts
        w[1:] += 0.5 * dts
        for j, s in enumerate(ts):
            v_rec = v_rec - w[j] * plan.stokes(result.eta[j] * gphi, ts[-1] - s)
    v_err = _rel_l2(v_rec, result.v[-1])
    if c_mode == "stokes":
        return ReconstructionReport(v_err, None, v_rec, None, "velocity only")
    coeffs = Coefficients(g, ts - ts[0], result.v, result.eta)
    M = ts.size - 1
    uniform = np.allclose(np.diff(ts), T / M, rtol=1e-9, atol=0)
    if not uniform:
        raise ValueError("oxygen reconstruction needs uniformly spaced output times")
    try:
        traj = duhamel_reconstruct(coeffs, result.c[0], None, TimeGrid(0.0, T, M), memory_budget=memory_budget, chunk=128)
    except BudgetError as exc:
        return ReconstructionReport(v_err, None, v_rec, None, f"velocity only: {exc}")
    c_rec = traj.values[-1]
    return ReconstructionReport(v_err, _rel_l2(c_rec, result.c[-1]), v_rec, c_rec)


# -- exports ---------------------------------------------------------------------------------

TRAJECTORY_HEADER = "t,field,node_index,value"
DIAGNOSTICS_HEADER = "t,mass,min_eta,c_inf,kinetic,div_res,boundary"


def _f(x: float) -> str:
    return f"{x:.17g}"


def write_trajectory_csv(result: SimulationResult, path: str | Path) -> Path:
    path = Path(path)
    names = ["eta", "c"] + [f"v{i}" for i in range(result.grid.n)]
    with open(path, "w", newline="\n") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for k, t in enumerate(result.times):
            arrays = [result.eta[k], result.c[k]] + [result.v[k][i] for i in range(result.grid.n)]
            for name, arr in zip(names, arrays):
                for i, val in enumerate(arr.reshape(-1)):
                    fh.write(f"{_f(t)},{name},{i},{_f(val)}\n")
    return path


def write_diagnostics_csv(diags: Sequence[Diagnostics], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(DIAGNOSTICS_HEADER + "\n")
        for d in diags:
            fh.write(",".join(_f(x) for x in d.row()) + "\n")
    return path


def run_summary(result: SimulationResult, params: KSParams) -> dict:
    g = result.grid
    last = result.diagnostics[-1]
    return {
        "params": {"alpha": params.alpha, "safety": params.safety, "delta_floor": params.delta_floor, "scheme": params.scheme},
        "grid": {"n": g.n, "L": g.L, "N": g.N},
        "times": [float(t) for t in result.times],
        "final_diagnostics": dict(zip(DIAGNOSTICS_HEADER.split(","), last.row())),
        "scheme_version": SCHEME_VERSION,
    }


def write_run_summary(result: SimulationResult, params: KSParams, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(run_summary(result, params), sort_keys=True, indent=2) + "\n")
    return path
