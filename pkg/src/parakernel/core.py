"""Periodic grids, sampled fields, discrete norms and reproducible field generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InvalidDescriptorError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Cubic periodic grid with ``N`` nodes per axis on ``[0, L)^n``.

    Nodes sit at ``x_i = i*h``; the box center ``L/2`` is a node whenever
    ``N`` is even.
    """

    n: int
    L: float
    N: int

    def __post_init__(self):
        if self.n not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.n}")
        if self.N < 8:
            raise ValueError(f"need at least 8 points per axis, got {self.N}")
        if not self.L > 0:
            raise ValueError("box side must be positive")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def size(self) -> int:
        return self.N**self.n

    @property
    def cell_volume(self) -> float:
        return self.h**self.n

    @property
    def axes(self) -> tuple[int, ...]:
        """Trailing array axes that carry the spatial dimensions."""
        return tuple(range(-self.n, 0))

    def coords(self) -> np.ndarray:
        return np.arange(self.N) * self.h

    def mesh(self) -> tuple[np.ndarray, ...]:
        x = self.coords()
        return tuple(np.meshgrid(*([x] * self.n), indexing="ij"))

    def center_index(self) -> tuple[int, ...]:
        return (self.N // 2,) * self.n

    def node(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(index, dtype=float) * self.h

    def periodic_offsets(self, x0: Sequence[float]) -> tuple[np.ndarray, ...]:
        """Signed minimum-image offsets ``x - x0`` per axis."""
        out = []
        for xi, ci in zip(self.mesh(), x0):
            d = xi - ci
            out.append(d - self.L * np.round(d / self.L))
        return tuple(out)

    def periodic_distance(self, x0: Sequence[float]) -> np.ndarray:
        return np.sqrt(sum(d * d for d in self.periodic_offsets(x0)))


def _finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        _finite(v, "ScalarField")
        object.__setattr__(self, "values", v)

    def __add__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> ScalarField:
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VectorField:
    """``n`` components stacked along the leading axis of ``values``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n,) + self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match {self.grid.n} components on {self.grid.shape}")
        _finite(v, "VectorField")
        object.__setattr__(self, "values", v)

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[i])

    def __add__(self, other: VectorField) -> VectorField:
        return VectorField(self.grid, self.values + other.values)

    def __sub__(self, other: VectorField) -> VectorField:
        return VectorField(self.grid, self.values - other.values)

    def __mul__(self, c: float) -> VectorField:
        return VectorField(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    M: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")
        if self.M < 1:
            raise ValueError("need at least one step")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.M

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.M + 1)


@dataclass(frozen=True)
class NormSpec:
    p: float = 2.0
    s: float | None = None

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError("p must be >= 1")
        if self.s is not None and not self.s >= 1:
            raise ValueError("s must be >= 1")


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, (ScalarField, VectorField)) else np.asarray(f)


def sample_field(grid: Grid, descriptor: dict) -> ScalarField:
    """Evaluate an analytic or seeded-random descriptor at the grid nodes.

    Recognised kinds:

    * ``{"kind": "constant", "value": c}``
    * ``{"kind": "mode", "k": (k1, ..., kn), "phase": "sin"|"cos", "amplitude": A}``
      gives ``A*sin(2*pi*k.x/L)``.
    * ``{"kind": "gaussian", "center": (...), "sigma": s, "amplitude": A,
      "normalize": False}``; unnormalized peak is ``A`` at the center, with
      ``normalize=True`` the continuum integral is ``A``.
    * ``{"kind": "random", "seed": 7, "kmax": 4, "amplitude": A}``: band-limited
      random Fourier series with integer wavenumbers ``|k_i| <= kmax``,
      scaled so the L-infinity norm equals ``A``.
    """
    kind = descriptor.get("kind")
    if kind == "constant":
        return ScalarField(grid, np.full(grid.shape, float(descriptor.get("value", 1.0))))

    if kind == "mode":
        k = np.atleast_1d(np.asarray(descriptor.get("k", (1,) + (0,) * (grid.n - 1)), dtype=float))
        if k.size != grid.n:
            raise InvalidDescriptorError("mode wavevector length must equal grid dimension")
        arg = sum(2 * np.pi * ki * xi / grid.L for ki, xi in zip(k, grid.mesh()))
        phase = descriptor.get("phase", "sin")
        if phase not in ("sin", "cos"):
            raise InvalidDescriptorError(f"unknown phase {phase!r}")
        vals = np.sin(arg) if phase == "sin" else np.cos(arg)
        return ScalarField(grid, float(descriptor.get("amplitude", 1.0)) * vals)

    if kind == "gaussian":
        sigma = float(descriptor.get("sigma", 0.0))
        if not sigma > 0:
            raise InvalidDescriptorError("gaussian sigma must be positive")
        center = np.atleast_1d(np.asarray(descriptor.get("center", [grid.L / 2] * grid.n), dtype=float))
        if center.size == 1 and grid.n > 1:
            center = np.repeat(center, grid.n)
        if center.size != grid.n or np.any(center < 0) or np.any(center >= grid.L):
            raise InvalidDescriptorError(f"gaussian center {center.tolist()} outside box [0, {grid.L})")
        r2 = grid.periodic_distance(center) ** 2
        vals = np.exp(-r2 / (2 * sigma**2))
        amp = float(descriptor.get("amplitude", 1.0))
        if descriptor.get("normalize", False):
            amp /= (2 * np.pi * sigma**2) ** (grid.n / 2)
        return ScalarField(grid, amp * vals)

    if kind == "random":
        if "seed" not in descriptor:
            raise InvalidDescriptorError("random field needs a seed")
        rng = np.random.default_rng(int(descriptor["seed"]))
        kmax = int(descriptor.get("kmax", 4))
        if kmax < 1 or 2 * kmax >= grid.N:
            raise InvalidDescriptorError(f"kmax={kmax} not band-representable on N={grid.N}")
        ks = np.arange(-kmax, kmax + 1)
        vals = np.zeros(grid.shape)
        mesh = grid.mesh()
        for kvec in np.array(np.meshgrid(*([ks] * grid.n), indexing="ij")).reshape(grid.n, -1).T:
            if not np.any(kvec):
                continue
            a, b = rng.standard_normal(2) / (1.0 + float(kvec @ kvec))
            arg = sum(2 * np.pi * ki * xi / grid.L for ki, xi in zip(kvec, mesh))
            vals += a * np.cos(arg) + b * np.sin(arg)
        vals *= float(descriptor.get("amplitude", 1.0)) / np.abs(vals).max()
        return ScalarField(grid, vals)

    raise InvalidDescriptorError(f"unknown field descriptor kind {kind!r}")


def lp_norm(f, p: float | NormSpec = 2.0, grid: Grid | None = None) -> float:
    """Discrete L^p norm ``(sum |f|^p h^n)^(1/p)``; vector fields use the pointwise Euclidean norm."""
    if isinstance(p, NormSpec):
        p = p.p
    g = grid if grid is not None else f.grid
    v = _values(f)
    if isinstance(f, VectorField) or v.ndim == g.n + 1:
        v = np.sqrt(np.sum(v * v, axis=0))
    a = np.abs(v)
    if math.isinf(p):
        return float(a.max())
    if p == 1:
        return float(a.sum() * g.cell_volume)
    if p == 2:
        return float(np.sqrt(np.sum(a * a) * g.cell_volume))
    return float((np.sum(a**p) * g.cell_volume) ** (1.0 / p))


def mixed_norm(values: np.ndarray, grid: Grid, dt: float, spec: NormSpec = NormSpec(2.0, 2.0)) -> float:
    """Discrete ``L^s_T L^p`` norm of a trajectory stacked along axis 0 (trapezoid in time)."""
    s = spec.s if spec.s is not None else spec.p
    per_t = np.array([lp_norm(v, spec.p, grid) for v in values])
    if math.isinf(s):
        return float(per_t.max())
    w = np.full(len(per_t), dt)
    w[0] = w[-1] = dt / 2
    return float(np.sum(w * per_t**s) ** (1.0 / s))


def integrate(f, grid: Grid | None = None) -> float:
    g = grid if grid is not None else f.grid
    return float(np.sum(_values(f)) * g.cell_volume)


def boundary_contamination(f, grid: Grid | None = None, center: Sequence[float] | None = None) -> float:
    """Fraction of ``|f|`` mass in the outer 10% shell of the box around ``center``."""
    g = grid if grid is not None else f.grid
    c = [g.L / 2] * g.n if center is None else center
    offs = g.periodic_offsets(c)
    dmax = np.max(np.abs(np.stack(offs)), axis=0)
    shell = dmax >= 0.45 * g.L
    a = np.abs(_values(f))
    total = a.sum()
    if total == 0:
        return 0.0
    return float(a[shell].sum() / total)


@dataclass
class HolderEstimate:
    value: float
    pairs: int
    exhaustive: bool
    # flat (time index, node index) of the sampled pairs, kept for re-evaluation
    pair_index: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)


def _pair_geometry(grid: Grid, times: np.ndarray, i: np.ndarray, j: np.ndarray):
    size = grid.size
    ti, xi = np.divmod(i, size)
    tj, xj = np.divmod(j, size)
    dt = np.abs(times[ti] - times[tj])
    ui = np.array(np.unravel_index(xi, grid.shape))
    uj = np.array(np.unravel_index(xj, grid.shape))
    d = np.abs(ui - uj)
    d = np.minimum(d, grid.N - d) * grid.h
    dx = d.max(axis=0)
    return dt, dx


def holder_ratios(traj: np.ndarray, times: np.ndarray, grid: Grid, beta: float, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Per-pair ratio ``|f(X)-f(Y)| / (|t-s|^beta + |x-y|^beta)`` for flat indices ``i, j``."""
    flat = traj.reshape(-1)
    dt, dx = _pair_geometry(grid, times, i, j)
    den = dt**beta + dx**beta
    num = np.abs(flat[i] - flat[j])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / den, 0.0)
    return r


def holder_seminorm(
    traj,
    beta: float,
    times: Sequence[float] | None = None,
    grid: Grid | None = None,
    *,
    n_pairs: int = 100_000,
    seed: int = 0,
    exhaustive_limit: int = 4096,
) -> HolderEstimate:
    """Lower-bound estimate of the space-time Holder seminorm.

    Spatial distance is the max over axes of the periodic distance.  Small
    trajectories (at most ``exhaustive_limit`` space-time samples) are searched
    over all pairs; larger ones use ``n_pairs`` seeded random pairs.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if isinstance(traj, (list, tuple)):
        grid = grid or traj[0].grid
        arr = np.stack([_values(f) for f in traj])
    else:
        arr = np.asarray(traj, dtype=float)
    if grid is None:
        raise ValueError("grid required for raw arrays")
    if arr.ndim == grid.n:
        arr = arr[None]
    if times is None:
        times = np.arange(arr.shape[0], dtype=float)
    times = np.asarray(times, dtype=float)
    total = arr.size
    if total < 2:
        raise InsufficientDataError("need at least two space-time samples")

    if total <= exhaustive_limit:
        i, j = np.triu_indices(total, k=1)
        exhaustive = True
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, total, n_pairs)
        j = rng.integers(0, total, n_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
        exhaustive = False
    r = holder_ratios(arr, times, grid, beta, i, j)
    return HolderEstimate(float(r.max()) if r.size else 0.0, int(r.size), exhaustive, (i, j))


@dataclass(eq=False)
class Trajectory:
    """Time-stacked samples on one grid; ``values[k]`` is the state at ``times[k]``."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.values.shape[0] != self.times.size:
            raise ValueError("one sample per time required")

    def __len__(self) -> int:
        return self.times.size

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation in time, clamped to the sampled range."""
        ts = self.times
        if ts.size == 1 or t <= ts[0]:
            return self.values[0]
        if t >= ts[-1]:
            return self.values[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        if w == 0:
            return self.values[k]
        return (1 - w) * self.values[k] + w * self.values[k + 1]

    def field(self, k: int):
        v = self.values[k]
        return ScalarField(self.grid, v) if v.ndim == self.grid.n else VectorField(self.grid, v)
