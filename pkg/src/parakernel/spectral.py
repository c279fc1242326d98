"""FFT-based derivatives, heat semigroup, Leray projection and the Stokes propagator."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import Grid, ScalarField, VectorField, lp_norm


class SpectralPlan:
    """Cached real-FFT wavenumbers for one grid.

    Array methods operate on the trailing ``n`` axes and broadcast over any
    leading batch axes.  ``k2`` is the exact symbol of ``-Laplacian``;
    ``k2_fd`` the symbol of the second-order difference Laplacian, which the
    time steppers use so that implicit diffusion stays an M-matrix.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        n, N, L = grid.n, grid.N, grid.L
        full = 2 * np.pi * np.fft.fftfreq(N, d=L / N)
        half = 2 * np.pi * np.fft.rfftfreq(N, d=L / N)
        axes_k = [full] * (n - 1) + [half]
        self.k = np.meshgrid(*axes_k, indexing="ij", sparse=True)
        # derivative wavenumbers with the unmatched Nyquist mode removed
        nyq = np.pi * N / L
        self.kd = [np.where(np.isclose(np.abs(ki), nyq), 0.0, ki) for ki in self.k]
        self.k2 = sum(ki * ki for ki in self.k)
        self.k2_fd = sum((2.0 / grid.h * np.sin(ki * grid.h / 2)) ** 2 for ki in self.k)
        self.axes = grid.axes
        k2_safe = np.where(self.k2 == 0, 1.0, self.k2)
        self._inv_k2 = np.where(self.k2 == 0, 0.0, 1.0 / k2_safe)

    def fft(self, a: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(a, axes=self.axes)

    def ifft(self, a: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(a, s=self.grid.shape, axes=self.axes)

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Spectral gradient; component axis is inserted just before the spatial axes."""
        fh = self.fft(f)
        return np.stack([self.ifft(1j * ki * fh) for ki in self.kd], axis=-self.grid.n - 1)

    def div(self, u: np.ndarray) -> np.ndarray:
        n = self.grid.n
        out = 0
        for i, ki in enumerate(self.kd):
            out = out + 1j * ki * self.fft(np.take(u, i, axis=-n - 1))
        return self.ifft(out)

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return self.ifft(-self.k2 * self.fft(f))

    def laplacian_fd(self, f: np.ndarray) -> np.ndarray:
        return self.ifft(-self.k2_fd * self.fft(f))

    def heat(self, f: np.ndarray, t: float, fd: bool = False) -> np.ndarray:
        if t == 0:
            return np.array(f, dtype=float, copy=True)
        return self.ifft(np.exp(-(self.k2_fd if fd else self.k2) * t) * self.fft(f))

    def hessian_norm(self, f: np.ndarray) -> np.ndarray:
        """Pointwise Frobenius norm of the spectral Hessian."""
        fh = self.fft(f)
        acc = 0
        for i, ki in enumerate(self.kd):
            for j, kj in enumerate(self.kd):
                if j < i:
                    continue
                dij = self.ifft(-ki * kj * fh)
                acc = acc + (1 if i == j else 2) * dij * dij
        return np.sqrt(acc)

    def leray_hat(self, uh: Sequence[np.ndarray]) -> list[np.ndarray]:
        kdotu = sum(ki * ui for ki, ui in zip(self.kd, uh))
        kd2 = sum(ki * ki for ki in self.kd)
        inv = np.where(kd2 == 0, 0.0, 1.0 / np.where(kd2 == 0, 1.0, kd2))
        return [ui - ki * kdotu * inv for ki, ui in zip(self.kd, uh)]

    def leray(self, u: np.ndarray) -> np.ndarray:
        n = self.grid.n
        uh = [self.fft(np.take(u, i, axis=-n - 1)) for i in range(n)]
        return np.stack([self.ifft(c) for c in self.leray_hat(uh)], axis=-n - 1)

    def stokes(self, u: np.ndarray, t: float) -> np.ndarray:
        n = self.grid.n
        uh = [self.fft(np.take(u, i, axis=-n - 1)) for i in range(n)]
        decay = np.exp(-self.k2 * t)
        return np.stack([self.ifft(decay * c) for c in self.leray_hat(uh)], axis=-n - 1)

    def stokes_duhamel_step(self, u: np.ndarray, force: np.ndarray, dt: float) -> np.ndarray:
        """Exponential-Euler step of ``u_t = Laplacian u + P force`` with force frozen over ``dt``."""
        n = self.grid.n
        uh = [self.fft(np.take(u, i, axis=-n - 1)) for i in range(n)]
        fh = self.leray_hat([self.fft(np.take(force, i, axis=-n - 1)) for i in range(n)])
        decay = np.exp(-self.k2 * dt)
        phi1 = np.where(self.k2 == 0, dt, -np.expm1(-self.k2 * dt) * self._inv_k2)
        uh = self.leray_hat(uh)
        return np.stack([self.ifft(decay * a + phi1 * b) for a, b in zip(uh, fh)], axis=-n - 1)


@functools.lru_cache(maxsize=32)
def plan_for(grid: Grid) -> SpectralPlan:
    return SpectralPlan(grid)


def spectral_derivatives(f, which: str):
    """``grad`` of a scalar, ``div`` of a vector, or ``laplacian`` of either."""
    plan = plan_for(f.grid)
    if which == "grad":
        if not isinstance(f, ScalarField):
            raise TypeError("grad needs a ScalarField")
        return VectorField(f.grid, plan.grad(f.values))
    if which == "div":
        if not isinstance(f, VectorField):
            raise TypeError("div needs a VectorField")
        return ScalarField(f.grid, plan.div(f.values))
    if which == "laplacian":
        return type(f)(f.grid, plan.laplacian(f.values))
    raise ValueError(f"unknown derivative {which!r}")


def _check_t(t: float) -> None:
    if t < 0:
        raise ValueError(f"duration must be nonnegative, got {t}")


def heat_semigroup(f, t: float):
    _check_t(t)
    if t == 0:
        return f
    return type(f)(f.grid, plan_for(f.grid).heat(f.values, t))


def leray_project(u: VectorField) -> VectorField:
    return VectorField(u.grid, plan_for(u.grid).leray(u.values))


def stokes_propagate(u: VectorField, t: float) -> VectorField:
    _check_t(t)
    return VectorField(u.grid, plan_for(u.grid).stokes(u.values, t))


@dataclass
class SmoothingFit:
    slope: float
    intercept: float
    times: np.ndarray
    log_ratio: np.ndarray
    expected_slope: float


def smoothing_exponent(n: int, p: float, r: float, gradient: bool = False) -> float:
    inv = lambda q: 0.0 if math.isinf(q) else 1.0 / q
    e = -(n / 2) * (inv(p) - inv(r))
    return e - 0.5 if gradient else e


def verify_smoothing(p: float, r: float, family: Iterable, times: Sequence[float], gradient: bool = False) -> SmoothingFit:
    """Fit the power law of ``sup_f ||S(t) f||_r / ||f||_p`` over ``times``.

    Scalars are propagated with the heat semigroup, vector fields with the
    Stokes propagator.  With ``gradient=True`` the numerator is
    ``||grad S(t) f||_r``.
    """
    if not 1 <= p <= r:
        raise ValueError("need 1 <= p <= r")
    times = np.asarray(times, dtype=float)
    if times.size < 3 or times.min() <= 0 or times.max() / times.min() < 10 * (1 - 1e-12):
        raise ValueError("time range must hold >= 3 positive times spanning at least one decade")
    family = list(family)
    grid = family[0].grid
    plan = plan_for(grid)
    worst = np.full(times.size, -np.inf)
    for f in family:
        base = lp_norm(f, p)
        if base == 0:
            continue
        if isinstance(f, VectorField):
            uh = plan.leray_hat([plan.fft(c) for c in f.values])
        else:
            uh = [plan.fft(f.values)]
        for it, t in enumerate(times):
            decay = np.exp(-plan.k2 * t)
            comps = []
            for c in uh:
                ch = decay * c
                if gradient:
                    comps.extend(plan.ifft(1j * ki * ch) for ki in plan.kd)
                else:
                    comps.append(plan.ifft(ch))
            mag = np.sqrt(sum(c * c for c in comps)) if len(comps) > 1 else np.abs(comps[0])
            num = lp_norm(mag, r, grid)
            if num > 0:
                worst[it] = max(worst[it], math.log(num / base))
    if not np.all(np.isfinite(worst)):
        raise ValueError("family yields vanishing norms at some time")
    slope, intercept = np.polyfit(np.log(times), worst, 1)
    return SmoothingFit(float(slope), float(intercept), times, worst, smoothing_exponent(grid.n, p, r, gradient))
