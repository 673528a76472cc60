"""
Grid-based exact filter for scalar SDEs ``dx = f(x) dt + sqrt(2D) dw`` on a
periodic interval.

The forward (Fokker-Planck) operator is discretised as a nearest-neighbour
jump process, so one explicit time step is a column-stochastic matrix and
mass and positivity are preserved by construction. Bayes updates are
pointwise multiplications by the likelihood.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from egmf.dynamics import double_well_drift, double_well_potential


@dataclass
class GridDensity:
    """Density values on the nodes ``x`` of a periodic grid with spacing ``dx``."""

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.x.shape != self.values.shape:
            raise ValueError("grid and values must have the same shape")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    def normalized(self) -> "GridDensity":
        return GridDensity(self.x, self.values / self.mass)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "p"])
            for xk, pk in zip(self.x, self.values):
                w.writerow([repr(float(xk)), repr(float(pk))])


def periodic_grid(lo: float = -10.0, hi: float = 10.0, dx: float = 0.125) -> np.ndarray:
    n = int(round((hi - lo) / dx))
    if abs(n * dx - (hi - lo)) > 1e-9:
        raise ValueError("dx must divide the domain length")
    return lo + dx * np.arange(n)


def density_from_function(x, fun: Callable) -> GridDensity:
    p = np.asarray(fun(x), dtype=float)
    return GridDensity(x, p).normalized()


def stationary_density(x, potential: Callable = double_well_potential, D: float = 0.5) -> GridDensity:
    """``exp(-V/D) / Z`` on the grid, the invariant law of ``dx = -V' dt + sqrt(2D) dw``."""
    v = potential(np.asarray(x, dtype=float))
    return density_from_function(x, lambda _: np.exp(-(v - v.min()) / D))


def stability_bound(drift_values, dx: float, D: float) -> float:
    return dx**2 / (2.0 * D + dx * np.max(np.abs(drift_values)))


def stable_substep(drift_values, dx: float, dt_model: float, D: float = 0.5) -> float:
    """Largest ``dt_model / 2^k`` within the explicit stability bound."""
    bound = stability_bound(drift_values, dx, D)
    dt = dt_model
    while dt > bound:
        dt *= 0.5
    return dt


def build_transition(drift: Callable, x, dx: float, dt_sub: float, D: float = 0.5,
                     scheme: str = "auto") -> np.ndarray:
    """One-step transition matrix ``A`` with ``p_new = A p`` (columns sum to 1).

    Diffusion is centred. Advection is ``"upwind"``, ``"central"``, or
    ``"auto"``: central when every cell Peclet number ``|f| dx / (2D)`` is at
    most one (the off-diagonal rates are then nonnegative), upwind
    otherwise.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(drift(x), dtype=float)
    bound = stability_bound(f, dx, D)
    if dt_sub > bound * (1 + 1e-12):
        raise ValueError(f"dt_sub={dt_sub} violates the stability bound {bound}")
    if scheme == "auto":
        scheme = "central" if np.all(np.abs(f) * dx <= 2.0 * D) else "upwind"
    diff = D / dx**2
    if scheme == "upwind":
        up = diff + np.maximum(f, 0.0) / dx
        down = diff + np.maximum(-f, 0.0) / dx
    elif scheme == "central":
        up = diff + f / (2.0 * dx)
        down = diff - f / (2.0 * dx)
        if np.any(up < 0) or np.any(down < 0):
            raise ValueError("central advection gives negative rates; use upwind")
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    n = len(x)
    idx = np.arange(n)
    A = np.zeros((n, n))
    A[idx, idx] = 1.0 - dt_sub * (up + down)
    np.add.at(A, ((idx + 1) % n, idx), dt_sub * up)
    np.add.at(A, ((idx - 1) % n, idx), dt_sub * down)
    return A


class FokkerPlanckPropagator:
    """Transition operator over arbitrary multiples of the substep, with caching."""

    def __init__(self, drift: Callable = double_well_drift, lo: float = -10.0, hi: float = 10.0,
                 dx: float = 0.125, dt_model: float = 0.1, D: float = 0.5, scheme: str = "auto"):
        self.x = periodic_grid(lo, hi, dx)
        self.dx = dx
        self.D = D
        self.dt_sub = stable_substep(drift(self.x), dx, dt_model, D)
        self.A = build_transition(drift, self.x, dx, self.dt_sub, D, scheme)
        self._powers: dict[int, np.ndarray] = {}

    def n_steps(self, T: float) -> int:
        n = int(round(T / self.dt_sub))
        if n < 0 or abs(n * self.dt_sub - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"T={T} is not a multiple of the substep {self.dt_sub}")
        return n

    def operator(self, n: int) -> np.ndarray:
        if n not in self._powers:
            self._powers[n] = np.linalg.matrix_power(self.A, n)
        return self._powers[n]

    def propagate(self, rho: GridDensity, T: float) -> GridDensity:
        n = self.n_steps(T)
        if n == 0:
            return GridDensity(rho.x, rho.values.copy())
        return GridDensity(rho.x, self.operator(n) @ rho.values)


def fp_propagate(rho: GridDensity, T: float, propagator: FokkerPlanckPropagator) -> GridDensity:
    return propagator.propagate(rho, T)


def bayes_update(rho: GridDensity, obs) -> GridDensity:
    """Multiply by ``exp(-(y_obs - h x)^2 / 2R)`` and renormalise."""
    h = float(np.asarray(obs.h).reshape(-1)[0])
    logl = -((obs.y_obs - h * rho.x) ** 2) / (2.0 * obs.R)
    p = rho.values * np.exp(logl - logl.max())
    mass = p.sum() * rho.dx
    if not mass > 0 or not np.isfinite(mass):
        raise FloatingPointError("posterior mass underflow on the grid")
    return GridDensity(rho.x, p / mass)


def density_mean(rho: GridDensity) -> float:
    return float(np.sum(rho.x * rho.values) * rho.dx)


def l1_distance(p: GridDensity, q: GridDensity) -> float:
    return float(np.abs(p.values - q.values).sum() * p.dx)
