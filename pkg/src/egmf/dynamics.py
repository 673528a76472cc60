"""
Test models, Euler-type integrators and twin-experiment data generation.

All drifts are vectorised: they accept an array whose last axis is the
state dimension, so a whole ensemble of shape ``(M, N)`` is advanced in
one call.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from egmf.errors import IntegrationBlowup

LANGEVIN_GAMMA = 0.25
LANGEVIN_SIGMA2 = 0.35


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Key for a reproducible random stream.

    Streams are Philox (counter based) generators keyed through
    ``numpy.random.SeedSequence`` with ``spawn_key=(domain, stream_id)``, so
    the same ``(seed, domain, stream_id)`` triple always yields the same
    sequence independently of how many other streams exist.
    """

    seed: int
    stream_id: int = 0
    domain: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.domain, self.stream_id))
        return np.random.Generator(np.random.Philox(ss))


def member_generators(seed: int, M: int, domain: int = 0) -> list[np.random.Generator]:
    """One independent generator per ensemble member (stream id = member index)."""
    return [RngStream(seed, i, domain).generator() for i in range(M)]


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def double_well_potential(x):
    return np.cos(x) + 0.75 * (np.asarray(x) / 6.0) ** 4


def double_well_potential_derivative(x):
    x = np.asarray(x)
    return -np.sin(x) + x**3 / 432.0


def double_well_drift(x):
    """Drift ``-V'(x)`` of overdamped Brownian motion in the double well."""
    x = np.asarray(x)
    return np.sin(x) - x**3 / 432.0


def langevin_drift(q, v, gamma: float = LANGEVIN_GAMMA):
    return v, double_well_drift(q) - gamma * np.asarray(v)


def lorenz63_drift(x, y, z, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0):
    return sigma * (y - x), x * (rho - z) - y, x * y - beta * z


@dataclass(frozen=True)
class ModelSpec:
    """An SDE ``dx = drift(x, t) dt + diag(noise_amplitude) dw``."""

    dimension: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    noise_amplitude: np.ndarray
    name: str = "model"
    scheme: str = "euler"

    def __post_init__(self):
        if self.scheme not in ("euler", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "rk4" and np.any(np.asarray(self.noise_amplitude) > 0):
            raise ValueError("rk4 is only available for deterministic models")
        amp = np.asarray(self.noise_amplitude, dtype=float).reshape(-1)
        if amp.shape != (self.dimension,):
            raise ValueError(f"noise_amplitude must have length {self.dimension}")
        if np.any(amp < 0):
            raise ValueError("noise_amplitude entries must be >= 0")
        object.__setattr__(self, "noise_amplitude", amp)

    @property
    def is_deterministic(self) -> bool:
        return not np.any(self.noise_amplitude > 0)


def _dw_drift(x, t):
    return double_well_drift(x)


def _langevin_drift_stacked(x, t):
    dq, dv = langevin_drift(x[..., 0], x[..., 1])
    return np.stack([dq, dv], axis=-1)


def _lorenz_drift_stacked(x, t, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    out = np.empty_like(x)
    out[..., 0] = sigma * (b - a)
    out[..., 1] = a * (rho - c) - b
    out[..., 2] = a * b - beta * c
    return out


def double_well_model() -> ModelSpec:
    return ModelSpec(1, _dw_drift, np.array([1.0]), "double_well")


def langevin_model() -> ModelSpec:
    return ModelSpec(2, _langevin_drift_stacked, np.array([0.0, np.sqrt(LANGEVIN_SIGMA2)]), "langevin")


def lorenz63_model(scheme: str = "euler") -> ModelSpec:
    return ModelSpec(3, _lorenz_drift_stacked, np.zeros(3), "lorenz63", scheme)


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

def _check_finite(x, **context):
    if not np.all(np.isfinite(x)):
        raise IntegrationBlowup("non-finite state after integration step", **context)
    return x


def step_euler(model: ModelSpec, x, t: float, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x + dt * model.drift(x, t)
    return _check_finite(out, t=t)


def step_rk4(model: ModelSpec, x, t: float, dt: float):
    """Classical fourth-order Runge-Kutta step for the drift."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x + _rk4_increment(model.drift, x, t, dt)
    return _check_finite(out, t=t)


def _rk4_increment(f, x, t, dt):
    k1 = f(x, t)
    k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(x + dt * k3, t + dt)
    return dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _deterministic_increment(model: ModelSpec, x, t, dt):
    if model.scheme == "rk4":
        return _rk4_increment(model.drift, x, t, dt)
    return dt * model.drift(x, t)


def step_euler_maruyama(model: ModelSpec, x, t: float, dt: float, rng: np.random.Generator):
    """One Euler-Maruyama step; ``rng`` supplies ``xi ~ N(0, I)`` of shape ``x.shape``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    xi = rng.standard_normal(x.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x + dt * model.drift(x, t) + np.sqrt(dt) * model.noise_amplitude * xi
    return _check_finite(out, t=t)


def n_steps_between(t0: float, t1: float, dt: float) -> int:
    ratio = (t1 - t0) / dt
    n = int(round(ratio))
    if n < 0 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise ValueError(f"(t1 - t0)/dt = {ratio} is not a nonnegative integer")
    return n


def propagate_ensemble(
    model: ModelSpec,
    ensemble,
    t0: float,
    t1: float,
    dt: float,
    rngs: Optional[Sequence[np.random.Generator]] = None,
):
    """Advance every member from ``t0`` to ``t1`` with fixed step ``dt``.

    Member ``i`` draws its Brownian increments from ``rngs[i]`` only, in one
    block per call, so results do not depend on evaluation order. ``rngs``
    may be omitted for deterministic models.
    """
    E = np.array(ensemble, dtype=float, copy=True)
    M, N = E.shape
    n = n_steps_between(t0, t1, dt)
    if n == 0:
        return E
    stochastic = not model.is_deterministic
    if stochastic:
        if rngs is None or len(rngs) != M:
            raise ValueError("stochastic model needs one generator per member")
        noise = np.stack([g.standard_normal((n, N)) for g in rngs], axis=1)
        noise *= np.sqrt(dt) * model.noise_amplitude
    t = t0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            E = E + _deterministic_increment(model, E, t, dt)
            if stochastic:
                E += noise[k]
            t = t0 + (k + 1) * dt
    bad = ~np.all(np.isfinite(E), axis=1)
    if np.any(bad):
        raise IntegrationBlowup(
            f"ensemble member {int(np.argmax(bad))} blew up between t={t0} and t={t1}",
            member=int(np.argmax(bad)), t0=t0, t1=t1,
        )
    return E


# ---------------------------------------------------------------------------
# Truth and observations
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T, N)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def to_csv(self, path) -> None:
        N = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 1}" for j in range(N)])
            for t, x in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def simulate(model: ModelSpec, x0, dt: float, n_steps: int, rng: Optional[np.random.Generator] = None,
             t0: float = 0.0) -> Trajectory:
    """Integrate a single trajectory with the model's scheme, recording every step."""
    x = np.asarray(x0, dtype=float).reshape(model.dimension)
    states = np.empty((n_steps + 1, model.dimension))
    states[0] = x
    stochastic = not model.is_deterministic
    if stochastic:
        if rng is None:
            raise ValueError("stochastic model needs a generator")
        noise = rng.standard_normal((n_steps, model.dimension)) * (np.sqrt(dt) * model.noise_amplitude)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            t = t0 + k * dt
            x = x + _deterministic_increment(model, x, t, dt)
            if stochastic:
                x = x + noise[k]
            states[k + 1] = x
    _check_finite(states, t0=t0)
    return Trajectory(t0 + dt * np.arange(n_steps + 1), states)


def spin_up(model: ModelSpec, x0, dt: float, n_steps: int = 1000):
    """Discard a transient; used for the Lorenz-63 truth start."""
    return simulate(model, x0, dt, n_steps).states[-1]


def synth_observations(truth: Trajectory, h, R: float, obs_interval: float,
                       rng: Optional[np.random.Generator]):
    """Noisy scalar observations ``h . x(t_j) + sqrt(R) xi_j`` every ``obs_interval``.

    The first observation is taken at ``times[0] + obs_interval``.
    """
    if R < 0:
        raise ValueError("R must be nonnegative")
    dt = truth.times[1] - truth.times[0]
    stride = obs_interval / dt
    k = int(round(stride))
    if k < 1 or abs(stride - k) > 1e-9 * stride:
        raise ValueError(f"obs_interval {obs_interval} is not a multiple of the trajectory spacing {dt}")
    idx = np.arange(k, len(truth.times), k)
    y = truth.states[idx] @ np.asarray(h, dtype=float)
    if R > 0:
        y = y + np.sqrt(R) * rng.standard_normal(len(idx))
    return list(zip(truth.times[idx].tolist(), y.tolist()))
