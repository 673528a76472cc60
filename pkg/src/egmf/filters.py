"""
Assimilation schemes behind one small interface.

The step functions operate on ``(M, N)`` ensembles. The classes at the
bottom wrap them with their parameters and random streams so the
experiment driver can treat every filter alike.
"""
from __future__ import annotations

from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from egmf.dynamics import ModelSpec
from egmf.ensemble import as_ensemble, ensemble_covariance, inflate
from egmf.errors import NumericalAbort
from egmf.mixture import kde_bandwidth, l_policy_double_well
from egmf.transport import (
    AnalysisConfig,
    EMFitter,
    KDEFitter,
    ScalarObservation,
    analysis_step,
)


class FilterKind(str, Enum):
    ENKF_PO = "enkf_po"
    ESRF = "esrf"
    RHF = "rhf"
    EGMF_EM = "egmf_em"
    EGMF_KDE = "egmf_kde"
    KALMAN_BUCY = "kalman_bucy"


# ---------------------------------------------------------------------------
# Step functions
# ---------------------------------------------------------------------------

def enkf_po_step(X, obs: ScalarObservation, rng: np.random.Generator) -> np.ndarray:
    """EnKF analysis with perturbed observations ``y_obs + d_i``, ``d_i ~ N(0, R)``."""
    X = as_ensemble(X)
    P = ensemble_covariance(X)
    Ph = P @ obs.h
    K = Ph / (obs.h @ Ph + obs.R)
    d = np.sqrt(obs.R) * rng.standard_normal(X.shape[0])
    innov = obs.y_obs + d - X @ obs.h
    return X + np.outer(innov, K)


def esrf_continuous_step(X, obs: ScalarObservation, ds: float) -> np.ndarray:
    """Continuous square-root filter integrated with forward Euler in ``s``.

    ``dx_i/ds = -1/2 P h R^-1 (h.x_i + h.xbar - 2 y_obs)`` with the mean and
    1/(M-1) covariance recomputed at every substep.
    """
    n = int(round(1.0 / ds))
    if n < 1 or abs(n * ds - 1.0) > 1e-9:
        raise ValueError(f"1/ds must be an integer, got ds={ds}")
    X = np.array(as_ensemble(X), copy=True)
    h = obs.h
    for k in range(n):
        xbar = X.mean(axis=0)
        Ph = ensemble_covariance(X) @ h
        coef = (X @ h + xbar @ h - 2.0 * obs.y_obs)[:, None]
        X = X + ds * ((-0.5 / obs.R) * (coef @ Ph[None, :]))
        if not np.all(np.isfinite(X)):
            raise NumericalAbort(f"non-finite ensemble at ESRF substep {k}", substep=k)
    return X


def rhf_observation_increments(y, obs_y: float, R: float) -> np.ndarray:
    """Rank-histogram increments in observation space.

    The prior is piecewise uniform with mass ``1/(M+1)`` between consecutive
    sorted members and Gaussian tails (ensemble spread) of the same mass
    outside. The posterior multiplies each interior piece by the mean of
    the likelihood at its end points, and each tail by the likelihood at the
    outermost member. Member ``k`` in sorted order moves to the posterior
    quantile ``k/(M+1)``.
    """
    y = np.asarray(y, dtype=float)
    M = len(y)
    order = np.argsort(y, kind="stable")
    ys = y[order]
    sd = np.std(y, ddof=1) if M > 1 else 0.0
    if not sd > 0:
        return np.zeros(M)
    q = 1.0 / (M + 1)
    loglik = -((obs_y - ys) ** 2) / (2.0 * R)
    lik = np.exp(loglik - loglik.max())
    tail_l = q * lik[0]
    tail_r = q * lik[-1]
    inner = 0.5 * q * (lik[:-1] + lik[1:])
    Z = tail_l + inner.sum() + tail_r
    cdf = np.concatenate([[tail_l], tail_l + np.cumsum(inner)]) / Z  # at each ys[k]

    z_q = ndtri(q)  # < 0
    mu_l = ys[0] - sd * z_q
    mu_r = ys[-1] + sd * z_q
    targets = q * np.arange(1, M + 1)
    new = np.empty(M)
    left = targets <= cdf[0]
    right = targets >= cdf[-1]
    mid = ~(left | right)
    if np.any(left):
        new[left] = mu_l + sd * ndtri(np.minimum(targets[left] * Z / lik[0], 1.0))
    if np.any(right):
        new[right] = mu_r - sd * ndtri(np.minimum((1.0 - targets[right]) * Z / lik[-1], 1.0))
    if np.any(mid):
        t = targets[mid]
        k = np.clip(np.searchsorted(cdf, t, side="right") - 1, 0, M - 2)
        width = cdf[k + 1] - cdf[k]
        frac = np.where(width > 0, (t - cdf[k]) / np.where(width > 0, width, 1.0), 0.0)
        new[mid] = ys[k] + frac * (ys[k + 1] - ys[k])
    dy = np.empty(M)
    dy[order] = new - ys
    return dy


def rhf_step(X, obs: ScalarObservation) -> np.ndarray:
    """Rank histogram filter: observation-space quantile map plus linear regression."""
    X = as_ensemble(X)
    if X.shape[0] < 2:
        return X.copy()
    P = ensemble_covariance(X)
    Ph = P @ obs.h
    hPh = obs.h @ Ph
    if not hPh > 0:
        return X.copy()
    dy = rhf_observation_increments(X @ obs.h, obs.y_obs, obs.R)
    return X + np.outer(dy, Ph / hPh)


def egmf_step(X, obs_list: Sequence[ScalarObservation], fitter, cfg: AnalysisConfig,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return analysis_step(X, obs_list, fitter, cfg, rng)


def kalman_bucy_step(X, dQ: float, dt: float, model: ModelSpec, rngs=None, c: float = 0.2,
                     h=(0.0, 1.0), xi=None) -> np.ndarray:
    """Combined Euler-Maruyama model step and ensemble Kalman-Bucy increment.

    ``dx_i = f(x_i) dt + noise - P h / (2c) (h.x_i dt + h.xbar dt - 2 dQ)``
    with every term evaluated at the current ensemble. Standard normals
    come from ``xi`` (shape ``(M, N)``) or one draw per member from ``rngs``.
    """
    if not c > 0:
        raise ValueError("observation noise intensity c must be positive")
    X = as_ensemble(X)
    M, N = X.shape
    h = np.asarray(h, dtype=float)
    Ph = ensemble_covariance(X) @ h
    y = X @ h
    innov = y * dt + y.mean() * dt - 2.0 * dQ
    out = X + dt * model.drift(X, 0.0) - np.outer(innov, Ph / (2.0 * c))
    if not model.is_deterministic:
        if xi is None:
            xi = np.stack([g.standard_normal(N) for g in rngs])
        out = out + np.sqrt(dt) * model.noise_amplitude * xi
    if not np.all(np.isfinite(out)):
        raise NumericalAbort("non-finite ensemble in Kalman-Bucy step")
    return out


# ---------------------------------------------------------------------------
# Filter objects
# ---------------------------------------------------------------------------

class Filter:
    """Analysis step with its parameters and an optional inflation factor.

    Inflation is applied to the forecast right before the analysis.
    """

    kind: FilterKind
    name: str

    def __init__(self, name: Optional[str] = None, inflation: float = 1.0):
        if inflation < 1:
            raise ValueError("inflation must be >= 1")
        self.name = name or self.kind.value
        self.inflation = inflation
        self.n_analyses = 0
        self.n_bimodal = 0

    def analyze(self, X, obs_list: Sequence[ScalarObservation]) -> np.ndarray:
        X = as_ensemble(X)
        obs_list = list(obs_list)
        if not obs_list:
            return X.copy()
        if self.inflation != 1.0:
            X = inflate(X, self.inflation)
        self.n_analyses += 1
        return self._analyze(X, obs_list)

    def _analyze(self, X, obs_list):
        raise NotImplementedError

    @property
    def bimodal_fraction(self) -> float:
        return self.n_bimodal / self.n_analyses if self.n_analyses else 0.0


class EnKFPO(Filter):
    kind = FilterKind.ENKF_PO

    def __init__(self, rng: np.random.Generator, **kw):
        super().__init__(**kw)
        self.rng = rng

    def _analyze(self, X, obs_list):
        for obs in obs_list:
            X = enkf_po_step(X, obs, self.rng)
        return X


class ESRF(Filter):
    kind = FilterKind.ESRF

    def __init__(self, ds: float, **kw):
        super().__init__(**kw)
        self.ds = ds

    def _analyze(self, X, obs_list):
        for obs in obs_list:
            X = esrf_continuous_step(X, obs, self.ds)
        return X


class RHF(Filter):
    kind = FilterKind.RHF

    def _analyze(self, X, obs_list):
        for obs in obs_list:
            X = rhf_step(X, obs)
        return X


class EGMF(Filter):
    """EM flavour: the number of components is chosen per analysis by ``l_policy``."""

    kind = FilterKind.EGMF_EM

    def __init__(self, cfg: AnalysisConfig, l_policy: Callable[[np.ndarray], int] = l_policy_double_well,
                 rng: Optional[np.random.Generator] = None, **kw):
        super().__init__(**kw)
        self.cfg = cfg
        self.l_policy = l_policy
        self.rng = rng
        self.n_unconverged = 0

    def _analyze(self, X, obs_list):
        L = int(self.l_policy(X))
        self.n_bimodal += L >= 2
        fitter = EMFitter(L)
        out = analysis_step(X, obs_list, fitter, self.cfg, self.rng)
        self.n_unconverged += fitter.n_unconverged
        return out


class EGMFKDE(Filter):
    """Kernel flavour with ``B = c P``; ``c`` defaults to the large-M optimum."""

    kind = FilterKind.EGMF_KDE

    def __init__(self, cfg: AnalysisConfig, c: Optional[float] = None,
                 rng: Optional[np.random.Generator] = None, **kw):
        super().__init__(**kw)
        self.cfg = cfg
        self.c = c
        self.rng = rng

    def _analyze(self, X, obs_list):
        c = self.c if self.c is not None else kde_bandwidth(X.shape[1], X.shape[0])
        return analysis_step(X, obs_list, KDEFitter(c), self.cfg, self.rng)


def fixed_l_policy(L: int) -> Callable[[np.ndarray], int]:
    return lambda X: L
