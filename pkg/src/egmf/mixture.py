"""
Gaussian mixture statistical models: densities, EM fitting and kernel
density estimators built from an ensemble.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from egmf.ensemble import as_ensemble, ensemble_covariance
from egmf.errors import EMFailure

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
DEFAULT_DELTA = 1e-6


@dataclass(frozen=True)
class GaussianMixture:
    """Weights ``(L,)``, means ``(L, N)`` and covariances ``(L, N, N)``."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        P = np.asarray(self.covs, dtype=float)
        if P.ndim == 1:
            P = P[:, None, None]
        L, N = mu.shape
        if w.shape != (L,) or P.shape != (L, N, N):
            raise ValueError(f"inconsistent mixture shapes {w.shape}, {mu.shape}, {P.shape}")
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        if not np.allclose(P, np.swapaxes(P, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise ValueError("component covariances must be symmetric")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", P)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    def logpdf(self, X) -> np.ndarray:
        X = as_ensemble(X)
        return logsumexp(component_logpdfs(self, X) + np.log(self.weights), axis=1)

    def pdf(self, X) -> np.ndarray:
        return np.exp(self.logpdf(X))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        d = self.means - mu
        return np.einsum("l,ljk->jk", self.weights, self.covs) + np.einsum("l,lj,lk->jk", self.weights, d, d)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dimension))
        return self.means[labels] + np.einsum("ijk,ik->ij", chol[labels], z)

    def to_csv(self, path) -> None:
        N = self.dimension
        header = ["component", "alpha"] + [f"mean_{j + 1}" for j in range(N)]
        header += [f"cov_{j + 1}{k + 1}" for j in range(N) for k in range(N)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for l in range(self.n_components):
                w.writerow([l, repr(float(self.weights[l]))]
                           + [repr(float(v)) for v in self.means[l]]
                           + [repr(float(v)) for v in self.covs[l].ravel()])


@dataclass(frozen=True)
class EMResult:
    mixture: GaussianMixture
    converged: bool
    n_iter: int
    loglik: float
    n_reinit: int = 0


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def gaussian_logpdf(x, mean, cov) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        C = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    z = np.linalg.solve(C, x - mean)
    return float(-0.5 * (len(x) * LOG_2PI + z @ z) - np.log(np.diag(C)).sum())


def _batched_chol(covs):
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("component covariance is not positive definite") from exc


def component_logpdfs(m: GaussianMixture, X) -> np.ndarray:
    """``log pi_l(x_i)`` for all members and components, shape ``(M, L)``."""
    X = as_ensemble(X)
    N = m.dimension
    if N == 1:
        var = m.covs[:, 0, 0]
        if np.any(var <= 0):
            raise ValueError("component covariance is not positive definite")
        d = X[:, :1] - m.means[:, 0]
        with np.errstate(over="ignore"):
            return -0.5 * (LOG_2PI + np.log(var) + d**2 / var)
    C = _batched_chol(m.covs)
    logdet = 2.0 * np.log(np.diagonal(C, axis1=1, axis2=2)).sum(axis=1)
    Cinv = np.linalg.inv(C)
    d = X[:, None, :] - m.means[None, :, :]
    z = np.einsum("ljk,mlk->mlj", Cinv, d)
    with np.errstate(over="ignore"):
        return -0.5 * (N * LOG_2PI + logdet + np.einsum("mlj,mlj->ml", z, z))


def marginal_logpdfs(m: GaussianMixture, X, h, varfloor: float = 0.0) -> np.ndarray:
    """``log pi_l(h . x_i)`` using the observation-space marginals."""
    ybar, sigma = marginal(m, h, varfloor)
    y = as_ensemble(X) @ np.asarray(h, dtype=float)
    d = y[:, None] - ybar
    return -0.5 * (LOG_2PI + 2 * np.log(sigma) + d**2 / sigma**2)


def log_responsibilities(m: GaussianMixture, X, h=None, varfloor: float = 0.0):
    """Log responsibilities ``(M, L)`` and per-member mixture log density ``(M,)``.

    With ``h`` given, component densities are replaced by their
    observation-space marginals.
    """
    X = as_ensemble(X)
    if h is None:
        lp = component_logpdfs(m, X)
    else:
        lp = marginal_logpdfs(m, X, h, varfloor)
    with np.errstate(divide="ignore"):
        lw = lp + np.log(m.weights)
    norm = logsumexp(lw, axis=1)
    bad = ~np.isfinite(norm)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise EMFailure(f"all mixture components underflow at member {i}", member=i)
    return lw - norm[:, None], norm


def responsibilities(m: GaussianMixture, X, h=None, varfloor: float = 0.0) -> np.ndarray:
    lb, _ = log_responsibilities(m, X, h, varfloor)
    return np.exp(lb)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def floor_covariances(covs, varfloor: float) -> np.ndarray:
    """Raise every eigenvalue below ``varfloor`` to ``varfloor``."""
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    if varfloor <= 0:
        return covs
    if covs.shape[1] == 1:
        return np.maximum(covs, varfloor)
    w, V = np.linalg.eigh(covs)
    if np.all(w >= varfloor):
        return covs
    out = covs.copy()
    for l in np.flatnonzero(np.any(w < varfloor, axis=1)):
        wl = np.maximum(w[l], varfloor)
        out[l] = (V[l] * wl) @ V[l].T
        out[l] = 0.5 * (out[l] + out[l].T)
    return out


def _sample_cov_or_floor(X, delta, varfloor):
    M, N = X.shape
    P = ensemble_covariance(X) if M > 1 else np.zeros((N, N))
    P = P + delta * np.eye(N)
    return floor_covariances(P[None], varfloor)[0]


def em_step(m: GaussianMixture, X, delta: float = DEFAULT_DELTA, varfloor: float = 0.0,
            h=None, _stats: Optional[dict] = None) -> GaussianMixture:
    """One EM iteration (E-step then M-step).

    The M-step uses responsibility-weighted moments normalised by
    ``sum_i beta_il``, adds ``delta * I`` and floors eigenvalues at
    ``varfloor``. A component that has lost all responsibility is
    re-seeded at the worst-explained member with the sample covariance.
    """
    if delta < 0 or varfloor < 0:
        raise ValueError("delta and varfloor must be nonnegative")
    X = as_ensemble(X)
    M, N = X.shape
    log_beta, member_ll = log_responsibilities(m, X, h, varfloor)
    beta = np.exp(log_beta)
    Nk = beta.sum(axis=0)
    empty = Nk < 1e-12
    Nk_safe = np.where(empty, 1.0, Nk)

    means = (beta.T @ X) / Nk_safe[:, None]
    d = X[:, None, :] - means[None, :, :]
    covs = np.einsum("ml,mlj,mlk->ljk", beta, d, d) / Nk_safe[:, None, None]
    covs = covs + delta * np.eye(N)
    weights = Nk / M

    if np.any(empty):
        P0 = _sample_cov_or_floor(X, delta, varfloor)
        order = np.argsort(member_ll, kind="stable")
        for j, l in enumerate(np.flatnonzero(empty)):
            i = int(order[j % M])
            log.debug("EM: reinitialising empty component %d at member %d", l, i)
            means[l] = X[i]
            covs[l] = P0
            weights[l] = 1.0 / M
        weights = weights / weights.sum()
        if _stats is not None:
            _stats["n_reinit"] = _stats.get("n_reinit", 0) + int(empty.sum())

    covs = floor_covariances(covs, varfloor)
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, covs)


def total_loglik(m: GaussianMixture, X, h=None, varfloor: float = 0.0) -> float:
    X = as_ensemble(X)
    if h is None:
        lp = component_logpdfs(m, X)
    else:
        lp = marginal_logpdfs(m, X, h, varfloor)
    with np.errstate(divide="ignore"):
        return float(logsumexp(lp + np.log(m.weights), axis=1).sum())


def default_init(X, L: int, delta: float = DEFAULT_DELTA, varfloor: float = 0.0) -> GaussianMixture:
    """Deterministic EM starting point.

    L=1 starts at the EM fixed point (sample moments). For N=1, L=2 the
    means sit at the 25th/75th member quantiles; otherwise seeds are chosen
    by farthest-point traversal starting from the two most distant members.
    All components start with the sample covariance and equal weights.
    """
    X = as_ensemble(X)
    M, N = X.shape
    if L < 1:
        raise ValueError("L must be >= 1")
    if L == 1:
        mu = X.mean(axis=0)
        A = X - mu
        P = A.T @ A / M + delta * np.eye(N)
        return GaussianMixture(np.ones(1), mu[None], floor_covariances(P[None], varfloor))
    P0 = _sample_cov_or_floor(X, delta, varfloor)
    if N == 1 and L == 2:
        means = np.quantile(X[:, 0], [0.25, 0.75])[:, None]
    else:
        D = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
        i, j = np.unravel_index(np.argmax(D), D.shape)
        chosen = [int(i), int(j)]
        while len(chosen) < L:
            chosen.append(int(np.argmax(D[:, chosen].min(axis=1))))
        means = X[chosen[:L]]
    return GaussianMixture(np.full(L, 1.0 / L), means, np.repeat(P0[None], L, axis=0))


def em_fit(X, L: int, init: Optional[GaussianMixture] = None, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER, delta: float = DEFAULT_DELTA, varfloor: float = 0.0,
           h=None) -> EMResult:
    """Iterate :func:`em_step` until the relative log-likelihood change is below ``tol``.

    ``n_iter`` counts EM steps taken, including the one whose change fell
    under the tolerance.
    """
    X = as_ensemble(X)
    if init is None:
        init = default_init(X, L, delta, varfloor)
    elif init.n_components != L:
        raise ValueError(f"init has {init.n_components} components, expected {L}")
    m = init
    ll = total_loglik(m, X, h, varfloor)
    stats: dict = {}
    for k in range(1, max_iter + 1):
        m = em_step(m, X, delta, varfloor, h, _stats=stats)
        ll_new = total_loglik(m, X, h, varfloor)
        if not np.isfinite(ll_new):
            raise EMFailure(f"EM log-likelihood became {ll_new} at iteration {k}", iteration=k)
        if abs(ll_new - ll) <= tol * max(abs(ll), 1e-300):
            return EMResult(m, True, k, ll_new, stats.get("n_reinit", 0))
        ll = ll_new
    return EMResult(m, False, max_iter, ll, stats.get("n_reinit", 0))


def l_policy_double_well(X, threshold: float = 0.9, coordinate: int = 0) -> int:
    """Two components unless at least ``threshold`` of members share a well.

    Members exactly at zero count toward neither side.
    """
    x = as_ensemble(X)[:, coordinate]
    M = len(x)
    need = threshold * M
    if np.count_nonzero(x > 0) >= need or np.count_nonzero(x < 0) >= need:
        return 1
    return 2


# ---------------------------------------------------------------------------
# Kernel density estimators
# ---------------------------------------------------------------------------

def kde_bandwidth(N: int, M: int) -> float:
    """Scaling ``c`` of ``B = c P`` that is asymptotically optimal for Gaussian data."""
    if N < 1 or M < 1:
        raise ValueError("N and M must be >= 1")
    return (2.0 / (N + 2)) ** (4.0 / (N + 4)) * M ** (-2.0 / (N + 4))


def kde_mixture(X, B) -> GaussianMixture:
    """One kernel of covariance ``B`` on every member, equal weights."""
    X = as_ensemble(X)
    M, N = X.shape
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape != (N, N):
        raise ValueError(f"kernel covariance must be {N}x{N}")
    _batched_chol(B[None])
    return GaussianMixture(np.full(M, 1.0 / M), X.copy(), np.broadcast_to(B, (M, N, N)).copy())


# ---------------------------------------------------------------------------
# Observation-space marginals
# ---------------------------------------------------------------------------

def marginal(m: GaussianMixture, h, varfloor: float = 0.0):
    """Per-component means ``h . xbar_l`` and standard deviations ``sqrt(h P_l h)``."""
    h = np.asarray(h, dtype=float).reshape(-1)
    if not np.any(h != 0):
        raise ValueError("forward map h must be nonzero")
    ybar = m.means @ h
    var = np.einsum("j,ljk,k->l", h, m.covs, h)
    var = np.maximum(var, varfloor)
    if np.any(var <= 0):
        raise ValueError("observation-space variance is not positive")
    return ybar, np.sqrt(var)
