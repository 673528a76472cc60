"""
Continuous (fictitious-time) analysis step of the ensemble Gaussian mixture
filter.

Every member follows ``dx/ds = u_A(x) + u_B(x)`` for ``s`` in ``[0, 1]``.
``u_A`` is a responsibility-weighted sum of per-component Kalman flows and
``u_B`` moves members between components so that the mixture weights change
as Bayes' rule demands while member weights stay at ``1/M``. Fields are
evaluated for the whole ensemble at once and returned as ``(M, N)`` arrays.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf, logsumexp

from egmf.ensemble import as_ensemble, ensemble_covariance
from egmf.errors import NumericalAbort
from egmf.mixture import (
    DEFAULT_DELTA,
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    GaussianMixture,
    em_fit,
    kde_mixture,
    log_responsibilities,
    marginal,
)

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
# exp(600) leaves head room for the P h products and the member sums below
LOG_RATIO_CAP = 600.0


@dataclass(frozen=True)
class ScalarObservation:
    h: np.ndarray
    R: float
    y_obs: float

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).reshape(-1)
        if not np.any(h != 0):
            raise ValueError("forward map h must have a nonzero entry")
        if not self.R > 0:
            raise ValueError("observation error variance R must be positive")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "R", float(self.R))
        object.__setattr__(self, "y_obs", float(self.y_obs))


@dataclass(frozen=True)
class EMParams:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    delta: float = DEFAULT_DELTA
    varfloor: float = 0.0


@dataclass(frozen=True)
class AnalysisConfig:
    """Knobs of one analysis step.

    ``ds`` must divide 1 exactly. ``uB_variant`` is ``"erf"`` (Gaussian
    marginals) or ``"t3"`` (Student-t with three degrees of freedom).
    ``uA_variant`` is ``"deterministic"`` or ``"perturbed"``. With
    ``t3_weights="t3"`` the Student-t exchange field weights components by
    their t3 observation-space densities instead of the Gaussian
    responsibilities; this keeps the far-tail contributions of the
    components cancelling as they do in the erf form. When
    ``refit_each_step`` is false the mixture is fitted once at ``s = 0`` and
    then advanced with :func:`mixture_param_flow`.

    ``kernel_gain`` applies to fitters with a bandwidth flow (the kernel
    flavour). ``"end"`` evaluates ``u_A`` with the bandwidth advanced to
    the end of the substep, which makes each substep an exact Kalman update
    with observation variance ``R/ds``, so the kernels reach their exact
    Kalman update at ``s = 1`` for any ``ds``. ``"start"`` is plain forward
    Euler.
    """

    ds: float = 0.05
    u_cut: float = np.inf
    uB_variant: str = "erf"
    uA_variant: str = "deterministic"
    refit_each_step: bool = True
    em: EMParams = field(default_factory=EMParams)
    beta_from_marginal: bool = False
    t3_weights: str = "gaussian"
    kernel_gain: str = "end"

    def __post_init__(self):
        if not 0 < self.ds <= 1:
            raise ValueError("ds must lie in (0, 1]")
        n = round(1.0 / self.ds)
        if abs(n * self.ds - 1.0) > 1e-9:
            raise ValueError(f"1/ds must be an integer, got ds={self.ds}")
        if not self.u_cut > 0:
            raise ValueError("u_cut must be positive")
        if self.uB_variant not in ("erf", "t3"):
            raise ValueError(f"unknown uB_variant {self.uB_variant!r}")
        if self.uA_variant not in ("deterministic", "perturbed"):
            raise ValueError(f"unknown uA_variant {self.uA_variant!r}")
        if self.t3_weights not in ("gaussian", "t3"):
            raise ValueError(f"unknown t3_weights {self.t3_weights!r}")
        if self.kernel_gain not in ("end", "start"):
            raise ValueError(f"unknown kernel_gain {self.kernel_gain!r}")

    @property
    def n_substeps(self) -> int:
        return int(round(1.0 / self.ds))


# ---------------------------------------------------------------------------
# Likelihood and its expectations
# ---------------------------------------------------------------------------

def negloglik(x, obs: ScalarObservation):
    """``(y_obs - h.x)^2 / (2R)``; vectorised over leading axes of ``x``."""
    r = obs.y_obs - np.asarray(x, dtype=float) @ obs.h
    return r**2 / (2.0 * obs.R)


def expected_negloglik_component(ybar, sigma, obs: ScalarObservation):
    """Expectation of the negative log-likelihood under ``N(ybar, sigma^2)``."""
    ybar = np.asarray(ybar, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return ((obs.y_obs - ybar) ** 2 + sigma**2) / (2.0 * obs.R)


def expected_negloglik_mixture(expectations, alphas) -> float:
    return float(np.dot(np.asarray(alphas, dtype=float), np.asarray(expectations, dtype=float)))


# ---------------------------------------------------------------------------
# Student-t (3 dof) surrogate marginal
# ---------------------------------------------------------------------------

def t3_pdf(y, ybar, sigma):
    u = np.asarray(y, dtype=float) - ybar
    return (2.0 * sigma**3 / np.pi) / (sigma**2 + u**2) ** 2


def t3_cdf_centered(y, ybar, sigma):
    """Antiderivative of :func:`t3_pdf` that vanishes at ``ybar``."""
    u = np.asarray(y, dtype=float) - ybar
    return np.arctan(u / sigma) / np.pi + (sigma / np.pi) * u / (sigma**2 + u**2)


def t3_log_weights(y, alphas, ybar, sigma):
    """Log of ``alpha_l phi_l(y_i) / sum_k alpha_k phi_k(y_i)``, shape ``(M, L)``."""
    with np.errstate(divide="ignore"):
        lw = np.log(t3_pdf(np.asarray(y)[:, None], ybar[None, :], sigma[None, :])) + np.log(alphas)[None, :]
    return lw - logsumexp(lw, axis=1)[:, None]


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

def _obs_space(X, m: GaussianMixture, obs: ScalarObservation):
    y = X @ obs.h
    Ph = m.covs @ obs.h  # (L, N)
    ybar = m.means @ obs.h
    return y, Ph, ybar


def u_a_em(X, m: GaussianMixture, beta, obs: ScalarObservation) -> np.ndarray:
    """Kalman-type field ``-1/2 sum_l beta_il P_l h R^-1 (h.x_i + h.xbar_l - 2 y_obs)``."""
    X = as_ensemble(X)
    y, Ph, ybar = _obs_space(X, m, obs)
    coef = beta * (y[:, None] + ybar[None, :] - 2.0 * obs.y_obs)
    return (-0.5 / obs.R) * (coef @ Ph)


def u_a_kde(X, kde: GaussianMixture, beta, obs: ScalarObservation) -> np.ndarray:
    """:func:`u_a_em` for a kernel mixture (kernels centred on members)."""
    return u_a_em(X, kde, beta, obs)


def draw_perturbations(rng: np.random.Generator, M: int, R: float) -> np.ndarray:
    return np.sqrt(R) * rng.standard_normal(M)


def u_a_perturbed(X, m: GaussianMixture, beta, obs: ScalarObservation, d) -> np.ndarray:
    """Perturbed-observation field ``-sum_l beta_il P_l h R^-1 (h.x_i - y_obs + d_i)``.

    For a kernel mixture ``P_l = B`` and this is ``-B h R^-1 (h.x_i - y_obs + d_i)``.
    """
    X = as_ensemble(X)
    y, Ph, _ = _obs_space(X, m, obs)
    r = (y - obs.y_obs + np.asarray(d, dtype=float)) / obs.R
    return -(beta @ Ph) * r[:, None]


def u_a_perturbed_kernel(X, B, obs: ScalarObservation, d) -> np.ndarray:
    X = as_ensemble(X)
    Bh = np.atleast_2d(B) @ obs.h
    r = (X @ obs.h - obs.y_obs + np.asarray(d, dtype=float)) / obs.R
    return -np.outer(r, Bh)


def _exchange(coef_log, coef_sign, Ph):
    with np.errstate(over="ignore", invalid="ignore"):
        coef = coef_sign * np.exp(np.minimum(coef_log, LOG_RATIO_CAP))
    coef = np.where(coef_sign == 0, 0.0, coef)
    return coef @ Ph


def u_b_erf(X, m: GaussianMixture, log_beta, obs: ScalarObservation, ybar, sigma,
            expectations, expectation_mix) -> np.ndarray:
    """Exchange field with Gaussian observation-space marginals.

    Per component the scalar factor is
    ``1/2 beta_il (E_l - E) / sigma_l^2 * erf(z / sqrt 2) / pi_l(y_i)`` with
    ``z = (y_i - ybar_l) / sigma_l``. It is assembled in log space because
    ``1 / pi_l(y_i)`` grows like ``exp(z^2 / 2)``; beyond ``exp(600)`` the
    magnitude is capped and left to :func:`clip_ub`.
    """
    X = as_ensemble(X)
    y = X @ obs.h
    Ph = m.covs @ obs.h
    dE = np.asarray(expectations, dtype=float) - expectation_mix
    z = (y[:, None] - ybar[None, :]) / sigma[None, :]
    e = erf(z / np.sqrt(2.0))
    with np.errstate(divide="ignore"):
        coef_log = (np.log(0.5) + log_beta + np.log(np.abs(dE))[None, :]
                    - np.log(sigma)[None, :] + HALF_LOG_2PI
                    + np.log(np.abs(e)) + 0.5 * z**2)
    coef_sign = np.sign(dE)[None, :] * np.sign(e)
    return _exchange(coef_log, coef_sign, Ph)


def u_b_t3(X, m: GaussianMixture, log_beta, obs: ScalarObservation, ybar, sigma,
           expectations, expectation_mix) -> np.ndarray:
    """Exchange field with Student-t surrogate marginals.

    Scalar factor ``beta_il (E_l - E) / sigma_l^2 * Phi_l(y_i) / phi_l(y_i)``;
    unlike the erf form there is no factor 1/2.
    """
    X = as_ensemble(X)
    y = X @ obs.h
    Ph = m.covs @ obs.h
    dE = np.asarray(expectations, dtype=float) - expectation_mix
    yy = y[:, None]
    ratio = t3_cdf_centered(yy, ybar[None, :], sigma[None, :]) / t3_pdf(yy, ybar[None, :], sigma[None, :])
    coef = np.exp(log_beta) * (dE / sigma**2)[None, :] * ratio
    return coef @ Ph


def clip_ub(u, u_cut: float) -> np.ndarray:
    """Rescale each row whose max-norm exceeds ``u_cut`` down to ``u_cut``."""
    if not u_cut > 0:
        raise ValueError("u_cut must be positive")
    u = np.asarray(u, dtype=float)
    if np.isinf(u_cut):
        return u
    rows = np.atleast_2d(u)
    norm = np.max(np.abs(rows), axis=1)
    scale = np.where(norm > u_cut, u_cut / np.where(norm > 0, norm, 1.0), 1.0)
    out = rows * scale[:, None]
    return out.reshape(u.shape)


# ---------------------------------------------------------------------------
# Mixture parameter flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureFlowState:
    mixture: GaussianMixture
    lam: float = 0.0
    n_clamped: int = 0


def mixture_param_flow(state: MixtureFlowState, obs: ScalarObservation, ds: float) -> MixtureFlowState:
    """Forward-Euler step of the exact Bayesian flow of the mixture parameters.

    ``lam`` is the Lagrange multiplier that keeps ``sum_l dalpha_l/ds = 0``.
    Weights pushed negative are clamped to zero; the count of such events is
    carried in ``n_clamped``.
    """
    if not ds > 0:
        raise ValueError("ds must be positive")
    m = state.mixture
    h = obs.h
    ybar = m.means @ h
    Ph = m.covs @ h
    resid = ybar - obs.y_obs
    d = resid**2 / obs.R
    lam = -float(m.weights @ d)
    dalpha = -0.5 * m.weights * (d + lam)
    means = m.means - ds * Ph * (resid / obs.R)[:, None]
    covs = m.covs - ds * np.einsum("lj,lk->ljk", Ph, Ph) / obs.R
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    alpha = m.weights + ds * dalpha
    n_clamped = state.n_clamped
    if np.any(alpha < 0):
        n_clamped += int(np.count_nonzero(alpha < 0))
        alpha = np.maximum(alpha, 0.0)
    alpha = alpha / alpha.sum()
    return MixtureFlowState(GaussianMixture(alpha, means, covs), lam, n_clamped)


# ---------------------------------------------------------------------------
# Mixture fitting policies
# ---------------------------------------------------------------------------

class GaussianFitter:
    """Single Gaussian with the ensemble mean and 1/(M-1) covariance."""

    n_components = 1

    def fit(self, X, cfg: AnalysisConfig, warm: Optional[GaussianMixture] = None) -> GaussianMixture:
        X = as_ensemble(X)
        return GaussianMixture(np.ones(1), X.mean(axis=0)[None], ensemble_covariance(X)[None])


class EMFitter:
    """``L``-component mixture fitted by EM, warm-started within an analysis.

    ``L = 1`` is the plain Gaussian fit of :class:`GaussianFitter`, so the
    filter reduces exactly to the continuous square-root filter.
    """

    def __init__(self, n_components: int):
        if n_components < 1:
            raise ValueError("n_components must be >= 1")
        self.n_components = n_components
        self.n_fits = 0
        self.n_unconverged = 0

    def fit(self, X, cfg: AnalysisConfig, warm: Optional[GaussianMixture] = None) -> GaussianMixture:
        if self.n_components == 1:
            return GaussianFitter().fit(X, cfg)
        p = cfg.em
        if warm is not None and warm.n_components != self.n_components:
            warm = None
        res = em_fit(X, self.n_components, init=warm, tol=p.tol, max_iter=p.max_iter,
                     delta=p.delta, varfloor=p.varfloor)
        self.n_fits += 1
        self.n_unconverged += not res.converged
        return res.mixture


class KDEFitter:
    """Kernel density estimator with bandwidth ``B = c P`` at ``s = 0``.

    A fixed ``bandwidth`` matrix may be given instead, e.g. for ``M = 1``.

    Kernels sit on the current members. Within an analysis the shared
    bandwidth follows the kernel posterior covariance,
    ``dB/ds = -B h R^-1 h^T B``, advanced exactly over each substep by
    :meth:`advance`, so every kernel ends at its Kalman update at ``s = 1``.
    """

    def __init__(self, c: float = 1.0, bandwidth=None):
        if not c > 0:
            raise ValueError("bandwidth factor c must be positive")
        self.c = c
        self.bandwidth = None if bandwidth is None else np.atleast_2d(np.asarray(bandwidth, dtype=float))

    @property
    def n_components(self):
        return None

    def fit(self, X, cfg: AnalysisConfig, warm: Optional[GaussianMixture] = None) -> GaussianMixture:
        X = as_ensemble(X)
        if warm is not None and warm.n_components == X.shape[0]:
            return kde_mixture(X, warm.covs[0])
        if self.bandwidth is not None:
            return kde_mixture(X, self.bandwidth)
        if X.shape[0] == 1:
            raise ValueError("a kernel bandwidth from the ensemble covariance needs M >= 2")
        return kde_mixture(X, self.c * ensemble_covariance(X))

    @staticmethod
    def advance(m: GaussianMixture, obs_list: Sequence[ScalarObservation], ds: float) -> GaussianMixture:
        B = m.covs[0]
        for obs in obs_list:
            Bh = B @ obs.h
            B = B - np.outer(Bh, Bh) / (obs.R / ds + obs.h @ Bh)
        return kde_mixture(m.means, 0.5 * (B + B.T))


# ---------------------------------------------------------------------------
# Total field and the s-integration
# ---------------------------------------------------------------------------

def _log_beta(X, m: GaussianMixture, cfg: AnalysisConfig, obs_list):
    if m.n_components == 1:
        return np.zeros((X.shape[0], 1))
    h = obs_list[0].h if cfg.beta_from_marginal else None
    if h is not None and len(obs_list) > 1:
        raise ValueError("marginal responsibilities need a single observation")
    lb, _ = log_responsibilities(m, X, h, cfg.em.varfloor)
    return lb


def total_field(X, m: GaussianMixture, obs_list: Sequence[ScalarObservation], cfg: AnalysisConfig,
                perturbations: Optional[Sequence[np.ndarray]] = None,
                gain_mixture: Optional[GaussianMixture] = None) -> np.ndarray:
    """``u_A + clip(u_B)`` summed over the (uncorrelated) observations.

    ``gain_mixture`` (same weights and means as ``m``) supplies the
    covariances used in ``u_A``; it defaults to ``m``.
    """
    X = as_ensemble(X)
    ma = m if gain_mixture is None else gain_mixture
    log_beta = _log_beta(X, m, cfg, obs_list)
    beta = np.exp(log_beta)
    g = np.zeros_like(X)
    for j, obs in enumerate(obs_list):
        if cfg.uA_variant == "perturbed":
            g += u_a_perturbed(X, ma, beta, obs, perturbations[j])
        else:
            g += u_a_em(X, ma, beta, obs)
        if m.n_components == 1:
            continue
        ybar, sigma = marginal(m, obs.h, cfg.em.varfloor)
        E_l = expected_negloglik_component(ybar, sigma, obs)
        E = expected_negloglik_mixture(E_l, m.weights)
        if cfg.uB_variant == "erf":
            ub = u_b_erf(X, m, log_beta, obs, ybar, sigma, E_l, E)
        else:
            lb = log_beta if cfg.t3_weights == "gaussian" else t3_log_weights(X @ obs.h, m.weights, ybar, sigma)
            ub = u_b_t3(X, m, lb, obs, ybar, sigma, E_l, E)
        g += clip_ub(ub, cfg.u_cut)
    return g


def analysis_step(X, obs_list: Sequence[ScalarObservation], fitter, cfg: AnalysisConfig,
                  rng: Optional[np.random.Generator] = None, trace: Optional[list] = None) -> np.ndarray:
    """Transport the forecast ensemble to the analysis ensemble.

    Runs ``1/ds`` forward-Euler steps in ``s``. Before each step the
    mixture is refitted (warm start) or, with ``refit_each_step`` off,
    advanced by the parameter flow from the ``s = 0`` fit. For the
    perturbed ``u_A`` variant, one perturbation per member and observation
    is drawn from ``rng`` and held for the whole step. ``trace``, when
    given, receives ``(s, ensemble)`` pairs.
    """
    X = np.array(as_ensemble(X), copy=True)
    obs_list = list(obs_list)
    if not obs_list:
        return X
    M = X.shape[0]
    perturbations = None
    if cfg.uA_variant == "perturbed":
        if rng is None:
            raise ValueError("perturbed u_A needs a random generator")
        perturbations = [draw_perturbations(rng, M, o.R) for o in obs_list]
    ds = cfg.ds
    m = None
    flow = None
    if trace is not None:
        trace.append((0.0, X.copy()))
    for k in range(cfg.n_substeps):
        if cfg.refit_each_step or m is None:
            m = fitter.fit(X, cfg, warm=m)
            flow = MixtureFlowState(m)
        advance = cfg.refit_each_step and hasattr(fitter, "advance")
        m_end = fitter.advance(m, obs_list, ds) if advance else None
        gain = m_end if advance and cfg.kernel_gain == "end" else None
        g = total_field(X, m, obs_list, cfg, perturbations, gain)
        with np.errstate(over="ignore", invalid="ignore"):
            X = X + ds * g
        bad = ~np.all(np.isfinite(X), axis=1)
        if np.any(bad):
            raise NumericalAbort(f"non-finite member {int(np.argmax(bad))} at analysis substep {k}",
                                 member=int(np.argmax(bad)), substep=k)
        if advance:
            m = m_end
        if not cfg.refit_each_step:
            for obs in obs_list:
                flow = mixture_param_flow(flow, obs, ds)
            m = flow.mixture
        if trace is not None:
            trace.append(((k + 1) * ds, X.copy()))
    return X


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        N = trace[0][1].shape[1]
        w.writerow(["s", "member_id"] + [f"x{j + 1}" for j in range(N)])
        for s, E in trace:
            for i, x in enumerate(E):
                w.writerow([repr(float(s)), i] + [repr(float(v)) for v in x])
