"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, collected in the "acceptance
criteria" section of the terminal summary. Full-length horizons are
marked ``full`` and need ``pytest --full``.
"""
import functools
import math

import numpy as np
import pytest
from scipy.special import erf

from egmf import harness as H
from egmf.filters import EGMF, esrf_continuous_step, fixed_l_policy
from egmf.fokker_planck import (
    FokkerPlanckPropagator,
    bayes_update,
    density_from_function,
    density_mean,
    l1_distance,
    stationary_density,
)
from egmf.mixture import GaussianMixture, marginal
from egmf.transport import (
    AnalysisConfig,
    GaussianFitter,
    MixtureFlowState,
    ScalarObservation,
    analysis_step,
    clip_ub,
    expected_negloglik_component,
    expected_negloglik_mixture,
    mixture_param_flow,
    t3_cdf_centered,
    t3_pdf,
    u_b_erf,
)

median = np.median


def fmt(d):
    return ", ".join(f"{k}={v:.4f}" for k, v in d.items())


# --- 1 ---------------------------------------------------------------------

def test_c1_reduction_identity(acceptance):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(1, 4))
        M = int(rng.integers(2, 51))
        X = rng.normal(size=(M, N)) * rng.uniform(0.3, 3) + rng.normal(size=N)
        o = ScalarObservation(rng.normal(size=N), rng.uniform(0.2, 20), rng.normal() * 2)
        ds = float(rng.choice([1.0, 0.25, 0.1, 0.05]))
        a = EGMF(AnalysisConfig(ds=ds), l_policy=fixed_l_policy(1)).analyze(X, [o])
        b = esrf_continuous_step(X, o, ds)
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = acceptance("1 reduction identity", worst <= 1e-12, f"max |EGMF(L=1) - ESRF| = {worst:.2e} over 100 instances")
    assert ok


# --- 2 ---------------------------------------------------------------------

KALMAN_CASES = [  # (prior mean, prior sd, R, y_obs)
    (1.0, 1.0, 1.0, 2.0),
    (-2.0, 0.5, 2.0, 1.0),
    (3.0, 2.0, 4.0, -1.0),
    (0.5, 1.5, 9.0, 4.0),
]


def test_c2_kalman_and_riccati_oracles(acceptance):
    rng = np.random.default_rng(2)
    worst_mean = worst_var = worst_ric = 0.0
    for mu, sd, R, y in KALMAN_CASES:
        X = mu + sd * rng.standard_normal((50, 1))
        o = ScalarObservation([1.0], R, y)
        out = analysis_step(X, [o], GaussianFitter(), AnalysisConfig(ds=1e-3))
        P0, m0 = X.var(ddof=1), X.mean()
        Pa = 1 / (1 / P0 + 1 / R)
        ma = m0 + P0 / (P0 + R) * (y - m0)
        worst_mean = max(worst_mean, abs(out.mean() - ma) / abs(ma))
        worst_var = max(worst_var, abs(out.var(ddof=1) - Pa) / Pa)

        state = MixtureFlowState(GaussianMixture([1.0], [[mu]], [[[sd**2]]]))
        for _ in range(1000):
            state = mixture_param_flow(state, o, 1e-3)
        exact = 1 / (1 / sd**2 + 1 / R)
        worst_ric = max(worst_ric, abs(state.mixture.covs[0, 0, 0] - exact) / exact)
    ok = worst_mean < 1e-2 and worst_var < 1e-2 and worst_ric < 1e-3
    acceptance("2 Kalman/Riccati oracle", ok,
               f"mean rel {worst_mean:.1e}, var rel {worst_var:.1e} (tol 1e-2); Riccati rel {worst_ric:.1e} (tol 1e-3)")
    assert ok


# --- 3 ---------------------------------------------------------------------

def _exchange_profile(z, sigma, dE):
    # scalar f with u_B = sigma^2 f for one component carrying all responsibility
    m = GaussianMixture([0.5, 0.5], [[0.0], [50.0]], [[[sigma**2]], [[1.0]]])
    X = np.asarray(z, dtype=float)[:, None]
    lb = np.zeros((len(X), 2))
    lb[:, 1] = -np.inf
    u = u_b_erf(X, m, lb, ScalarObservation([1.0], 1.0, 0.0), np.array([0.0, 50.0]),
                np.array([sigma, 1.0]), np.array([dE, 0.0]), 0.0)
    return u[:, 0] / sigma**2


def test_c3_conservation_and_identities(acceptance):
    rng = np.random.default_rng(3)
    sum_err = lam_err = 0.0
    for _ in range(50):
        L = int(rng.integers(1, 5))
        A = rng.normal(size=(L, 2, 2))
        state = MixtureFlowState(GaussianMixture(rng.dirichlet(np.ones(L)), rng.normal(size=(L, 2)) * 3,
                                                 A @ np.swapaxes(A, 1, 2) + np.eye(2)))
        o = ScalarObservation([1.0, rng.normal()], rng.uniform(0.5, 10), rng.normal())
        for _ in range(50):
            m = state.mixture
            d = (m.means @ o.h - o.y_obs) ** 2 / o.R
            lam = -m.weights @ d
            lam_err = max(lam_err, abs(np.sum(-0.5 * m.weights * (d + lam))))
            state = mixture_param_flow(state, o, 0.02)
            sum_err = max(sum_err, abs(state.mixture.weights.sum() - 1))

    fd_err = 0.0
    for _ in range(200):
        ybar, sigma = rng.normal(), rng.uniform(0.2, 4)
        y = ybar + sigma * rng.normal() * 3
        h = 1e-4 * sigma
        fd = (t3_cdf_centered(y + h, ybar, sigma) - t3_cdf_centered(y - h, ybar, sigma)) / (2 * h)
        fd_err = max(fd_err, abs(fd / t3_pdf(y, ybar, sigma) - 1))

    pde_err = 0.0
    for _ in range(50):
        sigma, dE = rng.uniform(0.2, 3), rng.normal() * 5
        z = rng.uniform(-3, 3, 20) * sigma
        h = 3e-4 * sigma  # stencil truncation error scales as h^4
        f = lambda zz: _exchange_profile(zz, sigma, dE)
        fp = (-f(z + 2 * h) + 8 * f(z + h) - 8 * f(z - h) + f(z - 2 * h)) / (12 * h)
        pde_err = max(pde_err, float(np.max(np.abs(-z * f(z) + sigma**2 * fp - dE))))

    clip_ok = True
    for _ in range(500):
        u = rng.standard_cauchy(size=(5, 3)) * 10.0 ** rng.integers(-5, 20)
        cut = 10.0 ** rng.uniform(-3, 3)
        clip_ok &= bool(np.max(np.abs(clip_ub(u, cut))) <= cut * (1 + 1e-15))

    ok = sum_err < 1e-12 and lam_err < 1e-12 and fd_err < 1e-6 and pde_err < 1e-8 and clip_ok
    acceptance("3 conservation/identity suite", ok,
               f"|sum a - 1| {sum_err:.1e}, |sum da/ds| {lam_err:.1e}, Phi'/phi - 1 {fd_err:.1e}, "
               f"exchange PDE residual {pde_err:.1e}, clip bound {'holds' if clip_ok else 'violated'}")
    assert ok


# --- 4 ---------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def single_bayes(M, seed):
    cfg = H.default_config("single_bayes")
    cfg.M = M
    return H.run_single_bayes(cfg, seed).l1


def test_c4_single_bayes(acceptance):
    methods = ("egmf_em", "rhf", "enkf_po")
    big = {k: median([single_bayes(2000, s)[k] for s in range(10)]) for k in methods}
    small = {k: median([single_bayes(50, s)[k] for s in range(10)]) for k in methods}
    ok_egmf = big["egmf_em"] < 0.10
    ok_rhf = big["rhf"] < 0.10
    ok_enkf = big["enkf_po"] > 0.3
    ok_m = all(small[k] >= big[k] for k in methods)
    ok = ok_egmf and ok_rhf and ok_enkf and ok_m
    acceptance("4 single Bayes step", ok, f"median L1 M=2000: {fmt(big)}; M=50: {fmt(small)}")
    assert ok


# --- 5 and 6 ---------------------------------------------------------------

DESK_SEEDS = range(5)


@functools.lru_cache(maxsize=None)
def double_well(R, M, seed, full):
    cfg = H.default_config("double_well", full)
    cfg.R, cfg.M = R, M
    return H.run_double_well(cfg, seed)


def _ordering(rms):
    return rms["rhf"] < rms["egmf_em"] < rms["enkf_po"]


def test_c5_table1_desk(acceptance):
    lines, ok = [], True
    for M in (20, 50, 100):
        runs = [double_well(36.0, M, s, False).rms for s in DESK_SEEDS]
        med = {k: median([r[k] for r in runs]) for k in ("rhf", "egmf_em", "enkf_po", "esrf")}
        ok &= _ordering(med)
        lines.append(f"M={M}: {fmt(med)}")
    acceptance("5 Table 1 (desk, 1000 cycles, 5 seeds, medians)", ok, "; ".join(lines))
    assert ok


@pytest.mark.full
def test_c5_table1_full(acceptance):
    lines, ok = [], True
    for M in (20, 50, 100):
        rms = double_well(36.0, M, 0, True).rms
        ok &= _ordering(rms)
        lines.append(f"M={M}: {fmt(rms)}")
    egmf50 = double_well(36.0, 50, 0, True).rms["egmf_em"]
    ok &= 0.41 <= egmf50 <= 0.62
    acceptance("5 Table 1 (full horizon)", ok, f"EGMF M=50 {egmf50:.4f} in [0.41, 0.62]; " + "; ".join(lines))
    assert ok


def test_c6_bimodality_desk(acceptance):
    f36 = median([double_well(36.0, 50, s, False).bimodal_fraction["egmf_em"] for s in DESK_SEEDS])
    f4 = median([double_well(4.0, 50, s, False).bimodal_fraction["egmf_em"] for s in DESK_SEEDS])
    ok = 0.90 <= f36 <= 1.0 and 0.30 <= f4 <= 0.65
    acceptance("6 L=2 usage (desk, 1000 cycles, 5 seeds, medians)", ok,
               f"R=36: {f36:.3f} (want [0.90, 1]); R=4: {f4:.3f} (want [0.30, 0.65])")
    assert ok


@pytest.mark.full
def test_c6_bimodality(acceptance):
    f36 = double_well(36.0, 50, 0, True).bimodal_fraction["egmf_em"]
    f4 = double_well(4.0, 50, 0, True).bimodal_fraction["egmf_em"]
    ok = 0.90 <= f36 <= 1.0 and 0.30 <= f4 <= 0.65
    acceptance("6 L=2 usage", ok, f"R=36: {f36:.3f} (want [0.90, 1]); R=4: {f4:.3f} (want [0.30, 0.65])")
    assert ok


# --- 7 ---------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def langevin(seed, full):
    return H.run_langevin(H.default_config("langevin", full), seed)


def test_c7_langevin_desk(acceptance):
    runs = [langevin(s, False).rms for s in range(3)]
    med = {k: median([r[k] for r in runs]) for k in ("egmf_em", "kalman_bucy", "rhf")}
    gain = 1 - med["egmf_em"] / med["kalman_bucy"]
    ok = med["egmf_em"] < med["kalman_bucy"] and gain >= 0.10 and med["rhf"] > med["egmf_em"]
    frac = median([langevin(s, False).bimodal_fraction["egmf_em"] for s in range(3)])
    acceptance("7 Langevin (200k steps, 3 seeds, medians)", ok,
               f"{fmt(med)}; improvement over Kalman-Bucy {gain:.1%} (want >= 10%); L=2 fraction {frac:.3f}")
    assert ok


@pytest.mark.full
def test_c7_langevin_full(acceptance):
    rms = langevin(0, True).rms
    published = {"egmf_em": 1.9148, "kalman_bucy": 2.3331, "rhf": 3.9375}
    ok = all(abs(rms[k] / v - 1) <= 0.25 for k, v in published.items())
    acceptance("7 Langevin (full horizon)", ok, f"{fmt(rms)} vs published {fmt(published)} (+-25%)")
    assert ok


# --- 8 ---------------------------------------------------------------------

LORENZ_SEEDS = range(3)
# a pilot at seed 0 put every tuned optimum inside inflation [1.1, 1.3]
ACCEPT_C_GRID = (0.4, 0.5, 0.6, 0.7, 0.8, 1.0)
ACCEPT_INFLATION_GRID = (1.1, 1.15, 1.2, 1.25, 1.3)


def test_c8_lorenz(acceptance):
    cfg = H.default_config("lorenz63")
    rows = []
    for seed in LORENZ_SEEDS:
        rows += H.lorenz_sweep(cfg, seed, ACCEPT_C_GRID, ACCEPT_INFLATION_GRID, baselines=("esrf", "enkf_po"))
    # tuned inflation per (seed, c) and per (seed, filter), then medians over seeds
    by_c = H.best_by([r for r in rows if r["filter"] == "egmf_kde"], lambda r: (r["seed"], r["c"]))
    curve = {c: median([by_c[(s, c)]["rms"] for s in LORENZ_SEEDS]) for c in ACCEPT_C_GRID}
    c_best = min(curve, key=curve.get)
    tuned = H.best_by(rows, lambda r: (r["seed"], r["filter"]))
    med = {f: median([tuned[(s, f)]["rms"] for s in LORENZ_SEEDS]) for f in ("egmf_kde", "enkf_po", "esrf")}
    ok_c = 0.5 <= c_best <= 0.8
    ok_v = abs(curve[c_best] - 4.11) <= 0.5
    ok_order = med["egmf_kde"] <= med["enkf_po"] <= med["esrf"]
    ok = ok_c and ok_v and ok_order
    acceptance("8 Lorenz-63 (10000 cycles, 3 seeds, tuned inflation)", ok,
               f"RMS vs c: {', '.join(f'{c:g}:{v:.3f}' for c, v in curve.items())}; best c={c_best:g} "
               f"(want [0.5, 0.8]) RMS {curve[c_best]:.3f} (want 4.11 +- 0.5); medians {fmt(med)}")
    assert ok


# --- 9 ---------------------------------------------------------------------

def test_c9_fokker_planck(acceptance):
    prop = FokkerPlanckPropagator()
    x = prop.x
    start = density_from_function(x, lambda z: np.exp(-((z + 3.14) ** 2) / 0.02))
    l1 = l1_distance(prop.propagate(start, 1e4), stationary_density(x))
    after = prop.propagate(start, 1e5 * prop.dt_sub)
    mass_err = abs(after.mass - 1)
    prior = density_from_function(x, lambda z: np.exp(H.SINGLE_BAYES_PRIOR.logpdf(z[:, None])))
    o = ScalarObservation([1.0], 16.0, H.SINGLE_BAYES_Y)
    post = H.analytic_posterior_1d(H.SINGLE_BAYES_PRIOR, o)
    mean_err = abs(density_mean(bayes_update(prior, o)) - float(post.weights @ post.means[:, 0]))
    ok = l1 < 0.02 and mass_err < 1e-10 and mean_err < 1e-3
    acceptance("9 Fokker-Planck oracle", ok,
               f"stationary L1 at T=1e4 {l1:.2e}, mass error after 1e5 steps {mass_err:.1e}, "
               f"grid posterior mean error {mean_err:.1e}")
    assert ok
