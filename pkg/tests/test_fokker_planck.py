import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egmf.dynamics import double_well_drift, double_well_potential
from egmf.fokker_planck import (
    FokkerPlanckPropagator,
    GridDensity,
    bayes_update,
    build_transition,
    density_from_function,
    density_mean,
    fp_propagate,
    l1_distance,
    periodic_grid,
    stability_bound,
    stable_substep,
    stationary_density,
)
from egmf.harness import SINGLE_BAYES_PRIOR, SINGLE_BAYES_Y, analytic_posterior_1d
from egmf.transport import ScalarObservation

X = periodic_grid()
DX = 0.125


def gauss(mu, var):
    return lambda x: np.exp(-((x - mu) ** 2) / (2 * var))


def test_grid_layout():
    assert len(X) == 160 and X[0] == -10.0 and X[-1] == 10.0 - DX
    with pytest.raises(ValueError):
        periodic_grid(-10, 10, 0.3)


def test_pure_diffusion_matrix_symmetric():
    A = build_transition(lambda x: np.zeros_like(x), X, DX, 0.005)
    np.testing.assert_allclose(A, A.T, atol=1e-15)
    np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-14)


@pytest.mark.parametrize("scheme", ["auto", "upwind"])
@pytest.mark.parametrize("frac", [0.1, 0.5, 1.0])
def test_double_well_matrix_stochastic(scheme, frac):
    dt = frac * stability_bound(double_well_drift(X), DX, 0.5)
    A = build_transition(double_well_drift, X, DX, dt, scheme=scheme)
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-14)


def test_stability_bound_enforced():
    bound = stability_bound(double_well_drift(X), DX, 0.5)
    with pytest.raises(ValueError):
        build_transition(double_well_drift, X, DX, 1.01 * bound)
    assert stable_substep(double_well_drift(X), DX, 0.1) == pytest.approx(0.1 / 16)


def test_stationary_density_nearly_invariant():
    p = stationary_density(X)
    np.testing.assert_allclose(p.values, density_from_function(X, lambda x: np.exp(-2 * double_well_potential(x))).values,
                               rtol=1e-12)
    prop = FokkerPlanckPropagator()
    q = prop.propagate(p, prop.dt_sub)
    assert l1_distance(p, q) < 1e-4


def test_zero_time_is_identity():
    p = density_from_function(X, gauss(1.0, 2.0))
    q = fp_propagate(p, 0.0, FokkerPlanckPropagator())
    np.testing.assert_array_equal(p.values, q.values)


def test_mass_and_positivity_conserved():
    prop = FokkerPlanckPropagator()
    p = density_from_function(X, gauss(-3.0, 0.2))
    q = prop.propagate(p, 1e4 * prop.dt_sub)
    assert abs(q.mass - 1.0) < 1e-10
    assert np.all(q.values >= 0)


def test_bump_relaxes_monotonically():
    prop = FokkerPlanckPropagator()
    p = GridDensity(X, np.where(np.arange(len(X)) == 40, 1.0 / DX, 0.0))
    target = stationary_density(X)
    dists = [l1_distance(prop.propagate(p, T), target) for T in (0.0, 1.0, 10.0, 100.0, 1000.0)]
    assert all(a > b for a, b in zip(dists, dists[1:]))


def test_propagate_rejects_off_grid_time():
    prop = FokkerPlanckPropagator()
    with pytest.raises(ValueError):
        prop.propagate(stationary_density(X), prop.dt_sub * 1.5)


def test_bayes_flat_likelihood():
    p = density_from_function(X, gauss(2.0, 3.0))
    q = bayes_update(p, ScalarObservation([1.0], 1e12, 0.5))
    np.testing.assert_allclose(q.values, p.values, atol=1e-8)


def test_bayes_uniform_prior_gives_gaussian():
    p = GridDensity(X, np.full(len(X), 1 / 20))
    q = bayes_update(p, ScalarObservation([1.0], 0.5, 1.0))
    assert X[np.argmax(q.values)] == 1.0
    assert density_mean(q) == pytest.approx(1.0, abs=1e-10)
    ref = density_from_function(X, gauss(1.0, 0.5))
    np.testing.assert_allclose(q.values, ref.values, rtol=1e-12)


def test_bayes_bimodal_prior_matches_conjugate_mean():
    prior = density_from_function(X, lambda x: np.exp(SINGLE_BAYES_PRIOR.logpdf(x[:, None])))
    o = ScalarObservation([1.0], 16.0, SINGLE_BAYES_Y)
    post = analytic_posterior_1d(SINGLE_BAYES_PRIOR, o)
    exact = float(post.weights @ post.means[:, 0])
    assert density_mean(bayes_update(prior, o)) == pytest.approx(exact, abs=1e-3)


def test_bayes_underflow_raises():
    p = GridDensity(X, np.where(X < -9, 1.0, 0.0))
    with pytest.raises(FloatingPointError):
        bayes_update(p, ScalarObservation([1.0], 1e-4, 9.0))


@given(st.integers(-30, 30), st.floats(-4, 4), st.floats(0.1, 30))
def test_bayes_commutes_with_grid_translation(k, y, R):
    # prior supported on [-6, 6) so a shift by |k| <= 30 cells never wraps
    vals = np.where(np.abs(X) < 6, 1.0 + np.cos(X) ** 2, 0.0)
    p = density_from_function(X, lambda _: vals)
    moved = GridDensity(X, np.roll(p.values, k))
    a = bayes_update(moved, ScalarObservation([1.0], R, y + k * DX))
    b = bayes_update(p, ScalarObservation([1.0], R, y))
    np.testing.assert_allclose(a.values, np.roll(b.values, k), rtol=1e-10, atol=1e-300)


def test_density_mean_examples():
    assert density_mean(density_from_function(X, gauss(0.0, 1.0))) == pytest.approx(0.0, abs=1e-14)
    k = 100
    assert density_mean(GridDensity(X, np.where(np.arange(len(X)) == k, 1 / DX, 0.0))) == pytest.approx(X[k])
    assert density_mean(density_from_function(X, gauss(2.0, 0.25))) == pytest.approx(2.0, abs=1e-3)


def test_density_validation(tmp_path):
    with pytest.raises(ValueError):
        GridDensity(X, -np.ones(len(X)))
    with pytest.raises(ValueError):
        GridDensity(X, np.ones(3))
    p = stationary_density(X)
    p.to_csv(tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "x,p" and len(rows) == 161
    assert float(rows[1].split(",")[0]) == -10.0
