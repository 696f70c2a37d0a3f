import json
from functools import reduce
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pnrtomo.calibration import (
    AttenuationFit,
    PowerPairSeries,
    apply_fresnel,
    averaged_rescaling,
    chain_attenuations,
    fit_attenuation,
    gauss_hermite_scales,
    marginalization_discrepancy,
    marginalize_povm,
    rescaling_matrix,
    tls_chi2,
)
from pnrtomo.density import OutcomeGrid
from pnrtomo.povm import mixture_to_table, poisson_matrix
from pnrtomo.tomo import EmConfig, ProbeEnsemble

from conftest import standard_grid, standard_model

DATA = Path(__file__).parent / "data"


def tls_series(rng, r, n=50, rel=0.05):
    x_true = rng.uniform(1.0, 10.0, n)
    y_true = r * x_true
    xe, ye = rel * x_true, rel * y_true
    return PowerPairSeries(x_true + rng.normal(0, xe), xe, y_true + rng.normal(0, ye), ye)


# -- attenuation fitting --


def test_noiseless_line():
    x = np.array([1.0, 2.0, 4.0])
    xe = np.array([0.1, 0.1, 0.1])
    ye = np.array([0.2, 0.2, 0.2])
    r, sigma = fit_attenuation(PowerPairSeries(x, xe, 2 * x, ye))
    assert r == pytest.approx(2.0, rel=1e-12)
    # at chi2 = 0 the curvature gives 1/sigma^2 = sum x^2 / (ye^2 + r^2 xe^2)
    assert sigma == pytest.approx(1 / np.sqrt(np.sum(x**2 / (ye**2 + 4 * xe**2))), rel=1e-9)


def test_swap_inverts_ratio(rng):
    s = tls_series(rng, 3.0)
    r, _ = fit_attenuation(s)
    r2, _ = fit_attenuation(s.swapped())
    assert r * r2 == pytest.approx(1.0, abs=1e-9)


def test_minimizes_profile_chi2(rng):
    s = tls_series(rng, 0.5)
    r, _ = fit_attenuation(s)
    for d in (1e-6, -1e-6):
        assert tls_chi2(r, s) <= tls_chi2(r * (1 + d), s)


def test_degenerate_series():
    with pytest.raises(ValueError):
        fit_attenuation(PowerPairSeries([1.0], [0.1], [2.0], [0.1]))
    with pytest.raises(ValueError):
        fit_attenuation(PowerPairSeries([1.0, 1.0], [0.1, 0.1], [2.0, 2.1], [0.1, 0.1]))
    with pytest.raises(ValueError):
        PowerPairSeries([1.0, -1.0], [0.1, 0.1], [2.0, 2.1], [0.1, 0.1])
    with pytest.raises(ValueError):
        PowerPairSeries([1.0, 2.0], [0.0, 0.1], [2.0, 2.1], [0.1, 0.1])


def test_csv_reader(tmp_path):
    p = tmp_path / "pairs.csv"
    p.write_text("x (W),x_err (W),y (W),y_err (W)\n1.0,0.01,0.5,0.02\n2.0,0.02,1.0,0.02\n")
    s = PowerPairSeries.from_csv(p)
    np.testing.assert_array_equal(s.y, [0.5, 1.0])


def test_attenuation_fit_invariants():
    with pytest.raises(ValueError):
        AttenuationFit(0.0, 0.1)
    f = AttenuationFit(2e-3, 1e-4)
    assert f.relative_sigma == pytest.approx(0.05)
    assert f.to_dict()["fresnel_correction"] == [0.033, 0.01]


# -- chaining --


def test_chain_single_and_rule():
    assert chain_attenuations([(2.0, 0.1)]) == (2.0, pytest.approx(0.1))
    r, s = chain_attenuations([(2.0, 0.04), AttenuationFit(3.0, 0.09)])
    assert r == pytest.approx(6.0)
    assert s / r == pytest.approx(0.05)


def test_chain_fixture_regression():
    fx = json.loads((DATA / "attenuation_chain.json").read_text())
    r, s = chain_attenuations([(st_["ratio"], st_["sigma"]) for st_ in fx["stages"]])
    exp = fx["expected"]
    unit, dec = exp["quoted_unit"], exp["quoted_decimals"]
    assert round(r / unit, dec) == pytest.approx(exp["ratio"] / unit)
    assert round(s / unit, dec) == pytest.approx(exp["sigma"] / unit)


@given(st.lists(st.tuples(st.floats(1e-6, 1e3), st.floats(1e-3, 0.5)), min_size=3, max_size=3))
def test_chain_associative(stages):
    fits = [(r, r * rel) for r, rel in stages]
    left = chain_attenuations([chain_attenuations(fits[:2]), fits[2]])
    right = chain_attenuations([fits[0], chain_attenuations(fits[1:])])
    np.testing.assert_allclose(left, right, rtol=1e-12)


def test_chain_empty():
    with pytest.raises(ValueError):
        chain_attenuations([])


def test_fresnel_correction():
    r, s = apply_fresnel(1.0, 0.02)
    assert r == pytest.approx(1 / 0.967)
    assert s / r == pytest.approx(0.02 + 0.01 / 0.967)


# -- rescaling and marginalization --


@pytest.mark.parametrize("c", [0.97, 1.0, 1.03, 1.5])
def test_rescaling_matrix_maps_poisson(c):
    n_max = 60
    m = rescaling_matrix(n_max, c)
    a = np.array([0.5, 2.0, 5.0])
    # F(a, n) = sum_m F(c a, m) M[m, n]
    lhs = poisson_matrix(a, n_max)
    rhs = poisson_matrix(c * a, n_max) @ m
    np.testing.assert_allclose(rhs[:, :15], lhs[:, :15], atol=1e-12)


def test_rescaling_identity_and_vacuum():
    np.testing.assert_array_equal(rescaling_matrix(6, 1.0), np.eye(7))
    m = averaged_rescaling(6, *gauss_hermite_scales(1.0, 0.05, 7))
    np.testing.assert_allclose(m[0], np.eye(7)[0], atol=1e-15)


def test_zero_sigma_is_identity(std_model, std_grid, std_table):
    out = marginalize_povm(std_model, (1.0, 0.0), std_grid)
    np.testing.assert_array_equal(out.theta, std_table.theta)


def test_vacuum_row_unchanged(std_model, std_grid, std_table):
    out = marginalize_povm(std_model, (1.0, 0.05), std_grid)
    np.testing.assert_allclose(out.theta[0], std_table.theta[0], rtol=1e-13)


def test_marginalized_physical(std_model, std_grid):
    for sigma in (0.01, 0.05, 0.1):
        out = marginalize_povm(std_model, (1.0, sigma), std_grid)
        assert np.all(out.theta >= 0)
        assert np.all(out.row_integrals() <= 1 + 1e-9)


def _row_variance(table):
    s = table.grid.points
    mass = table.grid.integrate(table.theta)
    mean = table.grid.integrate(table.theta * s) / mass
    return table.grid.integrate(table.theta * (s[None, :] - mean[:, None]) ** 2) / mass


def test_higher_rows_broaden_more(std_model, std_grid, std_table):
    out = marginalize_povm(std_model, (1.0, 0.05), std_grid)
    var = _row_variance(out)
    assert np.all(np.diff(var) >= 0)
    broadening = var - _row_variance(std_table)
    assert np.all(np.diff(broadening[1:]) >= -1e-12)
    assert broadening[0] == pytest.approx(0.0, abs=1e-12)


def monte_carlo_marginal(model, grid, sigma, samples, rng):
    theta = np.zeros((model.n_max + 1, grid.n_points))
    base = mixture_to_table(model, grid).theta
    for c in rng.normal(1.0, sigma, samples):
        theta += rescaling_matrix(model.n_max, c) @ base
    return theta / samples


@pytest.mark.parametrize("n_quad", [3, 7])
def test_quadrature_matches_monte_carlo(std_model, std_grid, n_quad):
    rng = np.random.default_rng(17)
    mc = monte_carlo_marginal(std_model, std_grid, 0.01, 10**5, rng)
    quad = marginalize_povm(std_model, (1.0, 0.01), std_grid, n_quad=n_quad)
    l1 = std_grid.integrate(np.abs(quad.theta - mc))
    assert np.all(l1[:6] < 0.01)


def test_invalid_prior_inputs(std_model, std_grid):
    with pytest.raises(ValueError):
        marginalize_povm(std_model, (1.0, -0.1), std_grid)
    with pytest.raises(ValueError):
        marginalize_povm(std_model, (1.0, 0.01), std_grid, n_quad=4)


@pytest.mark.slow
def test_fast_and_refit_paths_close():
    model = standard_model(4)
    grid = OutcomeGrid(-1.5, 5.5, 512)
    alpha = np.linspace(0, 3, 20)
    from pnrtomo.povm import probe_densities

    data = ProbeEnsemble(alpha, probe_densities(model, alpha, grid), grid)
    d = marginalization_discrepancy(model, data, (1.0, 0.01), grid, n_quad=3,
                                    em_config=EmConfig(n_max=4, max_iterations=300))
    assert d.shape == (5,)
    assert np.all(d[:4] < 0.05)
