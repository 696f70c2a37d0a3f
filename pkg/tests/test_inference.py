import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pnrtomo.density import OutcomeGrid
from pnrtomo.inference import (
    PriorDistribution,
    Window,
    confidence,
    confidence_flat,
    confidence_vs_thermal_parameter,
    efficiency_interval,
    efficiency_objective,
    estimate_efficiency,
    golden_section,
    peak_center_confidence,
    posterior,
)
from pnrtomo.povm import GaussianMixturePovm, PovmTable, binomial_weights, mixture_to_table


def two_row_table(sigma=0.2, spacing=1.0, n_points=4096):
    grid = OutcomeGrid(-3.0, spacing + 3.0, n_points)
    s = grid.points
    return PovmTable(grid, np.array([stats.norm.pdf(s, 0, sigma), stats.norm.pdf(s, spacing, sigma)]))


def model_from_weights(beta, width=0.1):
    k = beta.shape[0]
    return GaussianMixturePovm(np.arange(float(k)), beta, np.tril(np.full((k, k), width)))


# -- priors --


def test_prior_kinds():
    assert PriorDistribution.flat(3).weights.tolist() == [0.25] * 4
    th = PriorDistribution.thermal(0.5, 30)
    assert th.weights[1] / th.weights[0] == pytest.approx(0.5)
    po = PriorDistribution.poisson(2.0, 40)
    np.testing.assert_allclose(po.weights, stats.poisson.pmf(np.arange(41), 2.0), rtol=1e-12)
    assert PriorDistribution.parse("thermal:0.1", 5).parameter == 0.1
    assert PriorDistribution.parse("poisson:3", 5).kind == "poisson"
    for bad in ("uniform", "thermal", "thermal:1.5", "flat:2"):
        with pytest.raises(ValueError):
            PriorDistribution.parse(bad, 5)


@given(st.floats(0.0, 0.99), st.integers(0, 40))
def test_thermal_prior_normalized(l2, n):
    w = PriorDistribution.thermal(l2, n).weights
    assert abs(w.sum() - 1) < 1e-9 and np.all(w >= 0)


# -- efficiency --


def test_lossless_efficiency():
    eta, _ = estimate_efficiency(model_from_weights(np.eye(6)))
    assert eta == pytest.approx(1.0, abs=1e-6)


def test_half_efficiency():
    beta = binomial_weights(4, 0.5)
    np.testing.assert_allclose(beta[2, :3], [0.25, 0.5, 0.25])
    eta, curve = estimate_efficiency(model_from_weights(beta))
    assert eta == pytest.approx(0.5, abs=1e-6)
    assert curve.shape == (1001, 2)


def test_noisy_efficiency_study():
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(100):
        beta = np.tril(binomial_weights(8, 0.93) + rng.uniform(-0.01, 0.01, (9, 9)))
        beta = np.clip(beta, 0, None)
        beta /= beta.sum(axis=1, keepdims=True)
        eta, _ = estimate_efficiency(model_from_weights(beta))
        errs.append(abs(eta - 0.93))
    assert max(errs) < 0.01


def test_efficiency_objective_and_interval():
    m = model_from_weights(binomial_weights(5, 0.7))
    assert efficiency_objective(m, 0.7) == pytest.approx(0.0, abs=1e-28)
    eta, curve = estimate_efficiency(m)
    lo, hi = efficiency_interval(curve, eta, efficiency_objective(m, eta))
    assert lo <= eta <= hi
    # rows beyond max_n are ignored
    beta = binomial_weights(5, 0.7)
    beta[5] = np.eye(6)[0]
    eta_top, _ = estimate_efficiency(model_from_weights(beta), max_n=4)
    assert eta_top == pytest.approx(0.7, abs=1e-6)


def test_golden_section_boundary():
    assert golden_section(lambda x: (x - 1.0) ** 2, 0.0, 1.0) == 1.0
    assert golden_section(lambda x: (x - 0.3) ** 2, 0.0, 1.0) == pytest.approx(0.3, abs=1e-6)


def test_efficiency_needs_two_rows():
    with pytest.raises(ValueError):
        estimate_efficiency(model_from_weights(np.eye(1)))


# -- posterior --


def test_identical_rows_uniform_posterior():
    t = two_row_table()
    t = PovmTable(t.grid, np.tile(t.theta[0], (4, 1)))
    post = posterior(t, PriorDistribution.flat(3))
    np.testing.assert_allclose(post.values[:, post.defined], 0.25, rtol=1e-15)


def test_disjoint_rows_indicator_posterior():
    grid = OutcomeGrid(0, 3, 301)
    s = grid.points
    theta = np.array([(s < 1).astype(float), ((s >= 1) & (s < 2)).astype(float), (s >= 2).astype(float)])
    post = posterior(PovmTable(grid, theta), PriorDistribution.flat(2))
    np.testing.assert_array_equal(post.values, theta)


def test_posterior_undefined_where_evidence_vanishes():
    t = two_row_table(sigma=0.05)
    post = posterior(t, PriorDistribution.flat(1))
    assert not post.defined.all()
    assert np.all(np.isnan(post.values[:, ~post.defined]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["flat", "thermal:0.3", "poisson:2"]))
def test_posterior_columns_normalized(seed, prior_text):
    r = np.random.default_rng(seed)
    grid = OutcomeGrid(-2, 8, 300)
    t = PovmTable(grid, r.uniform(0, 1, (7, 300)) * (r.random((7, 300)) > 0.3))
    post = posterior(t, PriorDistribution.parse(prior_text, 6))
    cols = post.values[:, post.defined].sum(axis=0)
    np.testing.assert_allclose(cols, 1.0, atol=1e-9)


def test_prior_support_check():
    with pytest.raises(ValueError):
        posterior(two_row_table(), PriorDistribution.flat(3))


# -- confidence --


def test_confidence_disjoint_and_identical():
    grid = OutcomeGrid(0, 2, 201)
    s = grid.points
    disjoint = PovmTable(grid, np.array([(s < 0.9) * 1.0, (s > 1.1) * 1.0]))
    disjoint = PovmTable(grid, disjoint.theta / grid.integrate(disjoint.theta)[:, None])
    np.testing.assert_allclose(confidence(disjoint, PriorDistribution.flat(1)).c_values, 1.0, atol=1e-9)
    same = two_row_table()
    same = PovmTable(same.grid, np.tile(same.theta[0], (2, 1)))
    np.testing.assert_allclose(confidence(same, PriorDistribution.flat(1)).c_values, 0.5, atol=1e-9)


def test_confidence_monte_carlo():
    t = two_row_table()
    c = confidence(t, PriorDistribution.flat(1)).c_values
    rng = np.random.default_rng(0)
    n = 10**6
    for row, mean in enumerate((0.0, 1.0)):
        s = rng.normal(mean, 0.2, n)
        p0, p1 = stats.norm.pdf(s, 0, 0.2), stats.norm.pdf(s, 1, 0.2)
        mc = np.mean((p0 if row == 0 else p1) / (p0 + p1))
        assert abs(c[row] - mc) < 0.005


def test_flat_forms_agree(std_table):
    general = confidence(std_table, PriorDistribution.flat(8)).c_values
    np.testing.assert_allclose(general, confidence_flat(std_table), atol=1e-12)


@given(st.floats(1e-3, 1e3))
def test_flat_confidence_scale_invariant(c):
    t = two_row_table(n_points=512)
    scaled = PovmTable(t.grid, c * t.theta)
    np.testing.assert_allclose(confidence_flat(scaled), confidence_flat(t), rtol=1e-12)


def test_full_window_equals_unwindowed(std_table, std_model):
    prior = PriorDistribution.thermal(0.3, 8)
    plain = confidence(std_table, prior)
    win = confidence(std_table, prior, Window.everything())
    np.testing.assert_array_equal(plain.c_values, win.c_values)
    np.testing.assert_allclose(win.acceptance_fraction, 1.0)


def test_narrow_window_limits_to_peak_centre(std_table, std_model):
    prior = PriorDistribution.flat(8)
    narrow = confidence(std_table, prior, Window.around_peaks(std_model, 0.1, 8))
    assert narrow.c_values[0] > confidence(std_table, prior).c_values[0]
    assert np.all((narrow.acceptance_fraction >= 0) & (narrow.acceptance_fraction <= 1))
    centre = peak_center_confidence(std_table, prior, std_model.peak_means)
    tiny = confidence(std_table, prior, Window.around_peaks(std_model, 2.5 * std_table.grid.spacing, 8))
    np.testing.assert_allclose(tiny.c_values, centre, atol=2e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.95), st.one_of(st.none(), st.floats(0.01, 1.0)))
def test_confidence_in_unit_interval(seed, l2, half):
    r = np.random.default_rng(seed)
    grid = OutcomeGrid(0, 6, 200)
    t = PovmTable(grid, r.uniform(0, 1, (5, 200)))
    window = None if half is None else Window(np.arange(5.0), half)
    rep = confidence(t, PriorDistribution.thermal(l2, 4), window)
    assert np.all((rep.c_values >= 0) & (rep.c_values <= 1))
    if window is not None:
        assert np.all((rep.acceptance_fraction >= 0) & (rep.acceptance_fraction <= 1))
        assert np.all((rep.c_values_with_rejection >= 0) & (rep.c_values_with_rejection <= 1))


def test_thermal_sweep(std_table):
    l2 = np.array([0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    sweep = confidence_vs_thermal_parameter(std_table, l2, 8)
    assert sweep.shape == (10, 9)
    assert np.all(np.isfinite(sweep)) and np.all(sweep >= 0)
    np.testing.assert_array_equal(sweep[3], confidence(std_table, PriorDistribution.thermal(0.3, 8)).c_values)
    # C_1 changes smoothly with the prior parameter
    assert np.max(np.abs(np.diff(sweep[:, 1]))) < 0.2
    # vacuum limit
    c0 = confidence(std_table, PriorDistribution.thermal(1e-9, 8)).c_values[0]
    assert c0 == pytest.approx(1.0, abs=1e-6)
