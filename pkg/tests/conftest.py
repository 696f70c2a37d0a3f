import numpy as np
import pytest

from pnrtomo.density import OutcomeGrid
from pnrtomo.povm import GaussianMixturePovm, mixture_to_table


def standard_model(n_max=8, efficiency=0.9, width=0.15):
    """Unit-spaced peaks with loss-structured weights."""
    return GaussianMixturePovm.binomial(np.arange(n_max + 1.0), efficiency, width)


def standard_grid(n_max=8, n_points=2048):
    return OutcomeGrid(-1.5, n_max + 1.5, n_points)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def std_model():
    return standard_model()


@pytest.fixture(scope="session")
def std_grid():
    return standard_grid()


@pytest.fixture(scope="session")
def std_table(std_model, std_grid):
    return mixture_to_table(std_model, std_grid)


def sample_outcomes(model, alpha_sq, samples, rng):
    """Outcome draws per probe: Poisson photon number (capped at n_max),
    loss component from the weight row, then the Gaussian peak."""
    cum = np.cumsum(model.weights, axis=1)
    out = []
    for a in alpha_sq:
        n = np.minimum(rng.poisson(a, samples), model.n_max)
        j = (rng.random(samples)[:, None] > cum[n]).sum(axis=1)
        out.append(rng.normal(model.peak_means[j], model.widths[n, j]))
    return out


def noisy_ensemble(model, alpha_sq, grid, samples, rng, shared_bandwidth=False):
    """Kernel density estimates from sampled outcomes. With
    ``shared_bandwidth`` every probe uses the median automatic bandwidth."""
    from pnrtomo.density import estimate_density, select_bandwidth
    from pnrtomo.tomo import ProbeEnsemble

    sets = sample_outcomes(model, alpha_sq, samples, rng)
    if shared_bandwidth:
        h = float(np.median([select_bandwidth(x) for x in sets]))
        est = [estimate_density(x, grid, h) for x in sets]
    else:
        est = [estimate_density(x, grid) for x in sets]
    return ProbeEnsemble.from_estimates(np.asarray(alpha_sq, float), est)
