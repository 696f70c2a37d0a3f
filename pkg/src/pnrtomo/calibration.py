"""Calibrated-source attenuation and marginalization over its uncertainty."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .density import OutcomeGrid
from .povm import GaussianMixturePovm, PovmTable, mixture_to_table

DEFAULT_FRESNEL_LOSS = (0.033, 0.01)


@dataclass(frozen=True)
class PowerPairSeries:
    """Paired power readings ``y`` vs ``x`` with absolute 1-sigma errors."""

    x: np.ndarray
    x_err: np.ndarray
    y: np.ndarray
    y_err: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float).ravel() for a in (self.x, self.x_err, self.y, self.y_err)]
        if len({a.size for a in arrs}) != 1:
            raise ValueError("x, x_err, y and y_err must have equal length")
        if np.any(arrs[0] <= 0) or np.any(arrs[2] <= 0):
            raise ValueError("powers must be positive")
        if np.any(arrs[1] <= 0) or np.any(arrs[3] <= 0):
            raise ValueError("errors must be positive")
        for name, a in zip(("x", "x_err", "y", "y_err"), arrs):
            object.__setattr__(self, name, a)

    def __len__(self):
        return self.x.size

    def swapped(self) -> "PowerPairSeries":
        return PowerPairSeries(self.y, self.y_err, self.x, self.x_err)

    @classmethod
    def from_csv(cls, path) -> "PowerPairSeries":
        """Read columns ``x, x_err, y, y_err`` (header row required)."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no data rows")
        cols = {k.strip().split(" ")[0]: k for k in rows[0]}
        try:
            return cls(*(np.array([float(r[cols[c]]) for r in rows]) for c in ("x", "x_err", "y", "y_err")))
        except KeyError as exc:
            raise ValueError(f"{path}: missing column {exc}") from None


@dataclass(frozen=True)
class AttenuationFit:
    eta_att: float
    sigma_eta: float
    fresnel_correction: tuple = DEFAULT_FRESNEL_LOSS

    def __post_init__(self):
        if not (self.eta_att > 0 and self.sigma_eta > 0):
            raise ValueError("attenuation and its uncertainty must be positive")

    @property
    def relative_sigma(self) -> float:
        return self.sigma_eta / self.eta_att

    def to_dict(self) -> dict:
        return {
            "eta_att": self.eta_att,
            "sigma_eta": self.sigma_eta,
            "fresnel_correction": list(self.fresnel_correction),
        }


def _chi2_terms(r, s: PowerPairSeries):
    u = s.y - r * s.x
    v = s.y_err**2 + r * r * s.x_err**2
    return u, v


def tls_chi2(r: float, series: PowerPairSeries) -> float:
    """Profile chi-square of the line ``y = r x`` with errors in both axes,
    the true abscissae having been eliminated analytically."""
    u, v = _chi2_terms(r, series)
    return float(np.sum(u * u / v))


def _chi2_derivatives(r, s):
    u, v = _chi2_terms(r, s)
    sx2 = s.x_err**2
    d1 = -2 * s.x * u / v - 2 * r * sx2 * u * u / v**2
    d2 = 2 * s.x**2 / v + 8 * r * sx2 * s.x * u / v**2 - 2 * sx2 * u * u / v**2 + 8 * r * r * sx2**2 * u * u / v**3
    return float(d1.sum()), float(d2.sum())


def fit_attenuation(series: PowerPairSeries):
    """Weighted total least-squares ratio ``y = r x`` through the origin.

    Returns the maximum-likelihood ratio and its standard error from the
    curvature of the profile chi-square, ``sigma = sqrt(2 / chi2''(r))``.
    """
    if len(series) < 2:
        raise ValueError("need at least two power pairs")
    if np.ptp(series.x) == 0:
        raise ValueError("all x readings identical; ratio is not identifiable")
    ratios = series.y / series.x
    lo, hi = ratios.min(), ratios.max()
    if hi > lo:
        res = optimize.minimize_scalar(tls_chi2, bounds=(lo, hi), args=(series,), method="bounded",
                                       options={"xatol": 1e-14 * hi})
        r = float(res.x)
    else:
        r = float(lo)
    # Newton polish on the analytic derivatives
    for _ in range(50):
        d1, d2 = _chi2_derivatives(r, series)
        if d2 <= 0:
            break
        step = d1 / d2
        r_new = r - step
        if not lo <= r_new <= hi:
            break
        r = r_new
        if abs(step) <= 1e-15 * abs(r):
            break
    _, d2 = _chi2_derivatives(r, series)
    return r, float(np.sqrt(2.0 / d2))


def chain_attenuations(fits: Iterable):
    """Compose attenuation stages: ratios multiply, and relative
    uncertainties add linearly (the stages share a power meter, so their
    errors are not independent).
    """
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one attenuation stage")
    ratio = 1.0
    rel = 0.0
    for f in fits:
        r, s = (f.eta_att, f.sigma_eta) if isinstance(f, AttenuationFit) else f
        ratio *= r
        rel += s / r
    return ratio, ratio * rel


def apply_fresnel(ratio: float, sigma: float, loss=DEFAULT_FRESNEL_LOSS):
    """Correct a monitor-port ratio for Fresnel loss at an unterminated fibre.

    The monitor meter sees ``(1 - loss)`` of the power that reaches a
    spliced detector fibre, so the delivered ratio is ``ratio / (1 - loss)``;
    the loss uncertainty adds linearly in relative terms.
    """
    frac, frac_err = loss
    out = ratio / (1.0 - frac)
    rel = sigma / ratio + frac_err / (1.0 - frac)
    return out, out * rel


# -- marginalization ------------------------------------------------------------


def rescaling_matrix(n_max: int, scale: float) -> np.ndarray:
    """Row map for reinterpreting a POVM when probe energies are ``scale``
    times larger than assumed.

    Poisson statistics satisfy ``F(a, n) = sum_m F(c a, m) C(m, n) p^n (1-p)^(m-n)``
    with ``p = 1/c`` for every ``c > 0`` (for ``c < 1`` the coefficients
    alternate in sign). Hence ``theta'_m = sum_n M[m, n] theta_n``
    reproduces the same probe densities.
    """
    if scale <= 0:
        raise ValueError("energy scale must be positive")
    p = 1.0 / scale
    m = np.arange(n_max + 1)[:, None]
    n = np.arange(n_max + 1)[None, :]
    k = np.maximum(m - n, 0)
    binom = np.exp(gammaln(m + 1.0) - gammaln(n + 1.0) - gammaln(k + 1.0))
    out = binom * np.float_power(p, n) * np.float_power(1.0 - p, k)
    return np.where(n <= m, out, 0.0)


def gauss_hermite_scales(mean: float, sigma: float, n_quad: int):
    """Nodes and weights for averaging over a normal prior on the energy
    scale, expressed relative to ``mean``."""
    x, w = np.polynomial.hermite.hermgauss(n_quad)
    eta = mean + np.sqrt(2.0) * sigma * x
    return eta / mean, w / np.sqrt(np.pi)


def averaged_rescaling(n_max: int, scales: Sequence[float], weights: Sequence[float]) -> np.ndarray:
    return sum(w * rescaling_matrix(n_max, c) for c, w in zip(scales, weights))


def _physical(theta: np.ndarray, grid: OutcomeGrid) -> np.ndarray:
    theta = np.maximum(theta, 0.0)
    integ = grid.integrate(theta)
    over = integ > 1.0
    theta[over] /= integ[over, None]
    return theta


def marginalize_povm(
    model: GaussianMixturePovm,
    eta_prior=(1.0, 0.01),
    grid: Optional[OutcomeGrid] = None,
    n_quad: int = 7,
    data=None,
    em_config=None,
    check_coverage: bool = True,
) -> PovmTable:
    """POVM averaged over a normal prior on the probe-energy calibration.

    ``eta_prior`` is ``(mean, sigma)`` of the calibration factor; only the
    ratio ``eta / mean`` matters. By default each quadrature node
    reinterprets the fitted model via :func:`rescaling_matrix` (fast path).
    Passing ``data`` (a :class:`~pnrtomo.tomo.ProbeEnsemble`) instead refits
    the model by EM at every node with rescaled probe energies (exact path).

    ``check_coverage`` is passed on to :func:`~pnrtomo.povm.mixture_to_table`;
    disable it for fitted models whose unconstrained rows are very wide.

    Negative values left by alternating-sign row maps are clipped and rows
    whose integral would exceed one are scaled back to one.
    """
    mean, sigma = eta_prior
    if sigma < 0 or mean <= 0:
        raise ValueError("eta prior needs mean > 0 and sigma >= 0")
    if n_quad < 1 or n_quad % 2 == 0:
        raise ValueError("n_quad must be a positive odd integer")
    if grid is None:
        raise ValueError("a grid is required")
    base = mixture_to_table(model, grid, check_coverage)
    if sigma == 0:
        return base
    scales, weights = gauss_hermite_scales(mean, sigma, n_quad)
    if scales.min() <= 0:
        raise ValueError("calibration prior puts quadrature nodes at non-positive energy")
    if data is None:
        theta = averaged_rescaling(model.n_max, scales, weights) @ base.theta
    else:
        theta = sum(w * _refit_table(model, data, c, grid, em_config).theta for c, w in zip(scales, weights))
    return PovmTable(grid, _physical(theta, grid))


def _refit_table(model, data, scale, grid, em_config):
    from .tomo import EmConfig, ProbeEnsemble, em_fit

    cfg = em_config or EmConfig(n_max=model.n_max)
    cfg = EmConfig(**{**cfg.__dict__, "n_max": model.n_max, "init_strategy": "explicit", "init_model": model})
    scaled = ProbeEnsemble(data.alpha_sq * scale, data.densities, data.grid, data.bandwidths)
    fitted, _ = em_fit(scaled, cfg)
    return mixture_to_table(fitted, grid, check_coverage=False)


def marginalization_discrepancy(
    model: GaussianMixturePovm, data, eta_prior=(1.0, 0.01), grid: Optional[OutcomeGrid] = None, n_quad: int = 7, em_config=None
) -> np.ndarray:
    """Per-row L1 distance between the fast and refit marginalization paths."""
    fast = marginalize_povm(model, eta_prior, grid, n_quad)
    exact = marginalize_povm(model, eta_prior, grid, n_quad, data=data, em_config=em_config)
    return grid.integrate(np.abs(fast.theta - exact.theta))
