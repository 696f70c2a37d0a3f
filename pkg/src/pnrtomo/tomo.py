"""Detector tomography from coherent-probe outcome densities.

Two reconstructions are provided:

* :func:`em_fit` -- maximum-likelihood fit of a Gaussian-mixture POVM by
  expectation-maximization, with all likelihood integrals evaluated as
  trapezoidal sums on the shared outcome grid.
* :func:`lsq_fit` -- model-free non-negative least squares on the grid,
  solved by accelerated projected gradient descent.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import fft

from .density import DensityEstimate, OutcomeGrid
from .povm import (
    DEFAULT_N_MAX,
    GaussianMixturePovm,
    PovmTable,
    binomial_weights,
    gaussian_pdf,
    poisson_matrix,
    probe_densities,
)

log = logging.getLogger(__name__)

_TINY = 1e-300


@dataclass
class ProbeEnsemble:
    """Coherent-probe energies with their estimated outcome densities.

    ``densities[k]`` is ``q(s | alpha_k)`` on ``grid``. ``bandwidths`` holds
    the kernel bandwidth used for each probe, when known.
    """

    alpha_sq: np.ndarray
    densities: np.ndarray
    grid: OutcomeGrid
    bandwidths: Optional[np.ndarray] = None

    def __post_init__(self):
        self.alpha_sq = np.asarray(self.alpha_sq, dtype=float)
        self.densities = np.atleast_2d(np.asarray(self.densities, dtype=float))
        if self.densities.shape != (self.alpha_sq.size, self.grid.n_points):
            raise ValueError(
                f"densities shape {self.densities.shape} != ({self.alpha_sq.size}, {self.grid.n_points})"
            )
        if np.any(np.diff(self.alpha_sq) <= 0):
            raise ValueError("alpha_sq must be distinct and sorted ascending")
        if np.any(self.alpha_sq < 0):
            raise ValueError("alpha_sq must be non-negative")
        if np.any(self.densities < 0):
            raise ValueError("densities must be non-negative")
        if self.bandwidths is not None:
            self.bandwidths = np.asarray(self.bandwidths, dtype=float)

    @property
    def n_probes(self) -> int:
        return self.alpha_sq.size

    @classmethod
    def from_estimates(cls, alpha_sq: Sequence[float], estimates: Sequence[DensityEstimate]) -> "ProbeEnsemble":
        grids = {e.grid for e in estimates}
        if len(grids) != 1:
            raise ValueError("all densities must share one grid")
        order = np.argsort(alpha_sq)
        est = [estimates[i] for i in order]
        bw = [e.bandwidth for e in est]
        return cls(
            np.asarray(alpha_sq, dtype=float)[order],
            np.stack([e.values for e in est]),
            est[0].grid,
            None if any(b is None for b in bw) else np.asarray(bw),
        )


@dataclass
class EmConfig:
    n_max: int = DEFAULT_N_MAX
    max_iterations: int = 2000
    rel_tol: float = 1e-8
    sigma_floor: Optional[float] = None  # None -> half the grid spacing
    init_strategy: str = "quantile_spaced"
    init_model: Optional[GaussianMixturePovm] = None
    init_efficiency: Optional[float] = 0.9  # None -> estimated from the vacuum peak
    # components/peaks carrying less than this fraction of the data keep their parameters
    min_mass_fraction: float = 1e-10

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.sigma_floor is not None and self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")
        if self.init_strategy not in ("quantile_spaced", "kmeans_on_scores", "explicit"):
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")
        if self.init_strategy == "explicit" and self.init_model is None:
            raise ValueError("explicit initialization needs init_model")
        if self.n_max < 0 or self.max_iterations < 0:
            raise ValueError("n_max and max_iterations must be non-negative")


@dataclass
class EmDiagnostics:
    log_likelihood: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    clamped: set = field(default_factory=set)  # (n, j) widths held at sigma_floor
    empty: set = field(default_factory=set)  # (n, j) with negligible responsibility
    frozen_peaks: set = field(default_factory=set)
    component_mass: Optional[np.ndarray] = None  # N_{n,j} at the returned parameters
    sigma_floor: float = 0.0

    def to_dict(self) -> dict:
        return {
            "log_likelihood": [float(x) for x in self.log_likelihood],
            "iterations": self.iterations,
            "converged": self.converged,
            "clamped": sorted(map(list, self.clamped)),
            "empty": sorted(map(list, self.empty)),
            "frozen_peaks": sorted(self.frozen_peaks),
            "sigma_floor": self.sigma_floor,
        }


@dataclass
class EmState:
    model: GaussianMixturePovm
    log_likelihood: float
    iteration: int


# -- initialization ---------------------------------------------------------


def _quantile(grid: OutcomeGrid, q: np.ndarray, u: np.ndarray) -> np.ndarray:
    s = grid.points
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (q[1:] + q[:-1]) * grid.spacing)])
    cdf /= cdf[-1]
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(u, cdf[keep], s[keep])


def _fill_unresolved(mu: np.ndarray, resolved: np.ndarray, fallback_spacing: float) -> np.ndarray:
    mu = mu.copy()
    idx = np.flatnonzero(resolved)
    if idx.size == 0:
        idx = np.array([0])
    if idx.size >= 2:
        steps = np.diff(mu[idx]) / np.diff(idx)
        spacing = float(np.median(steps))
    else:
        spacing = fallback_spacing
    if spacing <= 0:
        spacing = fallback_spacing
    lo, hi = idx[0], idx[-1]
    for j in range(lo - 1, -1, -1):
        mu[j] = mu[j + 1] - spacing
    for j in range(hi + 1, mu.size):
        mu[j] = mu[j - 1] + spacing
    # interior gaps: interpolate
    inner = np.arange(lo, hi + 1)
    mu[inner] = np.interp(inner, idx, mu[idx])
    # enforce strict increase among resolved quantiles that coincide
    for j in range(1, mu.size):
        if mu[j] <= mu[j - 1]:
            mu[j] = mu[j - 1] + 1e-3 * spacing
    return mu


def _quantile_means(data: ProbeEnsemble, n_max: int, efficiency: float) -> np.ndarray:
    """Peak means at quantiles of the pooled probe density.

    Under the initial loss model each peak ``j`` carries a predictable share
    of the pooled outcome mass; peak ``j`` is placed at the quantile halfway
    through its share. Peaks with negligible share are extrapolated at the
    median spacing of the resolved ones.
    """
    pooled = data.densities.sum(axis=0)
    f = poisson_matrix(data.alpha_sq, n_max)
    share = (f @ binomial_weights(n_max, efficiency)).sum(axis=0)
    total = share.sum()
    cum = np.cumsum(share) / total
    u = cum - 0.5 * share / total
    mu = _quantile(data.grid, pooled, np.clip(u, 0.0, 1.0))
    resolved = share / total >= 1e-3
    s = data.grid.points
    mass = data.grid.integrate(pooled)
    mean = data.grid.integrate(pooled * s) / mass
    sd = np.sqrt(max(data.grid.integrate(pooled * (s - mean) ** 2) / mass, data.grid.spacing**2))
    return _fill_unresolved(mu, resolved, fallback_spacing=4.0 * sd)


def _kmeans_means(data: ProbeEnsemble, n_max: int, efficiency: float, iterations: int = 100) -> np.ndarray:
    """Weighted 1-D k-means on the pooled density, seeded by the quantile rule."""
    mu = _quantile_means(data, n_max, efficiency)
    s = data.grid.points
    weight = data.densities.sum(axis=0) * data.grid.weights
    for _ in range(iterations):
        edges = 0.5 * (mu[1:] + mu[:-1])
        label = np.searchsorted(edges, s)
        mass = np.bincount(label, weight, minlength=mu.size)
        first = np.bincount(label, weight * s, minlength=mu.size)
        new = np.where(mass > 0, first / np.where(mass > 0, mass, 1.0), mu)
        if np.any(np.diff(new) <= 0) or np.allclose(new, mu, rtol=0, atol=1e-12):
            break
        mu = new
    return mu


def vacuum_efficiency_guess(data: ProbeEnsemble, default: float = 0.9) -> float:
    """Rough efficiency from the decay of the vacuum-peak share with probe energy.

    The vacuum peak is located from the weakest probe; its share of each
    probe's outcome mass should fall as ``exp(-eta |alpha|^2)``. Returns
    ``default`` when the probe set cannot constrain this (no weak probe or
    no probe with a measurable vacuum share).
    """
    s = data.grid.points
    q0 = data.densities[0]
    mode = s[np.argmax(q0)]
    left = s <= mode
    left_mass = data.grid.integrate(q0 * left)
    if left_mass <= 0:
        return default
    sd = np.sqrt(data.grid.integrate(q0 * left * (s - mode) ** 2) / left_mass)
    sd = max(sd, data.grid.spacing)
    below = (s <= mode + 3.0 * sd).astype(float)
    share = data.grid.integrate(data.densities * below) / data.grid.integrate(data.densities)
    # the vacuum share of the weakest probe calibrates away leakage from higher peaks
    share = share / max(share[0], _TINY)
    x = data.alpha_sq - data.alpha_sq[0]
    use = (x > 0) & (share > 0.02) & (share < 0.98)
    if data.alpha_sq[0] > 0.5 or use.sum() < 2:
        return default
    y = -np.log(share[use])
    eta = float((x[use] * y).sum() / (x[use] ** 2).sum())
    return float(np.clip(eta, 0.05, 1.0))


def initial_model(data: ProbeEnsemble, config: EmConfig) -> GaussianMixturePovm:
    if config.init_strategy == "explicit":
        model = config.init_model
        if model.n_max != config.n_max:
            raise ValueError("init_model n_max differs from config n_max")
        return model
    eta = config.init_efficiency
    if eta is None:
        eta = vacuum_efficiency_guess(data)
        log.info("initial efficiency estimated from vacuum share: %.3f", eta)
    if config.init_strategy == "kmeans_on_scores":
        mu = _kmeans_means(data, config.n_max, eta)
    else:
        mu = _quantile_means(data, config.n_max, eta)
    floor = config.sigma_floor if config.sigma_floor is not None else 0.5 * data.grid.spacing
    if mu.size > 1:
        gaps = np.diff(mu)
        local = np.concatenate([[gaps[0]], 0.5 * (gaps[1:] + gaps[:-1]) if gaps.size > 1 else [], [gaps[-1]]])
        width = np.maximum(local / 4.0, floor)
    else:
        q = data.densities[0]
        s = data.grid.points
        m0 = data.grid.integrate(q * s) / data.grid.integrate(q)
        width = np.array([max(np.sqrt(data.grid.integrate(q * (s - m0) ** 2) / data.grid.integrate(q)), floor)])
    k = config.n_max + 1
    return GaussianMixturePovm(
        mu,
        binomial_weights(config.n_max, eta),
        np.tril(np.broadcast_to(width[None, :], (k, k))),
    )


# -- expectation-maximization -----------------------------------------------


class _Workspace:
    """Precomputed arrays for repeated E/M steps on one ensemble."""

    def __init__(self, data: ProbeEnsemble, n_max: int):
        self.s = data.grid.points
        self.w = data.grid.weights
        self.q = data.densities
        self.f = poisson_matrix(data.alpha_sq, n_max)
        self.n_idx, self.j_idx = np.tril_indices(n_max + 1)
        self.k = n_max + 1
        self.total_mass = float((self.q * self.w).sum())
        self.positive = self.q > 0
        self.rows = (self.n_idx[None, :] == np.arange(self.k)[:, None]).astype(float)

    def components(self, mu, var):
        return gaussian_pdf(self.s[None, :], mu[self.j_idx, None], np.sqrt(var)[:, None])

    def e_step(self, mu, beta, var):
        g = self.components(mu, var)
        weighted = beta[:, None] * g
        p = self.f @ (self.rows @ weighted)
        safe = p > _TINY
        logp = np.log(np.where(safe, p, _TINY))
        ll = float((np.where(self.positive, self.q * logp, 0.0) * self.w).sum())
        ratio = np.where(safe, self.q / np.where(safe, p, 1.0), 0.0)
        resp = weighted * (self.f.T @ ratio)[self.n_idx] * self.w  # sum_k of q*gamma*dw per component
        return ll, resp


def _log_likelihood(ws: _Workspace, mu, beta, var) -> float:
    return ws.e_step(mu, beta, var)[0]


def _flatten(model: GaussianMixturePovm, ws: _Workspace):
    return (
        model.peak_means.copy(),
        model.weights[ws.n_idx, ws.j_idx].copy(),
        model.widths[ws.n_idx, ws.j_idx].copy() ** 2,
    )


def _assemble(ws: _Workspace, mu, beta, var) -> GaussianMixturePovm:
    b = np.zeros((ws.k, ws.k))
    sd = np.zeros((ws.k, ws.k))
    b[ws.n_idx, ws.j_idx] = beta
    sd[ws.n_idx, ws.j_idx] = np.sqrt(var)
    b /= b.sum(axis=1, keepdims=True)
    return GaussianMixturePovm(mu, b, sd)


def _ordered_update(mu_old, mu_new, mass):
    """Revert updates that would break strict ordering of the peak means,
    lowest-mass peak first."""
    mu = mu_new.copy()
    reverted = set()
    while True:
        bad = np.flatnonzero(np.diff(mu) <= 0)
        if bad.size == 0:
            return mu, reverted
        i = bad[0]
        cand = [c for c in (i, i + 1) if c not in reverted]
        j = min(cand, key=lambda c: mass[c]) if cand else i
        mu[j] = mu_old[j]
        reverted.add(int(j))
        if len(reverted) >= mu.size:
            return mu_old.copy(), reverted


def m_step(ws: _Workspace, resp, mu, beta, var, floor_sq, min_mass, diag: Optional[EmDiagnostics] = None):
    """Closed-form conditional maximization given responsibilities.

    Shared peak means pool every photon number's contribution to a peak,
    weighting each by its current precision; widths are then updated with
    the new means, and weights are the normalized responsibility masses.
    """
    n_c = resp.sum(axis=1)
    m1 = resp @ ws.s
    live = n_c > min_mass
    prec = np.where(live, 1.0 / var, 0.0)
    num = np.bincount(ws.j_idx, prec * m1, minlength=ws.k)
    den = np.bincount(ws.j_idx, prec * n_c, minlength=ws.k)
    peak_mass = np.bincount(ws.j_idx, n_c, minlength=ws.k)
    movable = peak_mass > min_mass
    mu_new = np.where(movable & (den > 0), num / np.where(den > 0, den, 1.0), mu)
    mu_new, reverted = _ordered_update(mu, mu_new, peak_mass)

    centred = (ws.s[None, :] - mu_new[ws.j_idx, None]) ** 2
    second = (resp * centred).sum(axis=1)
    var_new = np.where(live, second / np.where(live, n_c, 1.0), var)
    clamped = live & (var_new < floor_sq)
    var_new = np.where(clamped, floor_sq, var_new)

    row_mass = np.bincount(ws.n_idx, n_c, minlength=ws.k)
    row_live = row_mass[ws.n_idx] > 0
    beta_new = np.where(row_live, n_c / np.where(row_live, row_mass[ws.n_idx], 1.0), beta)

    if diag is not None:
        diag.clamped = {(int(ws.n_idx[c]), int(ws.j_idx[c])) for c in np.flatnonzero(clamped)}
        diag.empty = {(int(ws.n_idx[c]), int(ws.j_idx[c])) for c in np.flatnonzero(~live)}
        diag.frozen_peaks = {int(j) for j in np.flatnonzero(~movable)} | reverted
    return mu_new, beta_new, var_new


def em_step(data: ProbeEnsemble, model: GaussianMixturePovm, sigma_floor: Optional[float] = None) -> EmState:
    """A single E+M update; returns the updated model and the log-likelihood
    of the *input* model."""
    ws = _Workspace(data, model.n_max)
    floor = sigma_floor if sigma_floor is not None else 0.5 * data.grid.spacing
    mu, beta, var = _flatten(model, ws)
    ll, resp = ws.e_step(mu, beta, var)
    mu, beta, var = m_step(ws, resp, mu, beta, var, floor**2, 0.0)
    return EmState(_assemble(ws, mu, beta, var), ll, 1)


def em_fit(data: ProbeEnsemble, config: Optional[EmConfig] = None):
    """Maximum-likelihood Gaussian-mixture POVM.

    Maximizes ``L = sum_k  integral q(s|alpha_k) log p(s|alpha_k) ds`` where
    ``p(s|alpha) = sum_{n,j} F(alpha, n) beta_{n,j} N(s | mu_j, sigma_{n,j})``.
    Iteration stops when the change in ``L`` falls below
    ``rel_tol * max(|L|, 1)`` or after ``max_iterations`` updates.

    Returns
    -------
    model : GaussianMixturePovm
    diagnostics : EmDiagnostics
    """
    config = config or EmConfig()
    if data.n_probes < 2:
        raise ValueError("em_fit needs at least two probes")
    model = initial_model(data, config)
    return _run_em(data, model, config)


def em_fit_single(data: ProbeEnsemble, config: EmConfig):
    """EM without the two-probe precondition (used for degenerate checks)."""
    return _run_em(data, initial_model(data, config), config)


def _run_em(data: ProbeEnsemble, model: GaussianMixturePovm, config: EmConfig):
    ws = _Workspace(data, config.n_max)
    floor = config.sigma_floor if config.sigma_floor is not None else 0.5 * data.grid.spacing
    diag = EmDiagnostics(sigma_floor=floor)
    min_mass = config.min_mass_fraction * ws.total_mass
    mu, beta, var = _flatten(model, ws)
    var = np.maximum(var, floor**2)
    prev = None
    resp = None
    for it in range(config.max_iterations + 1):
        ll, resp = ws.e_step(mu, beta, var)
        diag.log_likelihood.append(ll)
        if prev is not None and abs(ll - prev) <= config.rel_tol * max(abs(prev), 1.0):
            diag.converged = True
            break
        if it == config.max_iterations:
            break
        prev = ll
        mu, beta, var = m_step(ws, resp, mu, beta, var, floor**2, min_mass, diag)
        diag.iterations = it + 1
    if not diag.converged:
        log.warning("EM stopped after %d iterations without reaching rel_tol=%g", diag.iterations, config.rel_tol)
    mass = np.zeros((ws.k, ws.k))
    mass[ws.n_idx, ws.j_idx] = resp.sum(axis=1)
    diag.component_mass = mass
    return _assemble(ws, mu, beta, var), diag


def deconvolve_bandwidth(model: GaussianMixturePovm, bandwidth: float, floor: float = 0.0) -> GaussianMixturePovm:
    """Remove Gaussian kernel smoothing from fitted widths.

    A kernel density estimate with bandwidth ``h`` of Gaussian-mixture data is
    the same mixture with every variance increased by ``h**2``; this undoes
    that, keeping widths at least ``floor`` (or a tiny positive value).
    """
    k = model.n_max + 1
    lower = np.tril(np.ones((k, k), dtype=bool))
    var = np.where(lower, model.widths**2 - bandwidth**2, 0.0)
    min_sd = max(floor, 1e-12)
    sd = np.where(lower, np.sqrt(np.maximum(var, min_sd**2)), 0.0)
    return GaussianMixturePovm(model.peak_means, model.weights, sd)


def pooled_peak_widths(model: GaussianMixturePovm, mass: np.ndarray) -> np.ndarray:
    """Per-peak width pooled over photon numbers, weighting each
    ``sigma_{n,j}^2`` by the data mass ``N_{n,j}`` it explained."""
    m = np.tril(mass)
    tot = m.sum(axis=0)
    var = (m * model.widths**2).sum(axis=0)
    return np.sqrt(np.where(tot > 0, var / np.where(tot > 0, tot, 1.0), np.nan))


# -- model-free least squares -------------------------------------------------


@dataclass
class LsqDiagnostics:
    iterations: int = 0
    converged: bool = False
    projected_gradient: float = np.inf
    row_integrals: Optional[np.ndarray] = None
    negative_fraction: float = 0.0  # of the unconstrained solution
    excess_modes: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    @property
    def integral_violation(self) -> bool:
        return bool(np.any(self.row_integrals > 1.0 + 1e-9))

    @property
    def artifact(self) -> bool:
        """True when the solution shows physicality artifacts."""
        return bool(self.negative_fraction > 0 or np.any(self.excess_modes > 0))

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "projected_gradient": float(self.projected_gradient),
            "row_integrals": self.row_integrals.tolist(),
            "negative_fraction": self.negative_fraction,
            "excess_modes": self.excess_modes.tolist(),
            "warnings": list(self.warnings),
        }


def _smooth_apply(theta, reg):
    """``reg * theta @ D^T D`` for the first-difference operator along the grid."""
    if reg == 0:
        return 0.0
    d = np.diff(theta, axis=1)
    out = np.zeros_like(theta)
    out[:, :-1] -= d
    out[:, 1:] += d
    return reg * out


def unconstrained_lsq(f: np.ndarray, q: np.ndarray, reg: float) -> np.ndarray:
    """Exact minimizer of ``||F T - Q||^2 + reg ||T D^T||^2`` without sign
    constraints, via the eigenbases of ``F^T F`` and the path Laplacian
    (the latter diagonalized by the orthonormal DCT-II)."""
    lam, v = np.linalg.eigh(f.T @ f)
    rhs = v.T @ (f.T @ q)
    g = q.shape[1]
    mu = 2.0 - 2.0 * np.cos(np.pi * np.arange(g) / g)
    coef = fft.dct(rhs, type=2, norm="ortho", axis=1)
    den = lam[:, None] + reg * mu[None, :]
    ok = den > 1e-12 * max(lam.max(), 1.0)
    coef = np.where(ok, coef / np.where(ok, den, 1.0), 0.0)
    return v @ fft.idct(coef, type=2, norm="ortho", axis=1)


def count_modes(row: np.ndarray, rel_prominence: float = 1e-3) -> int:
    """Number of local maxima rising at least ``rel_prominence * max`` above
    the preceding minimum."""
    top = row.max()
    if top <= 0:
        return 0
    thresh = rel_prominence * top
    modes = 0
    low = row[0]
    rising = True
    last_peak = -np.inf
    for x in row[1:]:
        if rising:
            if x > last_peak:
                last_peak = x
            elif last_peak - x > thresh and last_peak - low > thresh:
                modes += 1
                rising = False
                low = x
        else:
            if x < low:
                low = x
            elif x - low > thresh:
                rising = True
                last_peak = x
    if rising and last_peak - low > thresh:
        modes += 1
    return modes


def oscillation_metric(table: PovmTable) -> np.ndarray:
    """Per-row total variation divided by the row maximum.

    A smooth row with ``m`` well-separated peaks scores about ``2 m``
    times the relative peak heights; noise-driven wiggles inflate it.
    """
    tv = np.abs(np.diff(table.theta, axis=1)).sum(axis=1)
    top = table.theta.max(axis=1)
    return np.where(top > 0, tv / np.where(top > 0, top, 1.0), 0.0)


def lsq_fit(
    data: ProbeEnsemble,
    n_max: int = DEFAULT_N_MAX,
    regularization: float = 1e-3,
    tol: float = 1e-10,
    max_iterations: int = 20000,
):
    """Model-free POVM by non-negative, smoothness-regularized least squares.

    Minimizes ``sum_s sum_k (q_k(s) - sum_n F_{k,n} theta_n(s))^2 +
    regularization * sum_s sum_n (theta_n(s) - theta_n(s_prev))^2`` over
    ``theta >= 0`` by FISTA with adaptive restart. Stops when the infinity norm
    of the projected gradient drops below ``tol`` relative to
    ``||F^T Q||_inf``. The ``integral <= 1`` condition is reported, not
    enforced.

    Returns
    -------
    table : PovmTable
    diagnostics : LsqDiagnostics
    """
    if regularization < 0:
        raise ValueError("regularization must be non-negative")
    diag = LsqDiagnostics()
    if data.n_probes < n_max + 1:
        msg = f"{data.n_probes} probes for {n_max + 1} unknown rows; the inversion is under-determined"
        warnings.warn(msg, stacklevel=2)
        diag.warnings.append(msg)
    f = poisson_matrix(data.alpha_sq, n_max)
    q = data.densities
    ftf = f.T @ f
    ftq = f.T @ q
    lip = 2.0 * (np.linalg.eigvalsh(ftf).max() + 4.0 * regularization)
    step = 1.0 / lip
    scale = max(np.abs(ftq).max(), _TINY)

    def grad(t):
        return 2.0 * (ftf @ t - ftq) + 2.0 * _smooth_apply(t, regularization)

    theta = np.maximum(np.linalg.lstsq(f, q, rcond=None)[0], 0.0)
    y = theta.copy()
    t_k = 1.0
    for it in range(1, max_iterations + 1):
        g = grad(y)
        new = np.maximum(y - step * g, 0.0)
        # gradient-based restart keeps the accelerated iteration monotone-ish
        if np.sum((y - new) * (new - theta)) > 0:
            t_k = 1.0
            y = theta
            g = grad(y)
            new = np.maximum(y - step * g, 0.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
        y = new + ((t_k - 1.0) / t_next) * (new - theta)
        theta, t_k = new, t_next
        if it % 25 == 0 or it == max_iterations:
            g = grad(theta)
            pg = np.where(theta > 0, g, np.minimum(g, 0.0))
            diag.projected_gradient = float(np.abs(pg).max() / scale)
            if diag.projected_gradient <= tol:
                diag.converged = True
                diag.iterations = it
                break
    else:
        diag.iterations = max_iterations
        msg = f"projected gradient {diag.projected_gradient:.3g} above tol {tol:g} after {max_iterations} iterations"
        diag.warnings.append(msg)
        log.warning("lsq_fit: %s", msg)

    table = PovmTable(data.grid, theta)
    free = unconstrained_lsq(f, q, regularization)
    ref = max(np.abs(free).max(), _TINY)
    diag.negative_fraction = float(np.mean(free < -1e-9 * ref))
    diag.row_integrals = table.row_integrals()
    diag.excess_modes = np.array([max(0, count_modes(theta[n]) - (n + 1)) for n in range(n_max + 1)])
    return table, diag


# -- goodness of fit ----------------------------------------------------------


def reconstruction_error(data: ProbeEnsemble, model_or_table) -> float:
    """Normalized L1 distance ``sum_k |q_k - p_k|_1 / sum_k |q_k|_1``."""
    if isinstance(model_or_table, PovmTable) and model_or_table.grid != data.grid:
        raise ValueError("model table and data must share a grid")
    p = probe_densities(model_or_table, data.alpha_sq, data.grid)
    num = data.grid.integrate(np.abs(data.densities - p)).sum()
    den = data.grid.integrate(np.abs(data.densities)).sum()
    return float(num / den)
