"""Photon-number inference from a reconstructed POVM.

Efficiency estimation from the mixture weights, Bayesian photon-number
posteriors under a prior, and the confidence measure
``C_n = integral p(n|s) p(s|n) ds`` with optional post-selection windows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .density import OutcomeGrid
from .povm import GaussianMixturePovm, PovmTable, binomial_weights, poisson_coeff

UNDEFINED_BELOW = 1e-300
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PriorDistribution:
    """Photon-number prior on the finite support ``0..len(weights)-1``."""

    kind: str
    parameter: Optional[float]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("prior weights must be a non-empty non-negative vector")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("prior weights must sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def support(self) -> int:
        """Largest photon number with prior mass."""
        return self.weights.size - 1

    @classmethod
    def flat(cls, n_max: int) -> "PriorDistribution":
        return cls("flat", None, np.full(n_max + 1, 1.0 / (n_max + 1)))

    @classmethod
    def thermal(cls, lambda_sq: float, n_max: int) -> "PriorDistribution":
        """``(1 - l^2) l^(2n)``, renormalized over ``0..n_max``."""
        if not 0.0 <= lambda_sq < 1.0:
            raise ValueError("thermal parameter lambda^2 must lie in [0, 1)")
        n = np.arange(n_max + 1)
        w = (1.0 - lambda_sq) * np.float_power(lambda_sq, n)
        return cls("thermal", float(lambda_sq), w / w.sum())

    @classmethod
    def poisson(cls, alpha_sq: float, n_max: int) -> "PriorDistribution":
        """Coherent-state photon statistics, renormalized over ``0..n_max``."""
        w = poisson_coeff(alpha_sq, np.arange(n_max + 1))
        return cls("poisson", float(alpha_sq), w / w.sum())

    @classmethod
    def explicit(cls, weights: Sequence[float]) -> "PriorDistribution":
        w = np.asarray(weights, dtype=float)
        return cls("explicit", None, w / w.sum())

    @classmethod
    def parse(cls, text: str, n_max: int) -> "PriorDistribution":
        """Parse ``flat``, ``thermal:<lambda^2>`` or ``poisson:<|alpha|^2>``."""
        kind, _, arg = text.partition(":")
        if kind == "flat" and not arg:
            return cls.flat(n_max)
        if kind == "thermal" and arg:
            return cls.thermal(float(arg), n_max)
        if kind == "poisson" and arg:
            return cls.poisson(float(arg), n_max)
        raise ValueError(f"cannot parse prior {text!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parameter": self.parameter, "weights": self.weights.tolist()}


# -- efficiency ---------------------------------------------------------------


def efficiency_objective(model: GaussianMixturePovm, eta, max_n: Optional[int] = None) -> np.ndarray:
    """``sum_{n<=max_n, j<=n} (beta_{n,j} - C(n,j) eta^j (1-eta)^(n-j))^2``."""
    top = model.n_max if max_n is None else min(max_n, model.n_max)
    beta = model.weights[: top + 1, : top + 1]
    etas = np.atleast_1d(np.asarray(eta, dtype=float))
    out = np.array([((beta - binomial_weights(top, e)) ** 2).sum() for e in etas])
    return out if np.ndim(eta) else out[0]


def golden_section(func, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Minimize a unimodal function on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = func(d)
    x = 0.5 * (a + b)
    # the bracket may have collapsed onto a boundary
    for edge in (lo, hi):
        if func(edge) < func(x):
            x = edge
    return x


def estimate_efficiency(model: GaussianMixturePovm, max_n: Optional[int] = None, tol: float = 1e-6, n_curve: int = 1001):
    """Detection efficiency from the binomial structure of the mixture weights.

    The objective is first sampled on ``n_curve`` points of ``[0, 1]``; a
    golden-section search then refines the best sample within its
    neighbouring interval.

    Returns
    -------
    eta : float
    curve : ndarray, shape (n_curve, 2)
        Columns are candidate efficiency and objective value.
    """
    if model.n_max < 1:
        raise ValueError("efficiency needs a model with n_max >= 1")
    etas = np.linspace(0.0, 1.0, n_curve)
    obj = efficiency_objective(model, etas, max_n)
    i = int(np.argmin(obj))
    lo, hi = etas[max(i - 1, 0)], etas[min(i + 1, n_curve - 1)]
    eta = golden_section(lambda e: efficiency_objective(model, e, max_n), lo, hi, tol)
    return float(eta), np.column_stack([etas, obj])


def efficiency_interval(curve: np.ndarray, eta: float, objective_min: float, factor: float = 2.0):
    """Range of efficiencies whose objective stays within ``factor`` times the
    minimum, clipped to [0, 1]. A non-archival uncertainty band."""
    ok = curve[:, 1] <= factor * objective_min
    if not ok.any():
        return eta, eta
    etas = curve[ok, 0]
    return float(min(etas.min(), eta)), float(max(etas.max(), eta))


# -- posterior and confidence ---------------------------------------------------


@dataclass
class PosteriorTable:
    """``values[n, g] = p(n | s_g)``; columns where ``p(s)`` underflows are NaN."""

    grid: OutcomeGrid
    values: np.ndarray
    prior: PriorDistribution

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values[0])


def _joint(table: PovmTable, prior: PriorDistribution) -> np.ndarray:
    if prior.support > table.n_max:
        raise ValueError(f"prior support {prior.support} exceeds table n_max {table.n_max}")
    return prior.weights[:, None] * table.theta[: prior.support + 1]


def posterior(table: PovmTable, prior: PriorDistribution) -> PosteriorTable:
    """Bayes' rule ``p(n|s) = p(s|n) p(n) / sum_k p(s|k) p(k)`` per grid point."""
    joint = _joint(table, prior)
    evidence = joint.sum(axis=0)
    ok = evidence >= UNDEFINED_BELOW
    values = np.where(ok, joint / np.where(ok, evidence, 1.0), np.nan)
    return PosteriorTable(table.grid, values, prior)


@dataclass(frozen=True)
class Window:
    """Symmetric post-selection windows, one per photon number."""

    centers: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.centers, dtype=float))
        h = np.broadcast_to(np.asarray(self.half_widths, dtype=float), c.shape).copy()
        if np.any(h < 0):
            raise ValueError("half widths must be non-negative")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "half_widths", h)

    @classmethod
    def around_peaks(cls, model: GaussianMixturePovm, half_width: float, n_max: Optional[int] = None) -> "Window":
        top = model.n_max if n_max is None else n_max
        return cls(model.peak_means[: top + 1], half_width)

    @classmethod
    def everything(cls) -> "Window":
        return cls(np.array([0.0]), np.inf)

    def accepts(self, s: np.ndarray) -> np.ndarray:
        """Outcomes inside any of the windows."""
        return np.any(np.abs(s[None, :] - self.centers[:, None]) <= self.half_widths[:, None], axis=0)

    def acceptance(self, s: np.ndarray, n_rows: int) -> np.ndarray:
        """Indicator ``A[n, g]``: outcome ``s[g]`` accepted when heralding ``n``."""
        if self.centers.size == 1:
            c = np.repeat(self.centers, n_rows)
            h = np.repeat(self.half_widths, n_rows)
        elif self.centers.size >= n_rows:
            c, h = self.centers[:n_rows], self.half_widths[:n_rows]
        else:
            raise ValueError(f"window has {self.centers.size} centres for {n_rows} photon numbers")
        return (np.abs(s[None, :] - c[:, None]) <= h[:, None]).astype(float)

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "half_widths": self.half_widths.tolist()}


@dataclass
class ConfidenceReport:
    prior: PriorDistribution
    c_values: np.ndarray
    window: Optional[Window] = None
    acceptance_fraction: Optional[np.ndarray] = None
    # windowed variant counting rejected outcomes as one extra outcome
    c_values_with_rejection: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        d = {"prior": self.prior.to_dict(), "c_values": self.c_values.tolist()}
        if self.window is not None:
            d["window"] = self.window.to_dict()
            d["acceptance_fraction"] = self.acceptance_fraction.tolist()
            d["c_values_with_rejection"] = self.c_values_with_rejection.tolist()
        return d


def _safe_div(num, den):
    ok = den > 0
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def confidence(table: PovmTable, prior: PriorDistribution, window: Optional[Window] = None) -> ConfidenceReport:
    """Confidence ``C_n = integral p(n|s) p(s|n) ds``.

    ``p(s|n)`` is taken as the row normalized over the grid, so rows that
    lose mass off the grid (or are not normalized at all) are treated as
    conditional densities; for unit-mass rows this is
    ``integral p(s|n)^2 p(n) / sum_k p(s|k) p(k) ds``.

    With a window, ``C_n`` counts only outcomes accepted by the window
    around peak ``n`` (a single-interval window applies to every ``n``) and
    renormalizes ``p(s|n)`` over that region:
    ``C_n = integral_A p(n|s) p(s|n) ds / integral_A p(s|n) ds``.
    The report also carries the variant that keeps rejected outcomes as
    one extra, uninformative outcome.
    """
    grid = table.grid
    joint = _joint(table, prior)
    rows = table.theta[: prior.support + 1]
    evidence = joint.sum(axis=0)
    post = _safe_div(joint, evidence[None, :])
    integrand = post * rows
    row_mass = grid.integrate(rows)
    if window is None:
        return ConfidenceReport(prior, np.clip(_safe_div(grid.integrate(integrand), row_mass), 0.0, 1.0))

    accepted = window.acceptance(grid.points, prior.support + 1)
    kept = grid.integrate(rows * accepted)
    c = np.clip(_safe_div(grid.integrate(integrand * accepted), kept), 0.0, 1.0)
    frac = np.clip(_safe_div(kept, row_mass), 0.0, 1.0)
    # rejection as an outcome: P(reject_n | k) for every k, then Bayes on it
    miss = row_mass[None, :] - grid.integrate(rows[None, :, :] * accepted[:, None, :])
    miss = np.maximum(miss, 0.0)
    own = np.diagonal(miss)
    reject_post = _safe_div(prior.weights * own, miss @ prior.weights)
    c_rej = np.clip(_safe_div(grid.integrate(integrand * accepted) + reject_post * own, row_mass), 0.0, 1.0)
    return ConfidenceReport(prior, c, window, frac, c_rej)


def confidence_flat(table: PovmTable, n_max: Optional[int] = None) -> np.ndarray:
    """Flat-prior confidence in its direct form
    ``integral p(s|n)^2 / sum_k p(s|k) ds``, rows normalized over the grid."""
    top = table.n_max if n_max is None else n_max
    rows = table.theta[: top + 1]
    num = table.grid.integrate(_safe_div(rows**2, rows.sum(axis=0)[None, :]))
    return _safe_div(num, table.grid.integrate(rows))


def peak_center_confidence(table: PovmTable, prior: PriorDistribution, centers: Sequence[float]) -> np.ndarray:
    """``p(n | s = centers[n])``: the zero-width-window limit of windowed confidence."""
    s = table.grid.points
    rows = table.theta[: prior.support + 1]
    out = np.zeros(prior.support + 1)
    for n, c in enumerate(np.asarray(centers, dtype=float)[: prior.support + 1]):
        at = np.array([np.interp(c, s, r) for r in rows]) * prior.weights
        tot = at.sum()
        out[n] = at[n] / tot if tot > 0 else 0.0
    return out


def confidence_vs_thermal_parameter(table: PovmTable, lambda_sq_values: Sequence[float], n_max: Optional[int] = None) -> np.ndarray:
    """Matrix ``C[i, n]`` of confidences under thermal priors ``lambda_sq_values[i]``."""
    top = table.n_max if n_max is None else n_max
    return np.array([confidence(table, PriorDistribution.thermal(l2, top)).c_values for l2 in lambda_sq_values])
