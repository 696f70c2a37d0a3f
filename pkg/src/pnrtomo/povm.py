"""POVM representations for phase-insensitive detectors and Born-rule evaluation.

A phase-insensitive detector has POVM elements diagonal in photon number,
so the whole measurement is a table of response densities ``theta_n(s)``,
one row per input photon number ``n``. Coherent probes weight these rows
with Poisson coefficients.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammaln

from .density import DensityEstimate, OutcomeGrid

DEFAULT_N_MAX = 17
TRUNCATION_THRESHOLD = 0.999
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class TruncationWarning(UserWarning):
    """Poisson mass beyond the model's photon-number truncation is significant."""


class GridCoverageError(ValueError):
    pass


def poisson_coeff(alpha_sq, n):
    """Poisson weight ``|alpha|^(2n) exp(-|alpha|^2) / n!``.

    Evaluated in log space; broadcasts over array arguments.
    """
    alpha_sq = np.asarray(alpha_sq, dtype=float)
    n = np.asarray(n)
    if np.any(n < 0):
        raise ValueError("photon number must be non-negative")
    if np.any(alpha_sq < 0):
        raise ValueError("alpha_sq must be non-negative")
    n = n.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_f = n * np.log(alpha_sq) - alpha_sq - gammaln(n + 1.0)
    # 0 * log(0) -> vacuum has unit weight on n = 0
    log_f = np.where(n == 0, -alpha_sq, log_f)
    out = np.exp(log_f)
    return out.item() if out.ndim == 0 else out


def poisson_matrix(alpha_sq, n_max: int) -> np.ndarray:
    """Matrix ``F[k, n]`` of Poisson weights for probes ``k`` and ``n <= n_max``."""
    a = np.atleast_1d(np.asarray(alpha_sq, dtype=float))
    return poisson_coeff(a[:, None], np.arange(n_max + 1)[None, :])


def gaussian_pdf(x, mean, sd):
    z = (x - mean) / sd
    return np.exp(-0.5 * z * z) / (sd * _SQRT_2PI)


@dataclass(frozen=True)
class CoherentProbe:
    alpha_sq: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha_sq) and self.alpha_sq >= 0):
            raise ValueError(f"alpha_sq must be finite and non-negative, got {self.alpha_sq}")


@dataclass(frozen=True)
class DiagonalState:
    """Photon-number distribution of a phase-insensitive state."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def fock(cls, n: int, n_max: int | None = None) -> "DiagonalState":
        w = np.zeros((n_max if n_max is not None else n) + 1)
        w[n] = 1.0
        return cls(w)


@dataclass(frozen=True)
class PovmTable:
    """Grid-discretized POVM: ``theta[n, g]`` is the response density to
    ``n`` photons at grid point ``g``."""

    grid: OutcomeGrid
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] != self.grid.n_points:
            raise ValueError(f"theta shape {theta.shape} does not match grid of {self.grid.n_points} points")
        object.__setattr__(self, "theta", theta)

    @property
    def n_max(self) -> int:
        return self.theta.shape[0] - 1

    def row_integrals(self) -> np.ndarray:
        return self.grid.integrate(self.theta)

    def is_physical(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.theta >= 0) and np.all(self.row_integrals() <= 1.0 + tol))


@dataclass(frozen=True)
class GaussianMixturePovm:
    """Gaussian-mixture POVM with peak positions shared across photon numbers.

    Row ``n`` of the POVM is ``sum_{j<=n} weights[n, j] N(s | peak_means[j], widths[n, j])``.
    ``weights`` and ``widths`` are stored as square lower-triangular arrays;
    entries above the diagonal are zero and ignored.
    """

    peak_means: np.ndarray
    weights: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.peak_means, dtype=float)
        beta = np.tril(np.asarray(self.weights, dtype=float))
        sigma = np.tril(np.asarray(self.widths, dtype=float))
        k = mu.size
        if beta.shape != (k, k) or sigma.shape != (k, k):
            raise ValueError("weights and widths must be square with side len(peak_means)")
        lower = np.tril(np.ones((k, k), dtype=bool))
        if np.any(beta < 0) or np.any(np.abs(beta.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each weight row must be non-negative and sum to 1")
        if np.any(sigma[lower] <= 0) or not np.all(np.isfinite(sigma[lower])):
            raise ValueError("widths must be positive")
        if np.any(np.diff(mu) <= 0):
            raise ValueError("peak_means must be strictly increasing")
        object.__setattr__(self, "peak_means", mu)
        object.__setattr__(self, "weights", beta)
        object.__setattr__(self, "widths", sigma)

    @property
    def n_max(self) -> int:
        return self.peak_means.size - 1

    @classmethod
    def binomial(cls, peak_means, efficiency: float, widths) -> "GaussianMixturePovm":
        """Model whose weights follow loss statistics at ``efficiency``.

        ``widths`` may be a scalar, a per-peak vector, or a full matrix.
        """
        mu = np.asarray(peak_means, dtype=float)
        k = mu.size
        beta = binomial_weights(k - 1, efficiency)
        w = np.asarray(widths, dtype=float)
        if w.ndim == 0:
            w = np.full((k, k), float(w))
        elif w.ndim == 1:
            w = np.broadcast_to(w[None, :], (k, k)).copy()
        return cls(mu, beta, np.tril(w))

    def to_dict(self) -> dict:
        lower = [list(range(n + 1)) for n in range(self.n_max + 1)]
        return {
            "n_max": self.n_max,
            "peak_means": self.peak_means.tolist(),
            "weights": [[float(self.weights[n, j]) for j in js] for n, js in enumerate(lower)],
            "widths": [[float(self.widths[n, j]) for j in js] for n, js in enumerate(lower)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixturePovm":
        k = int(d["n_max"]) + 1
        beta = np.zeros((k, k))
        sigma = np.zeros((k, k))
        for n in range(k):
            beta[n, : n + 1] = d["weights"][n]
            sigma[n, : n + 1] = d["widths"][n]
        return cls(np.asarray(d["peak_means"], dtype=float), beta, sigma)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixturePovm":
        return cls.from_dict(json.loads(text))


def binomial_weights(n_max: int, efficiency: float) -> np.ndarray:
    """Lower-triangular ``B[n, j] = C(n, j) eta^j (1-eta)^(n-j)``."""
    n = np.arange(n_max + 1)[:, None]
    j = np.arange(n_max + 1)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_c = gammaln(n + 1.0) - gammaln(j + 1.0) - gammaln(np.maximum(n - j, 0) + 1.0)
        b = np.exp(log_c) * np.float_power(efficiency, j) * np.float_power(1.0 - efficiency, n - j)
    b = np.where(j <= n, b, 0.0)
    return np.nan_to_num(b)


def component_densities(model: GaussianMixturePovm, points: np.ndarray) -> np.ndarray:
    """Array ``G[n, j, g] = N(points[g] | mu_j, sigma_nj)``, zero for ``j > n``."""
    k = model.n_max + 1
    lower = np.tril(np.ones((k, k), dtype=bool))
    safe = np.where(lower, model.widths, 1.0)
    g = gaussian_pdf(points[None, None, :], model.peak_means[None, :, None], safe[:, :, None])
    return np.where(lower[:, :, None], g, 0.0)


def mixture_to_table(model: GaussianMixturePovm, grid: OutcomeGrid, check_coverage: bool = True) -> PovmTable:
    """Tabulate the mixture model on ``grid``.

    Components whose trapezoidal mass on the grid exceeds one (possible only
    for widths comparable to the grid spacing) are scaled back to unit mass.

    Raises
    ------
    GridCoverageError
        If the grid does not cover every peak mean +/- 6 times the widest width.
    """
    if check_coverage:
        k = model.n_max + 1
        reach = 6.0 * model.widths[np.tril(np.ones((k, k), dtype=bool))].max()
        if model.peak_means[0] - reach < grid.s_min or model.peak_means[-1] + reach > grid.s_max:
            raise GridCoverageError(
                f"grid [{grid.s_min:.4g}, {grid.s_max:.4g}] does not cover peaks "
                f"[{model.peak_means[0]:.4g}, {model.peak_means[-1]:.4g}] +/- {reach:.4g}"
            )
    g = component_densities(model, grid.points)
    # a component narrower than about one grid spacing can alias to a
    # trapezoidal mass above one; cap it so rows never exceed unit mass
    mass = grid.integrate(g)
    g = g / np.maximum(mass, 1.0)[:, :, None]
    theta = np.einsum("nj,njg->ng", model.weights, g)
    return PovmTable(grid, theta)


def _as_table(model_or_table, grid: OutcomeGrid | None) -> PovmTable:
    if isinstance(model_or_table, PovmTable):
        if grid is not None and grid != model_or_table.grid:
            raise ValueError("table grid differs from the requested grid")
        return model_or_table
    if grid is None:
        raise ValueError("a grid is required to evaluate a mixture model")
    return mixture_to_table(model_or_table, grid)


def probe_densities(model_or_table, alpha_sq, grid: OutcomeGrid | None = None) -> np.ndarray:
    """Outcome densities ``p(s | alpha_k)`` for many probes, shape (probes, grid)."""
    table = _as_table(model_or_table, grid)
    return poisson_matrix(alpha_sq, table.n_max) @ table.theta


def probe_density(
    model_or_table: Union[GaussianMixturePovm, PovmTable],
    probe: CoherentProbe | float,
    grid: OutcomeGrid | None = None,
) -> DensityEstimate:
    """Outcome density for a coherent probe, ``sum_n F(alpha, n) theta_n(s)``.

    If the Poisson mass retained by the truncation is below 0.999 a
    :class:`TruncationWarning` is issued and recorded on the result.
    """
    alpha_sq = probe.alpha_sq if isinstance(probe, CoherentProbe) else float(probe)
    table = _as_table(model_or_table, grid)
    f = poisson_matrix(alpha_sq, table.n_max)[0]
    notes = []
    kept = float(f.sum())
    if kept < TRUNCATION_THRESHOLD:
        msg = f"Poisson mass within n <= {table.n_max} is {kept:.6f} for alpha_sq={alpha_sq:g}"
        warnings.warn(msg, TruncationWarning, stacklevel=2)
        notes.append(msg)
    return DensityEstimate(table.grid, f @ table.theta, warnings=notes)


def born_probability(table: PovmTable, state: DiagonalState) -> DensityEstimate:
    """Outcome density ``sum_n p(n) theta_n(s)`` for a diagonal state."""
    w = state.weights
    if w.size > table.n_max + 1:
        raise ValueError(f"state has {w.size} photon numbers but the table stops at n={table.n_max}")
    return DensityEstimate(table.grid, w @ table.theta[: w.size])
