"""Principal-component compression of detector traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DimensionError(ValueError):
    pass


@dataclass
class TraceSet:
    """Raw detector traces, one row per trial.

    Integer (e.g. 16-bit ADC) input is converted to float64.
    ``probe_labels`` optionally tags each row with its probe index.
    """

    data: np.ndarray
    probe_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1:
            raise DimensionError(f"traces must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("traces contain non-finite samples")
        self.data = data
        if self.probe_labels is not None:
            self.probe_labels = np.asarray(self.probe_labels)
            if self.probe_labels.shape != (data.shape[0],):
                raise DimensionError("probe_labels must have one entry per trace")

    @property
    def trial_count(self) -> int:
        return self.data.shape[0]

    @property
    def sample_count(self) -> int:
        return self.data.shape[1]


@dataclass
class PrincipalBasis:
    mean_trace: np.ndarray
    components: np.ndarray  # (n_components, sample_count), rows orthonormal
    variances: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


@dataclass
class ScoreSet:
    scores: np.ndarray  # (trials, components)
    probe_labels: Optional[np.ndarray] = field(default=None)

    def first(self) -> np.ndarray:
        return self.scores[:, 0]

    def by_probe(self, column: int = 0) -> dict:
        if self.probe_labels is None:
            raise ValueError("scores carry no probe labels")
        return {k: self.scores[self.probe_labels == k, column] for k in np.unique(self.probe_labels)}


def _fix_signs(components: np.ndarray, mean_trace: np.ndarray) -> np.ndarray:
    scale = max(np.abs(mean_trace).max(), 1.0)
    out = components.copy()
    for i, w in enumerate(out):
        dot = w @ mean_trace
        if abs(dot) > 1e-12 * scale * np.sqrt(mean_trace.size):
            flip = dot < 0
        else:
            flip = w[np.argmax(np.abs(w))] < 0
        if flip:
            out[i] = -w
    return out


def fit_basis(traces: TraceSet, n_components: int = 2) -> PrincipalBasis:
    """Principal components of the mean-subtracted trace matrix.

    Computed from the SVD of the centred data. Score variances use the
    unbiased ``1/(N-1)`` normalization (zero for a single trace). Each
    component is signed so its overlap with the mean trace is positive,
    or, for components orthogonal to the mean, so its largest entry is.
    """
    if not isinstance(traces, TraceSet):
        traces = TraceSet(traces)
    n, m = traces.data.shape
    if not 1 <= n_components <= min(n, m):
        raise DimensionError(f"n_components={n_components} outside [1, {min(n, m)}]")
    mean = traces.data.mean(axis=0)
    centred = traces.data - mean
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    components = _fix_signs(vt[:n_components], mean)
    variances = sv[:n_components] ** 2 / (n - 1) if n > 1 else np.zeros(n_components)
    return PrincipalBasis(mean, components, variances)


def project(traces: TraceSet, basis: PrincipalBasis) -> ScoreSet:
    """Scores ``<trace - mean_trace, w_j>`` for every trace and component."""
    if not isinstance(traces, TraceSet):
        traces = TraceSet(traces)
    if traces.sample_count != basis.mean_trace.size:
        raise DimensionError(f"traces have {traces.sample_count} samples, basis expects {basis.mean_trace.size}")
    return ScoreSet((traces.data - basis.mean_trace) @ basis.components.T, traces.probe_labels)


def reconstruct(scores: ScoreSet, basis: PrincipalBasis, k: Optional[int] = None) -> TraceSet:
    """Traces rebuilt from the first ``k`` components (all by default)."""
    if k is None:
        k = basis.n_components
    if not 0 <= k <= min(basis.n_components, scores.scores.shape[1]):
        raise DimensionError(f"k={k} outside [0, {basis.n_components}]")
    data = basis.mean_trace + scores.scores[:, :k] @ basis.components[:k]
    return TraceSet(data, scores.probe_labels)
