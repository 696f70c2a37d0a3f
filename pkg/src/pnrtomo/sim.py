"""Synthetic detector traces with a known ground-truth response.

The detector model is phenomenological: a detected photon count ``m``
produces a pulse whose amplitude is Gaussian around ``peak_positions[m]``,
plus a second waveform whose weight grows with ``m`` (mimicking the longer
thermal recovery of larger pulses), plus white noise. Input photon numbers
are thinned binomially by the detection efficiency.

The white-noise/Gaussian-amplitude model is a modelling choice; no
particular detector noise spectrum is implied.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .pca import TraceSet

DEFAULT_N_SIM = 20


class TruncationOverflowError(ValueError):
    """Input photon number beyond the simulator's peak table."""


def pulse_shapes(samples_per_trace: int, rise: float | None = None, decay: float | None = None):
    """Default unit-norm pulse and tail waveforms.

    The pulse is a fast-rise exponential decay starting after a short
    pre-trigger baseline. The tail is the derivative of the pulse with
    respect to its decay time, orthogonalized against the pulse, so that
    adding it lengthens the pulse.
    """
    if samples_per_trace < 2:
        raise ValueError("samples_per_trace must be >= 2")
    m = samples_per_trace
    decay = decay if decay is not None else max(m / 6.0, 1.0)
    rise = rise if rise is not None else max(m / 80.0, 0.25)
    t = np.arange(m) - m // 16
    tp = np.clip(t, 0, None).astype(float)
    pulse = np.where(t >= 0, np.exp(-tp / decay) - np.exp(-tp / rise), 0.0)
    tail = np.where(t >= 0, tp / decay**2 * np.exp(-tp / decay), 0.0)
    if not np.any(pulse):
        pulse = np.zeros(m)
        pulse[-1] = 1.0
    pulse = pulse / np.linalg.norm(pulse)
    tail = tail - (tail @ pulse) * pulse
    nrm = np.linalg.norm(tail)
    if nrm < 1e-12:
        tail = np.zeros(m)
        tail[0] = 1.0
        tail -= (tail @ pulse) * pulse
        nrm = np.linalg.norm(tail)
    return pulse, tail / nrm


@dataclass
class DetectorGroundTruth:
    """Known detector response used to generate and validate synthetic data.

    ``peak_positions[m]``, ``peak_widths[m]`` and ``tail_weights[m]`` describe
    the response to ``m`` detected photons. ``saturation_scale`` selects a
    ``scale * tanh(a / scale)`` soft clip on the amplitude; ``None`` keeps the
    response linear.
    """

    efficiency: float
    peak_positions: np.ndarray
    peak_widths: np.ndarray
    pulse_shape: np.ndarray
    tail_shape: np.ndarray
    noise_sigma: float
    tail_weights: Optional[np.ndarray] = None
    saturation_scale: Optional[float] = None

    def __post_init__(self):
        self.peak_positions = np.asarray(self.peak_positions, dtype=float)
        self.peak_widths = np.asarray(self.peak_widths, dtype=float)
        self.pulse_shape = np.asarray(self.pulse_shape, dtype=float)
        self.tail_shape = np.asarray(self.tail_shape, dtype=float)
        if self.tail_weights is None:
            self.tail_weights = np.zeros_like(self.peak_positions)
        self.tail_weights = np.asarray(self.tail_weights, dtype=float)
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        k = self.peak_positions.size
        if self.peak_widths.shape != (k,) or self.tail_weights.shape != (k,):
            raise ValueError("peak_positions, peak_widths and tail_weights must have equal length")
        if np.any(self.peak_widths < 0):
            raise ValueError("peak widths must be non-negative")
        if np.any(np.diff(self.peak_positions) <= 0):
            raise ValueError("peak_positions must be strictly increasing")
        if self.pulse_shape.shape != self.tail_shape.shape or self.pulse_shape.size < 2:
            raise ValueError("pulse_shape and tail_shape must have equal length >= 2")
        for name, w in (("pulse_shape", self.pulse_shape), ("tail_shape", self.tail_shape)):
            if abs(np.linalg.norm(w) - 1.0) > 1e-9:
                raise ValueError(f"{name} must have unit L2 norm")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.saturation_scale is not None and self.saturation_scale <= 0:
            raise ValueError("saturation_scale must be positive")

    @property
    def n_sim(self) -> int:
        return self.peak_positions.size - 1

    @property
    def samples_per_trace(self) -> int:
        return self.pulse_shape.size

    def saturation(self, amplitude):
        if self.saturation_scale is None:
            return amplitude
        c = self.saturation_scale
        return c * np.tanh(np.asarray(amplitude) / c)

    @classmethod
    def default(
        cls,
        samples_per_trace: int = 64,
        efficiency: float = 0.9,
        spacing: float = 1.0,
        width: float = 0.15,
        noise_sigma: float = 0.01,
        tail_gain: float = 0.1,
        n_sim: int = DEFAULT_N_SIM,
        saturation_scale: Optional[float] = None,
    ) -> "DetectorGroundTruth":
        """Evenly spaced peaks of constant width, tail weight linear in count."""
        pulse, tail = pulse_shapes(samples_per_trace)
        m = np.arange(n_sim + 1, dtype=float)
        return cls(
            efficiency=efficiency,
            peak_positions=spacing * m,
            peak_widths=np.full(n_sim + 1, width),
            pulse_shape=pulse,
            tail_shape=tail,
            noise_sigma=noise_sigma,
            tail_weights=tail_gain * spacing * m,
            saturation_scale=saturation_scale,
        )

    def to_dict(self) -> dict:
        return {
            "efficiency": self.efficiency,
            "peak_positions": self.peak_positions.tolist(),
            "peak_widths": self.peak_widths.tolist(),
            "pulse_shape": self.pulse_shape.tolist(),
            "tail_shape": self.tail_shape.tolist(),
            "noise_sigma": self.noise_sigma,
            "tail_weights": self.tail_weights.tolist(),
            "saturation_scale": self.saturation_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorGroundTruth":
        return cls(**d)


@dataclass
class SimConfig:
    """Probe amplitudes ``|alpha_k|`` (not energies) and run sizes."""

    probe_amplitudes: Sequence[float]
    trials_per_probe: int
    samples_per_trace: int
    rng_seed: int = 0

    def __post_init__(self):
        amps = np.asarray(self.probe_amplitudes, dtype=float)
        if amps.ndim != 1 or amps.size == 0 or np.any(amps < 0) or not np.all(np.isfinite(amps)):
            raise ValueError("probe_amplitudes must be a non-empty list of non-negative reals")
        if int(self.trials_per_probe) < 1:
            raise ValueError("trials_per_probe must be >= 1")
        if int(self.samples_per_trace) < 2:
            raise ValueError("samples_per_trace must be >= 2")
        self.probe_amplitudes = amps
        self.trials_per_probe = int(self.trials_per_probe)
        self.samples_per_trace = int(self.samples_per_trace)
        self.rng_seed = int(self.rng_seed)

    @property
    def alpha_sq(self) -> np.ndarray:
        return self.probe_amplitudes**2

    @classmethod
    def from_alpha_sq(cls, alpha_sq, trials_per_probe, samples_per_trace, rng_seed=0) -> "SimConfig":
        return cls(np.sqrt(np.asarray(alpha_sq, dtype=float)), trials_per_probe, samples_per_trace, rng_seed)

    def to_dict(self) -> dict:
        return {
            "probe_amplitudes": self.probe_amplitudes.tolist(),
            "trials_per_probe": self.trials_per_probe,
            "samples_per_trace": self.samples_per_trace,
            "rng_seed": self.rng_seed,
        }


@dataclass
class SimulatedEnsemble:
    traces: TraceSet
    alpha_sq: np.ndarray
    photon_numbers: np.ndarray = field(repr=False)
    detected_counts: np.ndarray = field(repr=False)


def _check_overflow(n, truth):
    top = int(np.max(n, initial=0))
    if top > truth.n_sim:
        raise TruncationOverflowError(f"input photon number {top} exceeds simulator truncation n_sim={truth.n_sim}")


def _render(counts: np.ndarray, truth: DetectorGroundTruth, rng: np.random.Generator) -> np.ndarray:
    amp = rng.normal(truth.peak_positions[counts], truth.peak_widths[counts])
    traces = np.multiply.outer(truth.saturation(amp), truth.pulse_shape)
    traces += np.multiply.outer(truth.tail_weights[counts], truth.tail_shape)
    if truth.noise_sigma > 0:
        traces += rng.normal(0.0, truth.noise_sigma, size=traces.shape)
    return traces


def simulate_trace(n_input: int, truth: DetectorGroundTruth, rng: np.random.Generator, return_count: bool = False):
    """One detector trace for ``n_input`` photons incident on the detector.

    Returns the trace, or ``(trace, detected_count)`` with ``return_count``.
    """
    if n_input < 0:
        raise ValueError("n_input must be non-negative")
    _check_overflow(n_input, truth)
    m = rng.binomial(n_input, truth.efficiency)
    trace = _render(np.array([m]), truth, rng)[0]
    return (trace, int(m)) if return_count else trace


def _simulate_probe(alpha_sq, trials, truth, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n = rng.poisson(alpha_sq, size=trials)
    _check_overflow(n, truth)
    m = rng.binomial(n, truth.efficiency)
    return _render(m, truth, rng), n, m


def simulate_probe_ensemble(config: SimConfig, truth: DetectorGroundTruth, threads: int = 1) -> SimulatedEnsemble:
    """Traces for every probe in ``config``, grouped by probe index.

    Each probe draws from its own child of the seeded generator, so the
    output is identical for any ``threads``.
    """
    if config.samples_per_trace != truth.samples_per_trace:
        raise ValueError(
            f"config asks for {config.samples_per_trace} samples but the truth pulse has {truth.samples_per_trace}"
        )
    alpha_sq = config.alpha_sq
    seeds = np.random.SeedSequence(config.rng_seed).spawn(alpha_sq.size)
    jobs = [(a, config.trials_per_probe, truth, s) for a, s in zip(alpha_sq, seeds)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda job: _simulate_probe(*job), jobs))
    else:
        parts = [_simulate_probe(*job) for job in jobs]
    data = np.concatenate([p[0] for p in parts])
    labels = np.repeat(np.arange(alpha_sq.size), config.trials_per_probe)
    return SimulatedEnsemble(
        TraceSet(data, labels),
        alpha_sq,
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )
