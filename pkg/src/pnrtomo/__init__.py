"""Detector tomography for continuous-output photon-number-resolving detectors.

Coherent-probe trace data are reduced to a scalar score by PCA, turned into
outcome densities by kernel estimation, and fitted with a Gaussian-mixture
POVM by expectation-maximization. The fitted POVM feeds efficiency
estimation and photon-number confidence calculations.
"""

__version__ = "0.1.0"

from .density import DensityEstimate, OutcomeGrid, estimate_density, select_bandwidth
from .inference import (
    ConfidenceReport,
    PriorDistribution,
    Window,
    confidence,
    estimate_efficiency,
    posterior,
)
from .pca import PrincipalBasis, ScoreSet, TraceSet, fit_basis, project, reconstruct
from .povm import (
    CoherentProbe,
    DiagonalState,
    GaussianMixturePovm,
    PovmTable,
    born_probability,
    mixture_to_table,
    probe_density,
)
from .sim import DetectorGroundTruth, SimConfig, simulate_probe_ensemble, simulate_trace
from .tomo import EmConfig, ProbeEnsemble, em_fit, em_step, lsq_fit, reconstruction_error
from .calibration import (
    AttenuationFit,
    PowerPairSeries,
    apply_fresnel,
    chain_attenuations,
    fit_attenuation,
    marginalize_povm,
)
