"""From raw traces to photon-number confidences.

A synthetic detector with 90% efficiency is probed with coherent pulses of
known energy. The traces go through the whole analysis chain:

1. PCA reduces each trace to a single score.
2. A kernel density estimate gives the outcome distribution per probe.
3. EM fits the Gaussian-mixture POVM.
4. The loss matrix is fitted with a binomial model to read off efficiency.
5. Confidences follow from the POVM under a flat prior.

Run with ``python demos/end_to_end.py``; takes about ten seconds.
"""

import numpy as np

from pnrtomo import (
    DetectorGroundTruth,
    EmConfig,
    OutcomeGrid,
    PriorDistribution,
    ProbeEnsemble,
    SimConfig,
    confidence,
    em_fit,
    estimate_density,
    estimate_efficiency,
    fit_basis,
    mixture_to_table,
    project,
    reconstruction_error,
    select_bandwidth,
    simulate_probe_ensemble,
)
from pnrtomo.pipeline import illuminated_rows
from pnrtomo.tomo import deconvolve_bandwidth, pooled_peak_widths

truth = DetectorGroundTruth.default(samples_per_trace=64, efficiency=0.9, width=0.15, n_sim=30)
alpha_sq = np.linspace(0.0, 8.0, 30)
sim = SimConfig.from_alpha_sq(alpha_sq, trials_per_probe=3000, samples_per_trace=64, rng_seed=5)
ens = simulate_probe_ensemble(sim, truth)
print(f"simulated {ens.traces.trial_count} traces of {ens.traces.sample_count} samples")

# a single component carries almost all the photon-number information
basis = fit_basis(ens.traces, 2)
print("explained variance of first two components:", np.round(basis.variances, 4))
scores = project(ens.traces, basis).by_probe(0)
sets = [scores[k] for k in range(alpha_sq.size)]

# one bandwidth for every probe, so the smoothing is a common convolution
grid = OutcomeGrid.covering(sets, 2048)
h = float(np.median([select_bandwidth(x, "isj") for x in sets]))
data = ProbeEnsemble.from_estimates(alpha_sq, [estimate_density(x, grid, h) for x in sets])
print(f"shared kernel bandwidth {h:.4f} score units")

n_max = 17
raw, diag = em_fit(data, EmConfig(n_max=n_max))
print(f"EM: {diag.iterations} iterations, converged={diag.converged}")
print(f"reconstruction error {reconstruction_error(data, mixture_to_table(raw, grid, check_coverage=False)):.4f}")

model = deconvolve_bandwidth(raw, h, floor=diag.sigma_floor)
spacing = np.diff(model.peak_means[:9])
print("peak spacings (0..8):", np.round(spacing, 4))
print("pooled peak widths (0..8):", np.round(pooled_peak_widths(model, diag.component_mass)[:9], 4))

rows = illuminated_rows(alpha_sq, n_max, 0.05)
eta, _ = estimate_efficiency(model, max_n=rows)
print(f"efficiency from rows 0..{rows}: {eta:.4f} (truth 0.9)")

table = mixture_to_table(model, grid, check_coverage=False)
c = confidence(table, PriorDistribution.flat(8)).c_values
for n, cn in enumerate(c):
    print(f"  C_{n} = {cn:.3f}")
