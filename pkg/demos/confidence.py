"""How much a click tells you about the photon number.

Confidence is the probability that the inferred photon number is right,
averaged over outcomes. It depends on the prior: a thermal source with
small mean photon number makes high counts unlikely a priori, so the same
outcome argues less strongly for them. Post-selecting on a window around
each peak trades acceptance for confidence.
"""

import numpy as np

from pnrtomo import GaussianMixturePovm, OutcomeGrid, PriorDistribution, confidence, mixture_to_table
from pnrtomo.inference import Window, confidence_vs_thermal_parameter, posterior

model = GaussianMixturePovm.binomial(np.arange(9.0), 0.9, 0.2)
grid = OutcomeGrid(-1.5, 9.5, 2048)
table = mixture_to_table(model, grid)

flat = confidence(table, PriorDistribution.flat(8))
# the top row has no competitor above it, so its confidence turns back up
print("flat prior:     ", np.round(flat.c_values, 3))
thermal = confidence(table, PriorDistribution.thermal(0.1, 8))
print("thermal (0.1):  ", np.round(thermal.c_values, 3))

win = confidence(table, PriorDistribution.flat(8), Window.around_peaks(model, 0.2))
print("windowed +-0.2: ", np.round(win.c_values, 3))
print("acceptance:     ", np.round(win.acceptance_fraction, 3))

# between peaks 1 and 2, the thermal prior pulls the posterior towards 1
s = grid.points
mid = np.argmin(np.abs(s - 1.5))
for prior in (PriorDistribution.flat(8), PriorDistribution.thermal(0.1, 8)):
    p = posterior(table, prior).values[:, mid]
    print(f"{prior.kind:>8}: p(1|s=1.5)={p[1]:.3f}  p(2|s=1.5)={p[2]:.3f}")

sweep = confidence_vs_thermal_parameter(table, [0.05, 0.3, 0.9], n_max=3)
print("C_0..C_3 vs thermal lambda^2 (first column):")
print(np.round(sweep, 3))
