"""One entropic proximal step on a two-state chain, exact versus frozen-metric surrogate."""

import numpy as np

from labelflow import MarkovGeometry, prox_markov_full, prox_markov_surrogate

geom = MarkovGeometry(np.array([[-1.0, 2.0], [1.0, -2.0]]))
lam_hat = np.array([0.3, 0.7])

print(f"stationary law {geom.sigma}")
for tau in (0.1, 0.05, 0.025, 0.0125):
    full = prox_markov_full(lam_hat, geom, tau).lambda_new
    frozen = prox_markov_surrogate(lam_hat, full, geom, tau).lambda_new
    print(f"tau={tau:<7} exact={full[0]:.10f} surrogate gap={np.abs(frozen - full).max():.2e}")
