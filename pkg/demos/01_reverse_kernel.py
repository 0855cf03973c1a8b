"""Reverse kernel of the Gaussian toy model.

The forward chain shrinks X_0 = c + noise towards zero.  Conditioning on
(c, X_t) gives a Gaussian reverse step whose mean depends on a single
scalar feature.  Here we check it against brute-force Bayes and watch the
terminal mismatch shrink with the horizon.
"""

import numpy as np

from gmdiff.ou_model import (
    ProblemInstance, bayes_posterior_moments, feature, terminal_mismatch, true_reverse_kernel,
)

inst = ProblemInstance(rho=0.6, M=2.0, T=3)
print(f"rho={inst.rho}  sigma^2={inst.sigma_sq:.4f}")

for t in (1, 2, 3):
    c, x = 1.2, -0.4
    k = true_reverse_kernel(inst, t, c, x)
    m, v = bayes_posterior_moments(inst, t, c, x)
    print(f"t={t}  feature={feature(inst, t, c, x):+.6f}  closed form N({k.mean:+.6f}, {k.var:.6f})"
          f"  brute force N({m:+.6f}, {v:.6f})")

# the mismatch between the forward marginal at time T and N(0, 1)
print("\nterminal mismatch, rho=0.8, M=2")
for T in range(1, 9):
    print(f"  T={T}  {terminal_mismatch(ProblemInstance(0.8, 2.0, T)):.10f}")
print(f"  log ratio per step: {np.log(terminal_mismatch(ProblemInstance(0.8, 2.0, 2)) / terminal_mismatch(ProblemInstance(0.8, 2.0, 1))):.6f}"
      f"  (2 log rho = {2 * np.log(0.8):.6f})")
