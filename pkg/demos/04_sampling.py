"""Ancestral sampling and the path-space error budget.

Starting from N(0, 1) and applying every reverse step in turn gives the
predictor law of X_0.  With exact kernels that law is N(c(1 - rho^(2T)), 1),
so the only error is the terminal mismatch.  With mixture kernels the
stepwise KLs add up to a path total, which bounds the output KL.
"""

import numpy as np

from gmdiff.mixture_models import build_partition, infeasible_mixture
from gmdiff.ou_model import ProblemInstance
from gmdiff.sampler import ReverseChain, compose_exact_chain, ks_distance, path_kl_report, sample_predictor

rng = np.random.default_rng(7)
c = 0.2

inst = ProblemInstance(rho=0.8, M=2.0, T=5)
exact = ReverseChain(inst)
x = sample_predictor(exact, c, 200_000, rng)
law = compose_exact_chain(inst, c)
print(f"exact kernels: sample mean {x.mean():.5f} (law {law.mean:.5f}), KS {ks_distance(x, law):.4f}")
r = path_kl_report(inst, exact, c)
print(f"  path total {r.path_total:.3e}, output KL {r.output_kl:.3e}")

inst = ProblemInstance(rho=0.5, M=0.25, T=2)
law = compose_exact_chain(inst, c)
for n in (128, 1024):
    chain = ReverseChain(inst, infeasible_mixture(inst, build_partition(n)))
    r = path_kl_report(inst, chain, c)
    x = sample_predictor(chain, c, 100_000, rng)
    print(f"mixture n={n}: stepwise {', '.join(f'{s:.4f}' for s in r.stepwise)}"
          f"  path total {r.path_total:.4f}  output KL {r.output_kl:.4f}  KS {ks_distance(x, law):.4f}")
