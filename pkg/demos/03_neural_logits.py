"""Replacing exact log-odds with a trained ReLU network.

A small MLP learns the log-odds of each cell against the remainder on the
window [-R, R].  Its sup error eta bounds how far the mixture can drift:
densities stay within a factor e^(2 eta), and on the window the stepwise
KL moves by at most 2 eta.  Outside the window the network sees a clipped
feature, which costs an extra tail term.
"""

import os
import tempfile

from gmdiff.divergence_lab import stability_certificate, stepwise_kl, window_tail_term
from gmdiff.mixture_models import MixtureDensity, build_partition, infeasible_mixture
from gmdiff.neural_logits import MLPConfig, load_checkpoint, neural_logit_source, save_checkpoint, train_logit_net
from gmdiff.ou_model import ProblemInstance

inst = ProblemInstance(rho=0.5, M=0.25, T=4)
spec = build_partition(32)
src = train_logit_net(inst, spec, MLPConfig(hidden_widths=(64, 64), steps=3000, seed=0))
print(f"n={spec.n}  R={spec.R:.4f}  measured eta={src.eta:.5f}")

nn, m0 = MixtureDensity(spec, src), infeasible_mixture(inst, spec)
rep = stability_certificate(inst, 1, nn, m0, src.eta, region="window")
print(f"log density ratio on the window in [{rep.min_log_ratio:+.5f}, {rep.max_log_ratio:+.5f}]"
      f"  (allowed +/- {2 * src.eta:.5f})")
print(f"on-window KL: network {rep.kl_a:.6f}  exact weights {rep.kl_b:.6f}")

full_nn, full_m0 = stepwise_kl(inst, 1, nn).value, stepwise_kl(inst, 1, m0).value
tail = window_tail_term(inst, 1, spec, src.eta)
print(f"full KL: network {full_nn:.6f}  exact weights {full_m0:.6f}  + 2 eta + tail = {full_m0 + 2 * src.eta + tail:.6f}")

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "net.txt")
    save_checkpoint(src.eval, path)
    with open(path) as fh:
        print("\ncheckpoint header:")
        for _ in range(5):
            print("  " + fh.readline().rstrip())
    back = neural_logit_source(load_checkpoint(path), inst, spec)
    print(f"reloaded eta={back.eta:.5f}")
