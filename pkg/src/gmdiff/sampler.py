"""Reverse chains: ancestral sampling, closed-form composition and path KL.

A chain runs ``X_T ~ N(0, 1)`` through reverse kernels ``t = T, ..., 1``;
each kernel sees ``(c, x_t)`` only through the step-t feature.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import kstest

from ._normal import LOG_SQRT_2PI, norm_logpdf
from ._quadrature import composite_legendre, gaussian_expectation, refined_breaks
from .divergence_lab import INNER_WIDTH, KLEstimate, pointwise_kl
from .mixture_models import MixtureDensity
from .ou_model import REFERENCE, Gaussian1D, feature

# Gauss-Hermite order for averaging over X_t | c
PATH_ORDER = 64


class ReverseChain:
    """``T`` reverse kernels, each ``"exact"`` or a :class:`MixtureDensity`.

    ``kernels[t - 1]`` is used at step ``t``.  A single kernel is reused at
    every step.
    """

    def __init__(self, inst, kernels="exact"):
        if isinstance(kernels, (str, MixtureDensity)):
            kernels = [kernels] * inst.T
        kernels = list(kernels)
        if len(kernels) != inst.T:
            raise ValueError(f"need {inst.T} kernels, got {len(kernels)}")
        for k in kernels:
            if not (k == "exact" or isinstance(k, MixtureDensity)):
                raise TypeError(f"unsupported kernel {k!r}")
        self.inst = inst
        self.kernels = kernels

    def kernel(self, t):
        self.inst.check_step(t)
        return self.kernels[t - 1]

    @property
    def is_exact(self):
        return all(isinstance(k, str) for k in self.kernels)

    def step(self, t, c, x_t, rng):
        """One reverse transition ``x_t -> x_{t-1}``."""
        z = feature(self.inst, t, c, x_t)
        k = self.kernel(t)
        if isinstance(k, str):
            return z + self.inst.sigma * rng.standard_normal(z.shape)
        return k.sample(z, rng)


def sample_predictor(chain, c, count, rng):
    """``count`` draws of ``X_0`` from the chain started at ``N(0, 1)``."""
    x = rng.standard_normal(int(count))
    for t in range(chain.inst.T, 0, -1):
        x = chain.step(t, c, x, rng)
    return x


def compose_exact_chain(inst, c):
    """Law of ``X_0`` under the exact chain, by the affine mean/variance recursion."""
    mean, var = 0.0, 1.0
    for t in range(inst.T, 0, -1):
        mean = inst.rho * mean + inst.sigma_sq * inst.signal(t) * c
        var = inst.rho ** 2 * var + inst.sigma_sq
    return Gaussian1D(mean, var)


@dataclass(frozen=True)
class PathKLReport:
    terminal: float
    stepwise: tuple
    output_kl: Optional[float] = None

    @property
    def path_total(self):
        return self.terminal + sum(self.stepwise)


def path_kl_report(inst, chain, c, order=PATH_ORDER, with_output=True):
    """Terminal and stepwise terms of the path KL for one context."""
    terminal = float(Gaussian1D(inst.rho ** inst.T * c, 1.0).kl(REFERENCE))
    steps = []
    for t in range(1, inst.T + 1):
        k = chain.kernel(t)
        if isinstance(k, str):
            steps.append(0.0)
            continue
        x, w = gaussian_expectation(inst.rho ** t * c, 1.0, order)
        steps.append(float(pointwise_kl(inst, k, feature(inst, t, c, x)) @ w))
    out = None
    if with_output and (chain.is_exact or inst.T <= 2):
        out = output_kl_small_T(inst, chain, c).value
    return PathKLReport(terminal, tuple(steps), out)


def _standard_normal_rule(order=16, panel=0.25, width=12.0):
    x, w = composite_legendre(np.arange(-width, width + panel / 2, panel), order)
    return x, w * np.exp(norm_logpdf(x))


def _mixture_rule(spec, log_alpha, order=16, width=12.0):
    """Nodes/weights for expectations under a fixed-weight component mixture."""
    lo = -spec.L - width * spec.sigma_tail
    breaks = refined_breaks(lo, -lo, (-spec.L, spec.L), spec.sigma_interior / 4.0, 0.25)
    x, w = composite_legendre(breaks, order)
    return x, w * np.exp(_fixed_mixture_logpdf(spec, log_alpha, x))


def _fixed_mixture_logpdf(spec, log_alpha, y):
    means, var = spec.component_means, spec.component_vars
    comp = -0.5 * (y[:, None] - means) ** 2 / var - 0.5 * np.log(var) - LOG_SQRT_2PI
    return logsumexp(log_alpha + comp, axis=-1)


def _averaged_log_weights(inst, t, c, mix, x, w):
    """``log E[alpha(Z_t)]`` with ``X_t`` integrated by the rule ``(x, w)``."""
    lw = mix.log_weights(feature(inst, t, c, x))
    return logsumexp(lw, b=w[:, None], axis=0)


def output_kl_small_T(inst, chain, c, order=16):
    """``KL(N(c, 1) || law of X_0)`` for one context.

    Exact chains use the closed-form composition.  Mixture chains with
    ``T <= 2`` use that the predictor is itself a component mixture whose
    weights are the kernel weights averaged over the law of ``X_1``.
    """
    target = Gaussian1D(float(c), 1.0)
    if chain.is_exact:
        return KLEstimate(float(target.kl(compose_exact_chain(inst, c))), 0.0, "quadrature", 0)
    if inst.T > 2 or any(isinstance(k, str) for k in chain.kernels):
        raise ValueError("direct output KL needs T <= 2 and mixture kernels at every step")
    x, w = _standard_normal_rule(order)
    count = x.size
    for t in range(inst.T, 0, -1):
        mix = chain.kernel(t)
        log_alpha = _averaged_log_weights(inst, t, c, mix, x, w)
        if t > 1:
            x, w = _mixture_rule(mix.spec, log_alpha, order)
            count += x.size
    spec = chain.kernel(1).spec
    breaks = refined_breaks(c - INNER_WIDTH, c + INNER_WIDTH, (-spec.L, spec.L), spec.sigma_interior / 4.0, 0.25)
    y, wy = composite_legendre(breaks, order)
    lf = target.logpdf(y)
    val = (np.exp(lf) * (lf - _fixed_mixture_logpdf(spec, log_alpha, y))) @ wy
    return KLEstimate(float(val), 0.0, "quadrature", int(count + y.size))


def ks_distance(samples, law):
    """Kolmogorov-Smirnov distance between samples and a Gaussian law."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        return math.nan
    return float(kstest(samples, law.cdf).statistic)
