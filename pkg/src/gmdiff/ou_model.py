"""Gaussian target under Ornstein-Uhlenbeck noising.

The context is ``C ~ Unif[-M, M]``, the target is ``N(c, 1)`` and every
forward step is ``x -> N(rho * x, 1 - rho**2)``.  Everything in this module
is closed form; the only numerical routine is :func:`bayes_posterior_moments`,
a brute-force Bayes rule used to cross-check the reverse kernel.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._normal import norm_logpdf
from ._quadrature import context_rule

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ProblemInstance:
    """Contraction ``rho``, context half-width ``M`` and horizon ``T``."""

    rho: float
    M: float
    T: int

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.M >= 0.0:
            raise ValueError(f"M must be non-negative, got {self.M}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be an integer >= 1, got {self.T}")

    @property
    def sigma_sq(self):
        return 1.0 - self.rho ** 2

    @property
    def sigma(self):
        return math.sqrt(self.sigma_sq)

    def signal(self, t):
        """Context loading of the step-t feature, ``rho**(t-1)``."""
        return self.rho ** (t - 1)

    def check_step(self, t, lo=1, hi=None):
        hi = self.T if hi is None else hi
        if int(t) != t or not lo <= t <= hi:
            raise ValueError(f"step {t} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class Gaussian1D:
    mean: float
    var: float

    def __post_init__(self):
        if not np.all(np.asarray(self.var) > 0):
            raise ValueError("variance must be positive")

    @property
    def std(self):
        return np.sqrt(self.var)

    def logpdf(self, x):
        return norm_logpdf(x, self.mean, self.var)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        from scipy.special import ndtr
        return ndtr((np.asarray(x, dtype=float) - self.mean) / self.std)

    def sample(self, rng, size=None):
        """Draws of shape ``size``, by default one per entry of the broadcast parameters."""
        if size is None:
            size = np.broadcast(np.asarray(self.mean), np.asarray(self.var)).shape
        return self.mean + self.std * rng.standard_normal(size)

    def kl(self, other):
        """KL(self || other) in nats."""
        return 0.5 * (np.log(other.var / self.var)
                      + (self.var + (self.mean - other.mean) ** 2) / other.var - 1.0)


REFERENCE = Gaussian1D(0.0, 1.0)


@dataclass(frozen=True)
class FeatureLawMoments:
    e_abs_y_minus_z: float
    e_sq_y_minus_z: float
    e_y_sq: float
    e_z_4: float


def forward_kernel(inst, x_t):
    """One OU step ``q_t(. | x_t)``."""
    return Gaussian1D(inst.rho * np.asarray(x_t, dtype=float), inst.sigma_sq)


def forward_marginal(inst, t, c):
    """Law of ``X_t`` given ``C = c``; unit variance at every step."""
    inst.check_step(t, lo=0)
    return Gaussian1D(inst.rho ** t * np.asarray(c, dtype=float), 1.0)


def feature(inst, t, c, x_t):
    """Sufficient statistic ``z = rho * x_t + sigma^2 rho^(t-1) c``."""
    inst.check_step(t)
    return inst.rho * np.asarray(x_t, dtype=float) + inst.sigma_sq * inst.signal(t) * np.asarray(c, dtype=float)


def true_reverse_kernel(inst, t, c, x_t):
    """Reverse kernel ``N(feature(c, x_t), sigma^2)``."""
    return Gaussian1D(feature(inst, t, c, x_t), inst.sigma_sq)


def feature_law(inst, t, c):
    """Law of ``Z_t`` given ``C = c``."""
    inst.check_step(t)
    return Gaussian1D(inst.signal(t) * np.asarray(c, dtype=float), inst.rho ** 2)


def feature_density(inst, t, z, order=64):
    """Unconditional density of ``Z_t``: the context average of :func:`feature_law`."""
    inst.check_step(t)
    z = np.asarray(z, dtype=float)
    c, w = context_rule(inst.M, order)
    means = inst.signal(t) * c
    return np.exp(norm_logpdf(z[..., None], means, inst.rho ** 2)) @ w


def sample_feature(inst, t, rng, size):
    inst.check_step(t)
    c = rng.uniform(-inst.M, inst.M, size)
    return feature_law(inst, t, c).sample(rng)


def feature_law_moments(inst, t):
    """Moments of the joint law of ``(Y, Z) = (X_{t-1}, Z_t)``.

    ``e_z_4`` is the uniform-in-context bound on ``E[Z_t^4]``.
    """
    inst.check_step(t)
    m = inst.signal(t) * inst.M
    return FeatureLawMoments(
        e_abs_y_minus_z=inst.sigma * SQRT_2_OVER_PI,
        e_sq_y_minus_z=inst.sigma_sq,
        e_y_sq=m ** 2 / 3.0 + 1.0,
        e_z_4=m ** 4 + 6.0 * inst.rho ** 2 * m ** 2 + 3.0 * inst.rho ** 4,
    )


def context_mismatch(inst, c):
    """Pointwise terminal KL ``KL(q_T(.|c) || N(0, 1))``."""
    return 0.5 * inst.rho ** (2 * inst.T) * np.asarray(c, dtype=float) ** 2


def terminal_mismatch(inst):
    """Context-averaged terminal KL, ``rho^(2T) M^2 / 6``."""
    return inst.rho ** (2 * inst.T) * inst.M ** 2 / 6.0


def oscillation_bounds(inst, s, x, x_next):
    """Witnesses ``(a_{s-1}(x), b_s(x, x_next))`` for the local log-variation bounds.

    Both use unit-length intervals around ``x``.
    """
    inst.check_step(s, lo=0, hi=inst.T - 1)
    x = np.asarray(x, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    rho = inst.rho
    a = (np.abs(x) + rho ** s * inst.M + 0.25) / 2.0
    b = (rho * np.abs(x_next - rho * x) + rho ** 2 / 4.0) / (2.0 * inst.sigma_sq)
    return a, b


def expected_transition_oscillation(inst):
    """E[b_s(X_s, X_{s+1})] under the forward joint law."""
    return inst.rho / (2.0 * inst.sigma) * SQRT_2_OVER_PI + inst.rho ** 2 / (8.0 * inst.sigma_sq)


def reverse_log_variation(inst, y, z):
    """Log-variation of ``N(z, sigma^2)`` over ``[y - 1/2, y + 1/2]``."""
    return (np.abs(np.asarray(y) - np.asarray(z)) + 0.25) / (2.0 * inst.sigma_sq)


def expected_reverse_log_variation(inst):
    return SQRT_2_OVER_PI / (2.0 * inst.sigma) + 1.0 / (8.0 * inst.sigma_sq)


def simulate_forward(inst, c, rng, steps=None):
    """Forward paths ``X_0 .. X_steps`` for an array of contexts.

    Returns an array of shape ``(steps + 1,) + c.shape``.
    """
    steps = inst.T if steps is None else steps
    c = np.asarray(c, dtype=float)
    x = np.empty((steps + 1,) + c.shape)
    x[0] = c + rng.standard_normal(c.shape)
    for s in range(steps):
        x[s + 1] = inst.rho * x[s] + inst.sigma * rng.standard_normal(c.shape)
    return x


def bayes_posterior_moments(inst, t, c, x_t, nodes=20001, width=10.0):
    """Posterior mean and variance of ``X_{t-1}`` given ``(c, X_t)`` by brute force.

    Normalizes ``q(x_t | y) * N(y; rho^(t-1) c, 1)`` on an equispaced grid
    with the trapezoid rule.  A first pass over a grid spanning both factors
    locates the posterior; the second pass uses ``mean +/- width`` posterior
    standard deviations.  No closed-form reverse-kernel expression is used.
    """
    inst.check_step(t)
    prior_mean = inst.rho ** (t - 1) * c
    lik_mean, lik_sd = x_t / inst.rho, inst.sigma / inst.rho

    def moments(y):
        logw = norm_logpdf(x_t, inst.rho * y, inst.sigma_sq) + norm_logpdf(y, prior_mean, 1.0)
        w = np.exp(logw - logw.max())
        z = np.trapezoid(w, y)
        mean = np.trapezoid(w * y, y) / z
        var = np.trapezoid(w * (y - mean) ** 2, y) / z
        return mean, var

    lo = min(prior_mean - width, lik_mean - width * lik_sd)
    hi = max(prior_mean + width, lik_mean + width * lik_sd)
    mean, var = moments(np.linspace(lo, hi, nodes))
    sd = math.sqrt(var)
    return moments(np.linspace(mean - width * sd, mean + width * sd, nodes))
