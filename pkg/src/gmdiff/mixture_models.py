"""Cell partitions, exact log-odds and baseline-softmax Gaussian mixtures.

At resolution ``n`` the fine region ``[-L, L)`` is cut into ``n`` cells of
width ``h = n^(-6/7)``.  Each cell carries a narrow Gaussian at its midpoint
and the remainder ``R \\ [-L, L)`` carries one wide Gaussian at the origin.
Weights come from logits through a softmax with an implicit zero logit for
the remainder component.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from ._normal import LOG_SQRT_2PI, log_ndtr_diff, log_two_sided_tail, logsumexp_last
from ._quadrature import context_rule

TAIL_SCALE = math.sqrt(2.0 / math.pi)

# elements per temporary block in density evaluation
_BLOCK = 1 << 22


@dataclass(frozen=True)
class PartitionSpec:
    n: int
    h: float
    L: float
    delta: float
    sigma_interior: float
    sigma_tail: float
    R: float
    edges: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)

    def cell_index(self, y):
        """Index of the cell holding ``y``: 1..n inside ``[-L, L)``, else 0."""
        y = np.asarray(y, dtype=float)
        j = np.searchsorted(self.edges, y, side="right")
        return np.where((y >= -self.L) & (y < self.L), np.clip(j, 1, self.n), 0)

    @property
    def component_means(self):
        return np.concatenate(([0.0], self.centers))

    @property
    def component_vars(self):
        return np.concatenate(([self.sigma_tail ** 2], np.full(self.n, self.sigma_interior ** 2)))


def build_partition(n):
    """Partition and scale schedule at resolution ``n``."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be an integer >= 1, got {n}")
    n = int(n)
    h = n ** (-6.0 / 7.0)
    L = 0.5 * n * h
    edges = -L + h * np.arange(n + 1)
    edges[0], edges[-1] = -L, L
    edges.setflags(write=False)
    centers = 0.5 * (edges[:-1] + edges[1:])
    centers.setflags(write=False)
    return PartitionSpec(
        n=n,
        h=h,
        L=L,
        delta=n ** (-2.0 / 7.0),
        sigma_interior=n ** (-4.0 / 7.0),
        sigma_tail=TAIL_SCALE,
        R=0.25 * n ** (1.0 / 7.0),
        edges=edges,
        centers=centers,
    )


def log_cell_probabilities(inst, spec, z):
    """log G_j(z), shape ``z.shape + (n + 1,)``; index 0 is the remainder cell."""
    z = np.asarray(z, dtype=float)[..., None]
    s = inst.sigma
    e = spec.edges
    interior = log_ndtr_diff((e[:-1] - z) / s, (e[1:] - z) / s)
    remainder = log_two_sided_tail((-spec.L - z) / s, (spec.L - z) / s)
    return np.concatenate((remainder, interior), axis=-1)


def cell_probabilities(inst, spec, z):
    return np.exp(log_cell_probabilities(inst, spec, z))


def exact_log_odds(inst, spec, z):
    """Log-odds of every interior cell against the remainder cell."""
    lg = log_cell_probabilities(inst, spec, z)
    return lg[..., 1:] - lg[..., :1]


def log_baseline_softmax(logits):
    """Log-weights ``(log a_0, log a_1, ..., log a_m)`` with implicit zero logit."""
    u = np.asarray(logits, dtype=float)
    full = np.concatenate((np.zeros(u.shape[:-1] + (1,)), u), axis=-1)
    return full - logsumexp(full, axis=-1, keepdims=True)


def baseline_softmax(logits):
    """Weights ``e^u_j / (1 + sum e^u_k)``; the baseline weight is index 0."""
    return np.exp(log_baseline_softmax(logits))


@dataclass(frozen=True)
class LogitSource:
    """A map from features to ``n`` logits, with its measured sup-error.

    ``kind`` is ``"exact"`` or ``"neural"``; ``eta`` is 0 for exact logits.
    """

    kind: str
    eval: Callable = field(repr=False)
    eta: float = 0.0
    inst: Optional[object] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("exact", "neural"):
            raise ValueError(f"unknown logit kind {self.kind!r}")
        if not self.eta >= 0.0:
            raise ValueError("eta must be non-negative")

    def __call__(self, z):
        return self.eval(z)


def exact_logit_source(inst, spec):
    return LogitSource("exact", lambda z: exact_log_odds(inst, spec, z), 0.0, inst)


def shifted_logit_source(base, shift, eta=None):
    """``base + shift(z)``; ``shift`` is a callable or a constant array."""
    if callable(shift):
        ev = lambda z: base(z) + shift(np.asarray(z, dtype=float))
    else:
        shift = np.asarray(shift, dtype=float)
        ev = lambda z: base(z) + shift
    if eta is None:
        eta = base.eta
    return LogitSource("neural", ev, float(eta))


class MixtureDensity:
    """Baseline-softmax Gaussian mixture ``p[u](y | z)``.

    ``log_softmax`` maps logits to log-weights and defaults to
    :func:`log_baseline_softmax`; it is a parameter only so that faults can
    be injected in certificate runs.
    """

    def __init__(self, spec, logits, log_softmax=log_baseline_softmax):
        self.spec = spec
        self.logits = logits
        self.log_softmax = log_softmax
        self._means = spec.component_means
        self._vars = spec.component_vars
        self._log_norm = 0.5 * np.log(self._vars) + LOG_SQRT_2PI
        self._neg_half_prec = -0.5 / self._vars

    def log_weights(self, z):
        return self.log_softmax(self.logits(np.asarray(z, dtype=float)))

    def weights(self, z):
        return np.exp(self.log_weights(z))

    def log_density(self, z, y):
        """log p(y | z).

        Either ``z`` is a scalar and ``y`` any shape, ``y`` has the shape of
        ``z`` (pointwise), or ``y`` has shape ``z.shape + (k,)``.  The result
        has the shape of ``y``.
        """
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        if z.ndim == 0:
            return self.log_density(z[None], y.reshape(1, -1)).reshape(y.shape)
        if y.shape == z.shape:
            return self.log_density(z, y[..., None])[..., 0]
        if y.shape[:-1] != z.shape:
            raise ValueError(f"y shape {y.shape} does not extend z shape {z.shape}")
        lw = self.log_weights(z).reshape(-1, self.spec.n + 1)
        yf = y.reshape(lw.shape[0], -1)
        out = np.empty(yf.shape)
        k = yf.shape[1]
        step = max(1, _BLOCK // (k * (self.spec.n + 1)))
        for i in range(0, lw.shape[0], step):
            yy = yf[i:i + step, :, None]
            comp = yy - self._means
            comp *= comp
            comp *= self._neg_half_prec
            comp -= self._log_norm
            comp += lw[i:i + step, None, :]
            out[i:i + step] = logsumexp_last(comp)
        return out.reshape(y.shape)

    def density(self, z, y):
        return np.exp(self.log_density(z, y))

    def cdf(self, z, y):
        """Mixture CDF at ``y`` for a single feature value ``z``."""
        w = self.weights(np.asarray(float(z)))
        y = np.asarray(y, dtype=float)
        return ndtr((y[..., None] - self._means) / np.sqrt(self._vars)) @ w

    def sample(self, z, rng):
        """One draw of ``Y ~ p(. | z)`` per entry of ``z``."""
        z = np.asarray(z, dtype=float)
        flat = z.ravel()
        if self._is_exact():
            idx = self._exact_component(flat, rng)
        else:
            idx = np.empty(flat.shape, dtype=np.int64)
            step = max(1, _BLOCK // (self.spec.n + 1))
            for i in range(0, flat.size, step):
                cw = np.cumsum(self.weights(flat[i:i + step]), axis=-1)
                u = rng.uniform(size=(cw.shape[0], 1)) * cw[:, -1:]
                idx[i:i + step] = np.minimum((cw < u).sum(axis=-1), self.spec.n)
        y = self._means[idx] + np.sqrt(self._vars[idx]) * rng.standard_normal(flat.shape)
        return y.reshape(z.shape)

    def _is_exact(self):
        return (self.logits.kind == "exact" and self.logits.inst is not None
                and self.log_softmax is log_baseline_softmax)

    def _exact_component(self, z, rng):
        # With exact logits the weights are the cell probabilities of
        # N(z, sigma^2), so the cell of a draw from it is a weight draw.
        y = z + self.logits.inst.sigma * rng.standard_normal(z.shape)
        return self.spec.cell_index(y)


def infeasible_mixture(inst, spec):
    """The exact-logit mixture whose weights are the true cell probabilities."""
    return MixtureDensity(spec, exact_logit_source(inst, spec))


def mixture_log_density(mix, z, y):
    return mix.log_density(z, y)


def mixture_sample(mix, z, rng):
    return mix.sample(z, rng)


def clip_feature(spec, z):
    """Projection onto the window ``[-R, R]``."""
    return np.clip(z, -spec.R, spec.R)


def n_star(inst, t):
    """Smallest resolution at which the window envelopes are valid."""
    inst.check_step(t)
    x = (8.0 * inst.signal(t) * inst.M) ** 7
    # guard exact integers against round-off from the power
    return max(6, math.ceil(x - 1e-9 * max(1.0, x)))


def window_tail_probability(inst, t, spec):
    """``(P(|Z_t| > R), 2 exp(-n^(2/7) / (128 rho^2)), n_star)``."""
    c, w = context_rule(inst.M)
    m = inst.signal(t) * c
    p = np.exp(log_two_sided_tail((-spec.R - m) / inst.rho, (spec.R - m) / inst.rho)) @ w
    bound = 2.0 * math.exp(-spec.n ** (2.0 / 7.0) / (128.0 * inst.rho ** 2))
    return float(p), bound, n_star(inst, t)


def window_outside_moments(inst, t, spec):
    """``(P(|Z| > R), E[Z^2; |Z| > R])`` for the step-t feature law."""
    c, w = context_rule(inst.M)
    m = inst.signal(t) * c
    s = inst.rho
    hi = (spec.R - m) / s
    lo = (-spec.R - m) / s
    p_hi, p_lo = np.exp(log_ndtr(-hi)), np.exp(log_ndtr(lo))
    phi_hi = np.exp(-0.5 * hi ** 2) / math.sqrt(2 * math.pi)
    phi_lo = np.exp(-0.5 * lo ** 2) / math.sqrt(2 * math.pi)
    # E[W^2; W > a] for W = m + s X:  (m^2 + s^2) sf(a) + (2 m s + s^2 a) phi(a)
    upper = (m ** 2 + s ** 2) * p_hi + (2 * m * s + s ** 2 * hi) * phi_hi
    lower = (m ** 2 + s ** 2) * p_lo - (2 * m * s + s ** 2 * lo) * phi_lo
    return float((p_hi + p_lo) @ w), float((upper + lower) @ w)
