"""Stepwise KL estimators and the explicit bound ledger.

The stepwise divergence is

    d_KL,t = E_Z [ KL( N(Z, sigma^2) || p(. | Z) ) ],

with ``Z`` distributed as the step-t feature.  The inner KL is a composite
Gauss-Legendre integral around ``z`` whose panels are refined at the sharp
edges ``+-L`` of the mixture; the outer expectation is a composite rule in
``z`` weighted by the context-averaged feature density.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._normal import log_two_sided_tail, norm_logpdf
from ._quadrature import CONTEXT_NODES, composite_legendre, context_rule, refined_breaks
from .mixture_models import log_cell_probabilities, n_star, window_outside_moments
from .ou_model import SQRT_2_OVER_PI, feature_density, sample_feature, terminal_mismatch

# half-width of the inner and outer integration ranges, in standard deviations
INNER_WIDTH = 13.0
OUTER_WIDTH = 12.0

INNER_ORDER = 16
OUTER_ORDER = 8

# decay rate c^# of the boundary envelopes
C_SHARP_RATE = 1.0 / 256.0


@dataclass(frozen=True)
class KLEstimate:
    value: float
    std_err: float
    method: str
    node_or_sample_count: int

    def __post_init__(self):
        if self.method not in ("quadrature", "monte_carlo"):
            raise ValueError(f"unknown method {self.method!r}")


class TrueReverseDensity:
    """The reverse kernel ``N(z, sigma^2)`` itself, as a conditional model."""

    def __init__(self, inst):
        self.inst = inst

    def log_density(self, z, y):
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        if z.ndim and y.shape != z.shape:
            z = z[..., None]
        return norm_logpdf(y, z, self.inst.sigma_sq)


def _as_model(inst, model):
    if isinstance(model, str):
        if model != "exact":
            raise ValueError(f"unknown model {model!r}")
        return TrueReverseDensity(inst)
    return model


def _inner_breaks(inst, model, z):
    s = inst.sigma
    spec = getattr(model, "spec", None)
    if spec is None:
        return np.linspace(z - INNER_WIDTH * s, z + INNER_WIDTH * s, int(2 * INNER_WIDTH) + 1)
    return refined_breaks(z - INNER_WIDTH * s, z + INNER_WIDTH * s, (-spec.L, spec.L),
                          fine=spec.sigma_interior / 4.0, coarse=s)


def pointwise_kl(inst, model, z, order=INNER_ORDER):
    """``KL(N(z, sigma^2) || model(. | z))`` for each entry of ``z``."""
    model = _as_model(inst, model)
    z = np.asarray(z, dtype=float)
    out = np.empty(z.size)
    for i, zi in enumerate(z.ravel()):
        y, w = composite_legendre(_inner_breaks(inst, model, zi), order)
        lf = norm_logpdf(y, zi, inst.sigma_sq)
        lp = model.log_density(zi, y)
        integrand = np.exp(lf) * (lf - lp)
        if not np.all(np.isfinite(integrand)):
            raise FloatingPointError(f"non-finite KL integrand at z={zi}")
        out[i] = integrand @ w
    return out.reshape(z.shape)


def _region_intervals(inst, t, spec, region):
    a = inst.signal(t) * inst.M
    lo, hi = -a - OUTER_WIDTH * inst.rho, a + OUTER_WIDTH * inst.rho
    if region is None:
        return [(lo, hi)]
    if spec is None:
        raise ValueError("a window region needs a mixture model")
    R = spec.R
    if region == "window":
        return [(max(lo, -R), min(hi, R))] if R > lo else []
    if region == "outside":
        return [(lo, -R), (R, hi)] if R < hi else []
    raise ValueError(f"unknown region {region!r}")


def feature_rule(inst, t, spec=None, region=None, order=OUTER_ORDER, context_order=CONTEXT_NODES):
    """Nodes and weights for ``E[g(Z_t)]``, optionally restricted to a window region.

    Panels are at most ``rho / 2`` wide; the window edges ``+-R`` are always
    breakpoints so that clipped models, which have a kink there, integrate
    cleanly.
    """
    inst.check_step(t)
    nodes, weights = [], []
    for lo, hi in _region_intervals(inst, t, spec, region):
        if hi <= lo:
            continue
        feats = () if spec is None else (-spec.R, spec.R)
        z, w = composite_legendre(refined_breaks(lo, hi, feats, inst.rho / 2.0, inst.rho / 2.0), order)
        nodes.append(z)
        weights.append(w * feature_density(inst, t, z, context_order))
    if not nodes:
        return np.empty(0), np.empty(0)
    return np.concatenate(nodes), np.concatenate(weights)


def stepwise_kl(inst, t, model, method="quadrature", region=None, order=INNER_ORDER,
                outer_order=OUTER_ORDER, context_order=CONTEXT_NODES, samples=10 ** 6, rng=None):
    """Stepwise divergence ``d_KL,t`` of a conditional model.

    Parameters
    ----------
    model : MixtureDensity, TrueReverseDensity or ``"exact"``
    method : {"quadrature", "monte_carlo"}
    region : None, "window" or "outside"
        Restrict the feature expectation to ``|Z| <= R`` or ``|Z| > R``
        (quadrature only).  The restricted values sum to the full one.
    """
    model = _as_model(inst, model)
    spec = getattr(model, "spec", None)
    if method == "monte_carlo":
        if region is not None:
            raise ValueError("region restriction is quadrature only")
        rng = np.random.default_rng() if rng is None else rng
        return _stepwise_kl_mc(inst, t, model, samples, rng)
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")
    z, w = feature_rule(inst, t, spec, region, outer_order, context_order)
    if z.size == 0:
        return KLEstimate(0.0, 0.0, "quadrature", 0)
    inner = pointwise_kl(inst, model, z, order)
    return KLEstimate(float(inner @ w), 0.0, "quadrature", int(z.size))


def _stepwise_kl_mc(inst, t, model, samples, rng, block=1 << 14):
    total = total_sq = 0.0
    done = 0
    while done < samples:
        k = min(block, samples - done)
        z = sample_feature(inst, t, rng, k)
        y = z + inst.sigma * rng.standard_normal(k)
        r = norm_logpdf(y, z, inst.sigma_sq) - model.log_density(z, y)
        total += r.sum()
        total_sq += (r ** 2).sum()
        done += k
    mean = total / samples
    var = max(total_sq / samples - mean ** 2, 0.0)
    return KLEstimate(float(mean), math.sqrt(var / samples), "monte_carlo", int(samples))


# ---------------------------------------------------------------------------
# bound terms


def kappa_1(sigma):
    """Leading coefficient of the n^(-2/7) rate, oscillation plus Riemann parts."""
    return SQRT_2_OVER_PI / (2.0 * sigma) + 6.0 / math.sqrt(2.0 * math.pi)


def bound_L_term(inst, spec):
    """Local oscillation integral in closed form."""
    n = spec.n
    return (SQRT_2_OVER_PI / (2.0 * inst.sigma) * n ** (-2.0 / 7.0)
            + n ** (-4.0 / 7.0) / (4.0 * inst.sigma_sq))


def oscillation_operator(inst, delta, y, z):
    """C^1 bound on the log-variation of ``N(z, sigma^2)`` over a ``delta``-cube at ``y``."""
    return 0.5 * delta * (np.abs(np.asarray(y) - np.asarray(z)) + 0.5 * delta) / inst.sigma_sq


def l_term_mc(inst, t, spec, rng, samples=10 ** 6):
    """Monte Carlo estimate of ``E[D_delta f(Y | Z)]`` under the step-t joint law."""
    z = sample_feature(inst, t, rng, samples)
    y = z + inst.sigma * rng.standard_normal(samples)
    d = oscillation_operator(inst, spec.delta, y, z)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(samples))


def boundary_probability(inst, t, spec, order=CONTEXT_NODES):
    """``P(|Y| > L - delta/2)`` with ``Y | c ~ N(rho^(t-1) c, 1)``."""
    a = spec.L - 0.5 * spec.delta
    c, w = context_rule(inst.M, order)
    m = inst.signal(t) * c
    return float(np.exp(log_two_sided_tail(-a - m, a - m)) @ w)


def fourth_moment_bound(inst, t):
    """Uniform-in-context bound on ``E[Y^4]``."""
    m = inst.signal(t) * inst.M
    return m ** 4 + 6.0 * m ** 2 + 3.0


def envelope_constants(inst, t):
    """``(C^(T), C^(U))`` of the boundary envelopes."""
    s = inst.sigma
    c_t = (s + 0.5) / (math.sqrt(2.0) * s ** 2)
    c_u = math.sqrt(2.0) * (math.pi / 4.0 * math.sqrt(fourth_moment_bound(inst, t)) + math.log(4.0))
    return c_t, c_u


def c_sharp(inst, t):
    c_t, c_u = envelope_constants(inst, t)
    return c_t + c_u + 2.0


@dataclass(frozen=True)
class BoundaryTerms:
    T_term: float
    U_term: float
    boundary_prob: float
    T_envelope: float
    U_envelope: float
    envelope_valid: bool


def bound_T_U_terms(inst, t, spec):
    """Boundary-oscillation and tail-component terms with their envelopes.

    The exact values are always returned.  ``envelope_valid`` is False when
    ``n < n_star``, where the exponential envelopes are not guaranteed.
    """
    inst.check_step(t)
    s = inst.sigma
    p = boundary_probability(inst, t, spec)
    T = (s + 0.5) / (2.0 * s ** 2) * math.sqrt(p)
    U = math.pi / 4.0 * math.sqrt(fourth_moment_bound(inst, t)) * math.sqrt(p) + math.log(4.0) * p
    c_t, c_u = envelope_constants(inst, t)
    decay = math.exp(-C_SHARP_RATE * spec.n ** (2.0 / 7.0))
    return BoundaryTerms(T, U, p, c_t * decay, c_u * decay, spec.n >= n_star(inst, t))


def bound_riemann_gauss_terms(spec):
    """``(6 h / (sqrt(2 pi) sigma_n), 2 exp(-(delta / sigma_n)^2 / 8))``."""
    riemann = 6.0 * spec.h / (math.sqrt(2.0 * math.pi) * spec.sigma_interior)
    gauss_tail = 2.0 * math.exp(-((spec.delta / spec.sigma_interior) ** 2) / 8.0)
    return riemann, gauss_tail


def b_nor_envelope(inst, t, n):
    """Closed-form envelope ``kappa_1 n^(-2/7) + n^(-4/7)/(4 sigma^2) + C^# e^(-n^(2/7)/256)``."""
    x = n ** (2.0 / 7.0)
    return (kappa_1(inst.sigma) / x + 1.0 / (4.0 * inst.sigma_sq * x * x)
            + c_sharp(inst, t) * math.exp(-C_SHARP_RATE * x))


def c_nor_constant(inst, t, n_grid):
    """A constant ``C`` with ``B^Nor(n) <= C n^(-2/7)`` for every ``n`` in ``n_grid``."""
    n_grid = np.asarray(list(n_grid), dtype=float)
    if n_grid.size == 0:
        raise ValueError("empty resolution grid")
    ns = n_star(inst, t)
    if n_grid.min() < ns:
        raise ValueError(f"grid must lie in [n_star, inf) = [{ns}, inf)")
    x = n_grid ** (2.0 / 7.0)
    g = c_sharp(inst, t) * np.exp(-C_SHARP_RATE * x) * x
    return kappa_1(inst.sigma) + ns ** (-2.0 / 7.0) / (4.0 * inst.sigma_sq) + float(g.max())


def window_tail_term(inst, t, spec, eta):
    """Explicit KL remainder of a clipped model on ``|Z| > R``.

    Outside the window the model's baseline weight is at least
    ``e^(-eta) G_0(+-R)``, so its density dominates that multiple of the
    wide tail Gaussian.  The resulting pointwise bound is integrated in
    closed form against the feature law.
    """
    p_out, z2_out = window_outside_moments(inst, t, spec)
    s2, v0 = inst.sigma_sq, spec.sigma_tail ** 2
    log_g0 = float(log_cell_probabilities(inst, spec, spec.R)[0])
    const = 0.5 * math.log(v0 / s2) + s2 / (2.0 * v0) - 0.5 + eta - log_g0
    return max(p_out * const + z2_out / (2.0 * v0), 0.0)


@dataclass(frozen=True)
class StepBound:
    t: int
    n: int
    L_term: float
    T_term: float
    U_term: float
    riemann_term: float
    gauss_tail_term: float
    b_nor: float
    neural_term: float
    window_tail_term: float
    boundary_prob: float
    envelope_valid: bool

    @property
    def total(self):
        return self.b_nor + self.neural_term + self.window_tail_term


@dataclass(frozen=True)
class BoundLedger:
    terminal: float
    steps: tuple = field(default=())

    @property
    def total(self):
        return self.terminal + sum(s.total for s in self.steps)

    def column(self, name):
        return [getattr(s, name) for s in self.steps]


def step_bound(inst, t, spec, eta=0.0, window_tail=0.0):
    L = bound_L_term(inst, spec)
    bt = bound_T_U_terms(inst, t, spec)
    riemann, gauss_tail = bound_riemann_gauss_terms(spec)
    b_nor = L + bt.T_term + bt.U_term + riemann + gauss_tail
    return StepBound(t, spec.n, L, bt.T_term, bt.U_term, riemann, gauss_tail, b_nor,
                     2.0 * eta, window_tail, bt.boundary_prob, bt.envelope_valid)


def assemble_ledger(inst, specs, etas=None, window_tails=None):
    """Bound ledger over steps ``t = 1..T``.

    ``specs`` is a single partition or one per step; ``etas`` and
    ``window_tails`` default to zero (exact logits).
    """
    if not isinstance(specs, (list, tuple)):
        specs = [specs] * inst.T
    if len(specs) != inst.T:
        raise ValueError(f"need {inst.T} partitions, got {len(specs)}")
    etas = [0.0] * inst.T if etas is None else list(etas)
    window_tails = [0.0] * inst.T if window_tails is None else list(window_tails)
    steps = tuple(step_bound(inst, t, specs[t - 1], etas[t - 1], window_tails[t - 1])
                  for t in range(1, inst.T + 1))
    return BoundLedger(terminal_mismatch(inst), steps)


# ---------------------------------------------------------------------------
# certificates


class CertificateError(AssertionError):
    pass


@dataclass(frozen=True)
class StabilityReport:
    eta: float
    logit_gap: float
    min_log_ratio: float
    max_log_ratio: float
    kl_a: float
    kl_b: float

    @property
    def ratio_ok(self):
        return -2.0 * self.eta - 1e-12 <= self.min_log_ratio and self.max_log_ratio <= 2.0 * self.eta + 1e-12

    @property
    def kl_ok(self):
        return self.kl_a <= self.kl_b + 2.0 * self.eta + 1e-10

    @property
    def passed(self):
        return self.ratio_ok and self.kl_ok


def stability_certificate(inst, t, mix_a, mix_b, eta, grid=200, region=None, strict=True, kl_b=None):
    """Check the density sandwich and KL transfer between two logit sources.

    ``mix_a`` and ``mix_b`` must share a partition.  The logit gap is
    measured on the same ``grid x grid`` (z, y) lattice used for the ratio
    check and must not exceed ``eta``.  Pass ``kl_b`` to reuse a stepwise KL
    of ``mix_b`` already computed over the same region.
    """
    spec = mix_a.spec
    if mix_b.spec.n != spec.n or mix_b.spec.R != spec.R:
        raise ValueError("mixtures must share a partition")
    zlim = spec.R if region == "window" else spec.R + 3.0 * inst.rho
    z = np.linspace(-zlim, zlim, grid)
    ylim = spec.L + 4.0 * spec.sigma_tail
    y = np.linspace(-ylim, ylim, grid)
    gap = float(np.max(np.abs(mix_a.logits(z) - mix_b.logits(z))))
    if gap > eta * (1.0 + 1e-12):
        raise ValueError(f"logit gap {gap} exceeds eta {eta}")
    yy = np.broadcast_to(y, (grid, grid))
    lr = mix_a.log_density(z, yy) - mix_b.log_density(z, yy)
    rep = StabilityReport(eta, gap, float(lr.min()), float(lr.max()),
                          stepwise_kl(inst, t, mix_a, region=region).value,
                          stepwise_kl(inst, t, mix_b, region=region).value if kl_b is None else float(kl_b))
    if strict and not rep.passed:
        raise CertificateError(f"stability sandwich violated: {rep}")
    return rep


@dataclass(frozen=True)
class ContextTailReport:
    threshold: float
    fraction: float
    mean_kl: float
    markov_bound: float

    @property
    def passed(self):
        return self.fraction <= self.markov_bound


def context_kl_tail(inst, chain, threshold, contexts=1024, strict=True):
    """Fraction of an equispaced context grid whose output KL exceeds ``threshold``."""
    from .sampler import output_kl_small_T

    if not threshold > 0:
        raise ValueError("threshold must be positive")
    c = -inst.M + (np.arange(contexts) + 0.5) * (2.0 * inst.M / contexts)
    kl = np.array([output_kl_small_T(inst, chain, ci).value for ci in c])
    mean = float(kl.mean())
    rep = ContextTailReport(threshold, float(np.mean(kl > threshold)), mean, mean / threshold)
    if strict and not rep.passed:
        raise CertificateError(f"Markov tail violated: {rep}")
    return rep
