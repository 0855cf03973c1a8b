import dataclasses
import math

import mpmath
import numpy as np
import pytest

from gmdiff._quadrature import context_rule
from gmdiff.divergence_lab import (
    CertificateError, TrueReverseDensity, assemble_ledger, b_nor_envelope, bound_L_term,
    bound_riemann_gauss_terms, bound_T_U_terms, c_nor_constant, context_kl_tail, kappa_1, l_term_mc,
    pointwise_kl, stability_certificate, step_bound, stepwise_kl, window_tail_term,
)
from gmdiff.mixture_models import (
    LogitSource, MixtureDensity, build_partition, clip_feature, exact_logit_source, infeasible_mixture,
    log_baseline_softmax, shifted_logit_source,
)
from gmdiff.ou_model import ProblemInstance, terminal_mismatch
from gmdiff.sampler import ReverseChain, output_kl_small_T

REF = ProblemInstance(0.5, 0.25, 4)


@pytest.fixture(scope="module")
def m0_values():
    return {n: stepwise_kl(REF, 1, infeasible_mixture(REF, build_partition(n))).value for n in (128, 256, 512)}


def test_true_kernel_has_zero_kl():
    assert abs(stepwise_kl(REF, 1, "exact").value) < 1e-10
    assert abs(stepwise_kl(REF, 3, TrueReverseDensity(REF)).value) < 1e-10


def test_m0_kl_decreases_and_stays_below_bound(m0_values):
    vals = [m0_values[n] for n in sorted(m0_values)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    for n, v in m0_values.items():
        assert 0 < v <= step_bound(REF, 1, build_partition(n)).b_nor


@pytest.mark.parametrize("n", [128, 512])
def test_quadrature_converges_under_node_doubling(n):
    mix = infeasible_mixture(REF, build_partition(n))
    base = stepwise_kl(REF, 1, mix).value
    assert stepwise_kl(REF, 1, mix, order=32).value == pytest.approx(base, abs=1e-8)
    assert stepwise_kl(REF, 1, mix, outer_order=16).value == pytest.approx(base, abs=1e-8)
    assert stepwise_kl(REF, 1, mix, context_order=128).value == pytest.approx(base, abs=1e-8)


@pytest.mark.slow
def test_quadrature_converges_at_largest_resolution():
    mix = infeasible_mixture(REF, build_partition(4096))
    base = stepwise_kl(REF, 1, mix).value
    assert stepwise_kl(REF, 1, mix, order=32, outer_order=16).value == pytest.approx(base, abs=1e-8)


def test_quadrature_agrees_with_monte_carlo():
    mix = infeasible_mixture(REF, build_partition(128))
    q = stepwise_kl(REF, 1, mix)
    mc = stepwise_kl(REF, 1, mix, method="monte_carlo", samples=10 ** 6, rng=np.random.default_rng(21))
    assert mc.method == "monte_carlo" and mc.node_or_sample_count == 10 ** 6
    assert abs(q.value - mc.value) < 3 * mc.std_err
    assert mc.value >= -3 * mc.std_err


def test_window_regions_add_up():
    mix = infeasible_mixture(REF, build_partition(256))
    full = stepwise_kl(REF, 2, mix).value
    parts = stepwise_kl(REF, 2, mix, region="window").value + stepwise_kl(REF, 2, mix, region="outside").value
    assert parts == pytest.approx(full, abs=1e-9)
    with pytest.raises(ValueError):
        stepwise_kl(REF, 2, mix, region="inside")
    with pytest.raises(ValueError):
        stepwise_kl(REF, 2, mix, method="monte_carlo", region="window")


def test_non_finite_integrand_is_an_error():
    class Broken:
        def log_density(self, z, y):
            return np.full(np.shape(y), -np.inf)

    with pytest.raises(FloatingPointError):
        pointwise_kl(REF, Broken(), 0.0)


def test_kappa_1_at_unit_sigma():
    assert kappa_1(1.0) == pytest.approx(2.79, abs=0.01)
    assert kappa_1(1.0) == pytest.approx(2.7925959628100287, rel=1e-14)


def test_L_term_example():
    inst = ProblemInstance(0.6, 1.0, 2)
    val = bound_L_term(inst, build_partition(128))
    assert val == pytest.approx(0.1490835251254477, rel=1e-14)
    mc, se = l_term_mc(inst, 1, build_partition(128), np.random.default_rng(8), 10 ** 6)
    assert mc <= val + 3 * se


def test_L_term_vanishes():
    vals = [bound_L_term(REF, build_partition(n)) for n in (1, 10, 1000, 100000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 0.1


def test_boundary_probability_against_cdf_oracle():
    mpmath.mp.dps = 30
    sp = build_partition(256)
    a = sp.L - sp.delta / 2
    M = REF.M

    def tail(c):
        return mpmath.ncdf(-a - c) + mpmath.ncdf(-a + c)

    ref = mpmath.quad(tail, [-M, M]) / (2 * M)
    assert bound_T_U_terms(REF, 1, sp).boundary_prob == pytest.approx(float(ref), rel=1e-12)


def test_boundary_terms_and_envelopes():
    for n in (128, 512, 4096):
        sp = build_partition(n)
        bt = bound_T_U_terms(REF, 1, sp)
        assert bt.envelope_valid
        assert bt.boundary_prob <= 2 * math.exp(-n ** (2 / 7) / 128)
        assert bt.T_term <= bt.T_envelope
        assert bt.U_term <= bt.U_envelope


def test_boundary_terms_vanish_with_wide_window():
    sp = dataclasses.replace(build_partition(128), L=60.0)
    bt = bound_T_U_terms(REF, 1, sp)
    assert bt.boundary_prob == 0.0
    assert bt.T_term == 0.0 and bt.U_term == 0.0


def test_envelope_flagged_below_n_star():
    inst = ProblemInstance(0.5, 0.5, 1)
    bt = bound_T_U_terms(inst, 1, build_partition(128))
    assert not bt.envelope_valid
    assert bt.T_term > 0


def test_riemann_and_gauss_terms():
    r, g = bound_riemann_gauss_terms(build_partition(128))
    assert r == pytest.approx(6 / math.sqrt(2 * math.pi) / 4, rel=1e-14)
    prev = (math.inf, math.inf)
    for n in (1, 2, 8, 64, 512, 4096, 32768):
        r, g = bound_riemann_gauss_terms(build_partition(n))
        assert g <= 2 * math.exp(-n ** (2 / 7) / 256)
        assert r < prev[0] and g < prev[1]
        prev = (r, g)


def test_ledger_invariants():
    specs = [build_partition(n) for n in (128, 256, 512, 1024)]
    etas = [0.0, 0.01, 0.02, 0.0]
    tails = [0.0, 1e-3, 0.0, 2e-3]
    led = assemble_ledger(REF, specs, etas, tails)
    assert led.terminal == terminal_mismatch(REF)
    for s in led.steps:
        assert s.b_nor == s.L_term + s.T_term + s.U_term + s.riemann_term + s.gauss_tail_term
        assert min(s.L_term, s.T_term, s.U_term, s.riemann_term, s.gauss_tail_term, s.neural_term) >= 0
    assert led.column("neural_term") == [2 * e for e in etas]
    assert led.total == pytest.approx(led.terminal + sum(s.b_nor + s.neural_term + s.window_tail_term for s in led.steps))
    one = assemble_ledger(ProblemInstance(0.5, 0.25, 1), build_partition(128))
    assert one.total == pytest.approx(one.terminal + one.steps[0].b_nor)
    with pytest.raises(ValueError):
        assemble_ledger(REF, specs[:2])


def test_ledger_tends_to_terminal_mismatch():
    gaps = [sum(b_nor_envelope(REF, t, n) for t in range(1, REF.T + 1)) for n in (1e6, 1e12, 1e24)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-5


def test_ledger_dominates_measured_output_kl():
    inst = ProblemInstance(0.5, 0.25, 2)
    sp = build_partition(128)
    chain = ReverseChain(inst, infeasible_mixture(inst, sp))
    c, w = context_rule(inst.M, 8)
    measured = sum(wi * output_kl_small_T(inst, chain, ci).value for ci, wi in zip(c, w))
    assert measured <= assemble_ledger(inst, sp).total


def test_c_nor_dominates_bound_on_grid():
    grid = [128, 256, 512, 1024, 2048, 4096]
    c = c_nor_constant(REF, 1, grid)
    for n in grid:
        assert c * n ** (-2 / 7) >= step_bound(REF, 1, build_partition(n)).b_nor
        assert c * n ** (-2 / 7) >= b_nor_envelope(REF, 1, n)


def test_c_nor_limit_and_errors():
    inst = ProblemInstance(0.5, 100.0, 1)
    big = 8.0 ** 7 * 100 ** 7
    assert c_nor_constant(inst, 1, [big, 2 * big]) == pytest.approx(kappa_1(inst.sigma), abs=1e-5)
    with pytest.raises(ValueError):
        c_nor_constant(REF, 1, [])
    with pytest.raises(ValueError):
        c_nor_constant(REF, 1, [64, 128])


def _mixtures(spec, shift, eta, log_softmax=log_baseline_softmax):
    base = exact_logit_source(REF, spec)
    return MixtureDensity(spec, shifted_logit_source(base, shift, eta), log_softmax), MixtureDensity(spec, base)


def test_stability_with_zero_gap():
    spec = build_partition(64)
    a, b = _mixtures(spec, np.zeros(spec.n), 0.0)
    rep = stability_certificate(REF, 1, a, b, 0.0, grid=50)
    assert rep.kl_a == rep.kl_b
    assert rep.max_log_ratio == 0.0


def test_stability_random_perturbation():
    spec = build_partition(256)
    rng = np.random.default_rng(3)
    a, b = _mixtures(spec, rng.uniform(-0.1, 0.1, spec.n), 0.1)
    rep = stability_certificate(REF, 1, a, b, 0.1)
    assert rep.passed
    assert rep.kl_a - rep.kl_b <= 0.2


@pytest.mark.parametrize("sign", [1, -1])
def test_constant_shift_moves_baseline_weight_by_at_most_eta(sign):
    spec = build_partition(64)
    a, b = _mixtures(spec, np.full(spec.n, sign * 0.3), 0.3)
    z = np.linspace(-2, 2, 41)
    r = a.log_weights(z)[:, 0] - b.log_weights(z)[:, 0]
    assert np.all(np.abs(r) <= 0.3 + 1e-12)


def test_stability_violation_is_reported():
    spec = build_partition(64)
    a, b = _mixtures(spec, np.full(spec.n, 0.01), 0.01, lambda u: log_baseline_softmax(2 * np.asarray(u)))
    with pytest.raises(CertificateError):
        stability_certificate(REF, 1, a, b, 0.01, grid=50)
    with pytest.raises(ValueError):
        stability_certificate(REF, 1, a, b, 0.001, grid=50)


def test_window_tail_term_bounds_clipped_model():
    inst = ProblemInstance(0.6, 2.0, 1)
    spec = build_partition(128)
    ex = exact_logit_source(inst, spec)
    clipped = MixtureDensity(spec, LogitSource("neural", lambda z: ex(clip_feature(spec, z)), 0.0))
    outside = stepwise_kl(inst, 1, clipped, region="outside").value
    assert 0 < outside <= window_tail_term(inst, 1, spec, 0.0)


def test_context_tail_for_exact_chain():
    inst = ProblemInstance(0.6, 1.0, 2)
    chain = ReverseChain(inst)
    thr = 0.5 * inst.rho ** (4 * inst.T) * 0.5 ** 2
    rep = context_kl_tail(inst, chain, thr)
    c = -1 + (np.arange(1024) + 0.5) / 512
    assert rep.fraction == np.mean(np.abs(c) > 0.5)
    assert rep.fraction <= rep.markov_bound
    top = context_kl_tail(inst, chain, inst.rho ** (4 * inst.T))
    assert top.fraction == 0.0
