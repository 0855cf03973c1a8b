"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Lines are printed as each criterion finishes and again in the terminal
summary (see ``conftest.py``).  Criteria are checked at their stated
tolerances; nothing here is relaxed to make a run green.
"""

import math
import time

import numpy as np
import pytest

from gmdiff.divergence_lab import kappa_1, stability_certificate, step_bound, stepwise_kl, window_tail_term
from gmdiff.harness import ExperimentConfig, fit_slope
from gmdiff.mixture_models import (
    MixtureDensity, build_partition, exact_logit_source, infeasible_mixture, n_star, shifted_logit_source,
    window_tail_probability,
)
from gmdiff.neural_logits import size_calculator, train_logit_net
from gmdiff.ou_model import (
    ProblemInstance, bayes_posterior_moments, context_mismatch, expected_reverse_log_variation,
    expected_transition_oscillation, oscillation_bounds, reverse_log_variation, simulate_forward,
    terminal_mismatch, true_reverse_kernel,
)
from gmdiff.sampler import ReverseChain, path_kl_report

REF = ProblemInstance(0.5, 0.25, 4)
RESULTS = {}


@pytest.fixture
def record(capsys):
    def _record(number, title, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed < budget
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{elapsed:.2f}s / {budget:g}s]"
        RESULTS[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok
    return _record


def test_criterion_01_bridge_identity(record):
    start = time.perf_counter()
    err = 0.0
    for rho in (0.5, 0.9):
        inst = ProblemInstance(rho, 1.0, 4)
        for c in np.linspace(-1.0, 1.0, 5):
            for x in np.linspace(-2.0, 2.0, 5):
                for t in range(1, 5):
                    m, v = bayes_posterior_moments(inst, t, c, x)
                    k = true_reverse_kernel(inst, t, c, x)
                    err = max(err, abs(m - k.mean), abs(v - k.var))
    ok = record(1, "bridge identity", err < 1e-8, f"max moment error {err:.2e} (< 1e-8)", time.perf_counter() - start, 10)
    assert ok


def test_criterion_02_terminal_mismatch(record):
    start = time.perf_counter()
    rng = np.random.default_rng(20240001)
    agree, mc = True, []
    for T in range(1, 9):
        inst = ProblemInstance(0.8, 2.0, T)
        kl = context_mismatch(inst, rng.uniform(-2.0, 2.0, 10 ** 6))
        se = kl.std(ddof=1) / 1e3
        agree = agree and abs(kl.mean() - terminal_mismatch(inst)) < 3 * se
        mc.append(kl.mean())
    slope = np.polyfit(np.arange(1, 9), np.log(mc), 1)[0]
    target = 2 * math.log(0.8)
    rel = abs(slope / target - 1)
    ok = record(2, "terminal mismatch", agree and rel <= 0.02,
                f"MC within 3 se for T=1..8: {agree}; slope {slope:.5f} vs {target:.5f} (rel {rel:.1e})",
                time.perf_counter() - start, 30)
    assert ok


def test_criterion_03_path_decomposition(record):
    start = time.perf_counter()
    chain = ReverseChain(REF)
    step_max = total_err = 0.0
    for c in np.linspace(-REF.M, REF.M, 20):
        r = path_kl_report(REF, chain, c, with_output=False)
        step_max = max(step_max, max(abs(s) for s in r.stepwise))
        total_err = max(total_err, abs(r.path_total - 0.5 * REF.rho ** (2 * REF.T) * c * c))
    ok = record(3, "path-space decomposition", step_max < 1e-12 and total_err < 1e-12,
                f"max stepwise {step_max:.1e}, path total error {total_err:.1e} (< 1e-12)",
                time.perf_counter() - start, 1)
    assert ok


def test_criterion_04_data_processing(record):
    start = time.perf_counter()
    err, ordered = 0.0, True
    for T in range(1, 9):
        inst = ProblemInstance(0.8, 2.0, T)
        chain = ReverseChain(inst)
        for c in np.linspace(-2.0, 2.0, 9):
            r = path_kl_report(inst, chain, c)
            err = max(err, abs(r.output_kl - 0.5 * c * c * inst.rho ** (4 * T)))
            ordered = ordered and r.output_kl <= 0.5 * c * c * inst.rho ** (2 * T)
    ok = record(4, "data processing", err < 1e-8 and ordered,
                f"output KL error {err:.1e} (< 1e-8), output <= path total: {ordered}",
                time.perf_counter() - start, 5)
    assert ok


def test_criterion_05_stability_sandwich(record):
    start = time.perf_counter()
    spec = build_partition(256)
    base = exact_logit_source(REF, spec)
    ref_mix = MixtureDensity(spec, base)
    ref_kl = stepwise_kl(REF, 1, ref_mix).value
    rng = np.random.default_rng(20240005)
    worst_ratio = worst_kl = -math.inf
    for eta in (0.01, 0.1, 1.0):
        for _ in range(20):
            a = MixtureDensity(spec, shifted_logit_source(base, rng.uniform(-eta, eta, spec.n), eta))
            rep = stability_certificate(REF, 1, a, ref_mix, eta, grid=200, strict=False, kl_b=ref_kl)
            worst_ratio = max(worst_ratio, max(-rep.min_log_ratio, rep.max_log_ratio) - 2 * eta)
            worst_kl = max(worst_kl, rep.kl_a - rep.kl_b - 2 * eta)
    ok = record(5, "stability sandwich", worst_ratio <= 0 and worst_kl <= 1e-10,
                f"max |log ratio| - 2 eta = {worst_ratio:.3g} (<= 0), KL gap - 2 eta = {worst_kl:.3g} (<= 1e-10)",
                time.perf_counter() - start, 60)
    assert ok


def test_criterion_06_bound_dominance_and_rate(record):
    start = time.perf_counter()
    ns = [128, 256, 512, 1024, 2048, 4096]
    d = [stepwise_kl(REF, 1, infeasible_mixture(REF, build_partition(n))).value for n in ns]
    b = [step_bound(REF, 1, build_partition(n)).b_nor for n in ns]
    dominated = all(x <= y for x, y in zip(d, b))
    decreasing = all(x > y for x, y in zip(d, d[1:]))
    slope = fit_slope(ns, d)
    ok = record(6, "bound dominance and rate", dominated and decreasing and slope <= -0.28,
                f"d_KL <= B^Nor: {dominated}, strictly decreasing: {decreasing}, slope {slope:.4f} (<= -0.28)",
                time.perf_counter() - start, 600)
    assert ok


def test_criterion_07_neural_certificate(record):
    start = time.perf_counter()
    cfg = ExperimentConfig()
    finite, ok_full = True, True
    worst_full = worst_window = worst_tail = -math.inf
    for n in (8, 32, 128):
        spec = build_partition(n)
        src = train_logit_net(REF, spec, cfg.mlp(n, 1))
        finite = finite and math.isfinite(src.eta)
        nn, m0 = MixtureDensity(spec, src), infeasible_mixture(REF, spec)
        full = stepwise_kl(REF, 1, nn).value - stepwise_kl(REF, 1, m0).value - 2 * src.eta
        win = (stepwise_kl(REF, 1, nn, region="window").value
               - stepwise_kl(REF, 1, m0, region="window").value - 2 * src.eta)
        worst_full = max(worst_full, full)
        worst_window = max(worst_window, win)
        worst_tail = max(worst_tail, full - window_tail_term(REF, 1, spec, src.eta))
        ok_full = ok_full and full <= 1e-8
    ok = record(7, "neural certificate", finite and ok_full,
                f"eta finite: {finite}; KL_nn - KL_M0 - 2 eta = {worst_full:.3g} (<= 1e-8); "
                f"on window {worst_window:.3g}; after window-tail term {worst_tail:.3g}",
                time.perf_counter() - start, 900)
    assert ok


def test_criterion_08_constants(record):
    start = time.perf_counter()
    k = kappa_1(1.0)
    c = size_calculator(1, 1, 1, 1, 1, 1.0).eta_bound
    ns = n_star(REF, 1)
    ok = record(8, "closed-form constants", abs(k - 2.79) <= 0.01 and c == 1360 and ns == 128,
                f"kappa_1(1) = {k:.6f}, neural constant = {c:g}, n_star = {ns}", time.perf_counter() - start, 1)
    assert ok


def test_criterion_09_window_tail(record):
    start = time.perf_counter()
    worst, checked = -math.inf, 0
    for n in (128, 256, 512, 1024, 2048, 4096):
        for t in range(1, REF.T + 1):
            p, bound, ns = window_tail_probability(REF, t, build_partition(n))
            if n >= ns:
                worst = max(worst, p / bound)
                checked += 1
    ok = record(9, "window tail", worst <= 1 and checked > 0,
                f"max P/bound = {worst:.3g} over {checked} (n, t) points", time.perf_counter() - start, 10)
    assert ok


def test_criterion_10_witness_expectations(record):
    start = time.perf_counter()
    inst = ProblemInstance(0.5, 1.0, 3)
    rng = np.random.default_rng(20240010)
    x = simulate_forward(inst, rng.uniform(-1, 1, 10 ** 6), rng, steps=2)
    _, b = oscillation_bounds(inst, 1, x[1], x[2])
    zb = (b.mean() - expected_transition_oscillation(inst)) / (b.std() / 1e3)
    y = x[0] + inst.sigma * rng.standard_normal(x.shape[1])
    lv = reverse_log_variation(inst, y, x[0])
    zf = (lv.mean() - expected_reverse_log_variation(inst)) / (lv.std() / 1e3)
    ok = record(10, "witness expectations", abs(zb) < 3 and abs(zf) < 3,
                f"E[b_s] z-score {zb:.2f}, f_t log-variation z-score {zf:.2f} (|z| < 3)",
                time.perf_counter() - start, 30)
    assert ok
