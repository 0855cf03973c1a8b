"""Experiment configuration, sweeps and reports.

Every command takes an :class:`ExperimentConfig` and writes its artifacts
into ``cfg.output_dir``.  Quadrature results are deterministic; Monte Carlo
and training draws come from generators seeded by ``(seed, n, t)`` so that
output does not depend on how sweep points are scheduled over workers.
"""

import csv
import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._quadrature import composite_legendre, refined_breaks
from .divergence_lab import (
    CertificateError, assemble_ledger, b_nor_envelope, c_nor_constant, context_kl_tail,
    stability_certificate, step_bound, stepwise_kl, window_tail_term,
)
from .mixture_models import (
    MixtureDensity, build_partition, exact_logit_source, infeasible_mixture, log_baseline_softmax,
    n_star, shifted_logit_source, window_tail_probability,
)
from .neural_logits import MLPConfig, save_checkpoint, train_logit_net
from .ou_model import ProblemInstance, bayes_posterior_moments, context_mismatch, terminal_mismatch, true_reverse_kernel
from .sampler import ReverseChain, compose_exact_chain, ks_distance, output_kl_small_T, path_kl_report, sample_predictor

KERNELS = ("exact", "m0", "neural")
FAULTS = ("none", "softmax")

# rate-sweep columns, one row per (n, t)
RATE_COLUMNS = (
    "n", "t", "d_kl", "b_nor", "L_term", "T_term", "U_term", "riemann_term", "gauss_tail_term",
    "boundary_prob", "b_nor_envelope", "envelope_valid", "eta", "neural_kl", "window_tail",
    "step_bound", "terminal", "ledger_total", "slope", "violation", "wall_time",
)
TERMINAL_COLUMNS = ("T", "closed_form", "mc_estimate", "std_err", "rel_gap", "agree")
RATE_SLOPE_LIMIT = -0.28


def _int_list(s):
    return tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)


def _width_list(s):
    return tuple(int(v) for v in str(s).replace(" ", "").replace("x", ",").split(",") if v)


@dataclass(frozen=True)
class ExperimentConfig:
    rho: float = 0.5
    M: float = 0.25
    T: int = 4
    v2: float = 1.0
    n_list: tuple = (128, 256, 512, 1024, 2048, 4096)
    t_list: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    seed: int = 20240001
    mc_samples: int = 10 ** 6
    output_dir: str = "."
    kernel: str = "m0"
    fault_inject: str = "none"
    workers: int = 1
    count: int = 10 ** 5
    context: float = 0.2
    sample_n: int = 4096
    hidden_widths: tuple = (128, 128)
    train_steps: int = 5000

    def __post_init__(self):
        if self.v2 != 1.0:
            raise ValueError(f"only unit initial variance is supported, got v2={self.v2}")
        self.instance()
        if not self.n_list or any(n < 1 for n in self.n_list):
            raise ValueError("n_list entries must be >= 1")
        if any(t < 1 for t in self.t_list):
            raise ValueError("t_list entries must be >= 1")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if self.fault_inject not in FAULTS:
            raise ValueError(f"fault_inject must be one of {FAULTS}")
        if self.mc_samples < 1 or self.count < 0 or self.workers < 1 or self.sample_n < 1:
            raise ValueError("mc_samples, workers and sample_n must be >= 1, count >= 0")

    def instance(self, T=None):
        return ProblemInstance(self.rho, self.M, self.T if T is None else T)

    def mlp(self, n, t):
        return MLPConfig(hidden_widths=self.hidden_widths, steps=self.train_steps, seed=point_seed(self.seed, n, t))


_PARSERS = {
    "rho": float, "M": float, "T": int, "v2": float, "n_list": _int_list, "t_list": _int_list,
    "seed": int, "mc_samples": lambda s: int(float(s)), "output_dir": str, "kernel": str,
    "fault_inject": str, "workers": int, "count": lambda s: int(float(s)), "context": float,
    "sample_n": int, "hidden_widths": _width_list, "train_steps": int,
}


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _PARSERS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _PARSERS[key](value)
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides``."""
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _PARSERS[k](v) if isinstance(v, str) else v
    return ExperimentConfig(**values)


def dump_config(cfg):
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def point_seed(seed, *keys):
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def fit_slope(n, values):
    """Least-squares slope of log(values) against log(n)."""
    n = np.asarray(n, dtype=float)
    v = np.asarray(values, dtype=float)
    if n.size < 2 or np.any(v <= 0):
        return math.nan
    return float(np.polyfit(np.log(n), np.log(v), 1)[0])


def _map(cfg, fn, items):
    if cfg.workers == 1 or len(items) == 1:
        return [fn(cfg, it) for it in items]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, [cfg] * len(items), items))


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_value(r[k]) for k in columns})


def _csv_value(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# rates


def neural_mixture(cfg, inst, t, spec, checkpoint_dir=None):
    source = train_logit_net(inst, spec, cfg.mlp(spec.n, t))
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        save_checkpoint(source.eval, os.path.join(checkpoint_dir, f"relu_n{spec.n}_t{t}.txt"))
    return MixtureDensity(spec, source)


def rate_point(cfg, n):
    """All rows of the rate sweep at resolution ``n``."""
    inst = cfg.instance()
    spec = build_partition(n)
    rows, etas, tails = [], [], []
    for t in range(1, inst.T + 1):
        start = time.perf_counter()
        d_kl = stepwise_kl(inst, t, infeasible_mixture(inst, spec)).value
        eta = tail = 0.0
        neural_kl = math.nan
        if cfg.kernel == "neural":
            mix = neural_mixture(cfg, inst, t, spec, os.path.join(cfg.output_dir, "checkpoints"))
            eta = mix.logits.eta
            tail = window_tail_term(inst, t, spec, eta)
            neural_kl = stepwise_kl(inst, t, mix).value
        sb = step_bound(inst, t, spec, eta, tail)
        measured = neural_kl if cfg.kernel == "neural" else d_kl
        violation = bool(measured > sb.total) or bool(n >= n_star(inst, t) and d_kl > sb.b_nor)
        rows.append({
            "n": n, "t": t, "d_kl": d_kl, "b_nor": sb.b_nor, "L_term": sb.L_term, "T_term": sb.T_term,
            "U_term": sb.U_term, "riemann_term": sb.riemann_term, "gauss_tail_term": sb.gauss_tail_term,
            "boundary_prob": sb.boundary_prob, "b_nor_envelope": b_nor_envelope(inst, t, n),
            "envelope_valid": sb.envelope_valid, "eta": eta, "neural_kl": neural_kl, "window_tail": tail,
            "step_bound": sb.total, "violation": violation, "wall_time": time.perf_counter() - start,
        })
        etas.append(eta)
        tails.append(tail)
    ledger = assemble_ledger(inst, spec, etas, tails)
    for r in rows:
        r["terminal"] = ledger.terminal
        r["ledger_total"] = ledger.total
    return rows


def cmd_rates(cfg):
    """Sweep ``n_list``; write ``rates.csv`` and ``rate_plot.svg``.

    Returns ``(rows, slopes)`` with one fitted slope per step.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = [r for chunk in _map(cfg, rate_point, list(cfg.n_list)) for r in chunk]
    slopes = {}
    for t in range(1, cfg.T + 1):
        sel = [r for r in rows if r["t"] == t]
        slopes[t] = fit_slope([r["n"] for r in sel], [r["d_kl"] for r in sel])
        for r in sel:
            r["slope"] = slopes[t]
    _write_csv(os.path.join(cfg.output_dir, "rates.csv"), RATE_COLUMNS, rows)
    with open(os.path.join(cfg.output_dir, "rate_plot.svg"), "w") as fh:
        fh.write(rate_plot_svg(cfg, rows))
    return rows, slopes


def rate_plot_svg(cfg, rows, width=640, height=420):
    """Log-log plot of measured stepwise KL with the bound curves overlaid."""
    inst = cfg.instance()
    ns = sorted({r["n"] for r in rows})
    series = []
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
    for t in range(1, inst.T + 1):
        sel = sorted((r for r in rows if r["t"] == t), key=lambda r: r["n"])
        color = palette[(t - 1) % len(palette)]
        series.append((f"d_KL t={t}", color, "", [(r["n"], r["d_kl"]) for r in sel]))
        series.append((f"B^Nor t={t}", color, "6,4", [(r["n"], r["b_nor"]) for r in sel]))
    grid = [n for n in ns if n >= n_star(inst, 1)]
    if grid:
        c_nor = c_nor_constant(inst, 1, grid)
        series.append(("C^Nor n^(-2/7)", "#555555", "2,3", [(n, c_nor * n ** (-2.0 / 7.0)) for n in ns]))

    pts = [(x, y) for s in series for x, y in s[3] if y > 0 and np.isfinite(y)]
    if not pts:
        return '<svg xmlns="http://www.w3.org/2000/svg"/>\n'
    lx = [math.log10(x) for x, _ in pts]
    ly = [math.log10(y) for _, y in pts]
    x0, x1 = min(lx), max(lx) if max(lx) > min(lx) else min(lx) + 1
    y0, y1 = math.floor(min(ly)), math.ceil(max(ly))
    y1 = y1 if y1 > y0 else y0 + 1
    left, right, top, bottom = 70, 170, 20, 50
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (math.log10(x) - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - math.log10(y)) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for n in ns:
        out.append(f'<line x1="{px(n):.1f}" y1="{top + ph}" x2="{px(n):.1f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(n):.1f}" y="{top + ph + 18}" text-anchor="middle">{n}</text>')
    for e in range(y0, y1 + 1):
        y = top + (y1 - e) / (y1 - y0) * ph
        out.append(f'<line x1="{left - 5}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">n</text>')
    out.append(f'<text x="15" y="{top + ph / 2}" transform="rotate(-90 15 {top + ph / 2})" text-anchor="middle">nats</text>')
    for i, (label, color, dash, data) in enumerate(series):
        data = [(x, y) for x, y in data if y > 0 and np.isfinite(y)]
        if not data:
            continue
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in data)
        style = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"{style}/>')
        ly_ = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly_ - 4}" x2="{left + pw + 30}" y2="{ly_ - 4}" stroke="{color}"{style}/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly_}">{label}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# terminal


def terminal_rows(cfg):
    """Closed-form terminal mismatch against a Monte Carlo average over contexts."""
    rows = []
    for T in cfg.t_list:
        inst = cfg.instance(T)
        rng = np.random.default_rng(point_seed(cfg.seed, 0, T))
        kl = context_mismatch(inst, rng.uniform(-inst.M, inst.M, cfg.mc_samples))
        mc, se = float(kl.mean()), float(kl.std(ddof=1) / math.sqrt(kl.size)) if kl.size > 1 else 0.0
        exact = terminal_mismatch(inst)
        rows.append({
            "T": T, "closed_form": exact, "mc_estimate": mc, "std_err": se,
            "rel_gap": abs(mc - exact) / exact if exact > 0 else 0.0,
            "agree": abs(mc - exact) <= 3.0 * se,
        })
    return rows


def cmd_terminal(cfg):
    """Write ``terminal.csv``, one row per horizon in ``t_list``."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = terminal_rows(cfg)
    _write_csv(os.path.join(cfg.output_dir, "terminal.csv"), TERMINAL_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# certify


def _corrupted_log_softmax(logits):
    # deliberate fault: logits doubled before normalizing
    return log_baseline_softmax(2.0 * np.asarray(logits, dtype=float))


def certify_point(cfg, name):
    """One named certificate; returns a flat dict of results."""
    inst = cfg.instance()
    n0 = cfg.n_list[0]
    rng = np.random.default_rng(point_seed(cfg.seed, n0, len(name)))
    log_softmax = _corrupted_log_softmax if cfg.fault_inject == "softmax" else log_baseline_softmax

    if name == "bridge":
        err = 0.0
        for t in range(1, inst.T + 1):
            for c in np.linspace(-inst.M, inst.M, 3):
                for x in (-1.5, 0.0, 1.5):
                    m, v = bayes_posterior_moments(inst, t, c, x)
                    k = true_reverse_kernel(inst, t, c, x)
                    err = max(err, abs(m - k.mean), abs(v - k.var))
        return {"pass": err < 1e-8, "max_error": err}

    if name == "decomposition":
        chain = ReverseChain(inst)
        err = max(abs(path_kl_report(inst, chain, c).path_total - 0.5 * inst.rho ** (2 * inst.T) * c * c)
                  for c in np.linspace(-inst.M, inst.M, 5))
        return {"pass": err < 1e-12, "max_error": err}

    if name == "dpi":
        slack = math.inf
        chain = ReverseChain(inst)
        for c in np.linspace(-inst.M, inst.M, 5):
            r = path_kl_report(inst, chain, c)
            slack = min(slack, r.path_total - r.output_kl)
        small = cfg.instance(1)
        mchain = ReverseChain(small, MixtureDensity(build_partition(n0), exact_logit_source(small, build_partition(n0)), log_softmax))
        r = path_kl_report(small, mchain, 0.5 * small.M)
        slack = min(slack, r.path_total - r.output_kl)
        return {"pass": slack >= -1e-10, "min_slack": slack}

    if name in ("stability", "sandwich"):
        spec = build_partition(n0)
        base = exact_logit_source(inst, spec)
        worst_ratio = worst_kl = -math.inf
        for eta in (0.01, 0.1, 1.0):
            shift = rng.uniform(-eta, eta, spec.n)
            a = MixtureDensity(spec, shifted_logit_source(base, shift, eta), log_softmax)
            # the fault hits only the candidate model; the reference stays correct
            b = MixtureDensity(spec, base)
            rep = stability_certificate(inst, 1, a, b, eta, strict=False)
            worst_ratio = max(worst_ratio, max(-rep.min_log_ratio, rep.max_log_ratio) - 2 * eta)
            worst_kl = max(worst_kl, rep.kl_a - rep.kl_b - 2 * eta)
        if name == "sandwich":
            return {"pass": worst_ratio <= 1e-12, "max_excess_log_ratio": worst_ratio}
        return {"pass": worst_kl <= 1e-10, "max_excess_kl": worst_kl}

    if name == "normalization":
        spec = build_partition(n0)
        mix = MixtureDensity(spec, exact_logit_source(inst, spec), log_softmax)
        lo = -spec.L - 12 * spec.sigma_tail
        y, w = composite_legendre(refined_breaks(lo, -lo, (-spec.L, spec.L), spec.sigma_interior / 4, 0.25), 16)
        err = max(abs(mix.density(z, y) @ w - 1.0) for z in (-2.0, 0.0, 0.7))
        return {"pass": err < 1e-8, "max_error": float(err)}

    if name == "markov_tail":
        small = cfg.instance(min(inst.T, 2))
        chain = ReverseChain(small)
        kl_max = 0.5 * small.M ** 2 * small.rho ** (4 * small.T)
        rep = context_kl_tail(small, chain, max(0.5 * kl_max, 1e-300), strict=False)
        return {"pass": rep.passed, "fraction": rep.fraction, "markov_bound": rep.markov_bound}

    if name == "dominance":
        spec = build_partition(n0)
        ok, worst = True, -math.inf
        for t in range(1, inst.T + 1):
            d = stepwise_kl(inst, t, MixtureDensity(spec, exact_logit_source(inst, spec), log_softmax)).value
            sb = step_bound(inst, t, spec)
            worst = max(worst, d - sb.b_nor)
            ok = ok and (d <= sb.b_nor or n0 < n_star(inst, t))
        return {"pass": ok, "max_excess": worst}

    if name == "window_tail":
        ok, worst = True, -math.inf
        for n in cfg.n_list:
            for t in range(1, inst.T + 1):
                p, bound, ns = window_tail_probability(inst, t, build_partition(n))
                if n >= ns:
                    worst = max(worst, p - bound)
                    ok = ok and p <= bound
        return {"pass": ok, "max_excess": worst}

    if name == "terminal":
        rows = terminal_rows(dataclasses.replace(cfg, t_list=(inst.T,)))
        return {"pass": all(r["agree"] for r in rows), "rel_gap": rows[0]["rel_gap"]}

    raise ValueError(f"unknown certificate {name!r}")


CERTIFICATES = ("bridge", "decomposition", "dpi", "stability", "sandwich", "normalization",
                "markov_tail", "dominance", "window_tail", "terminal")


def cmd_certify(cfg, names=CERTIFICATES):
    """Run every certificate; write ``certify.json``; return ``(passed, report)``."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    report = {"fault_inject": cfg.fault_inject, "seed": cfg.seed}
    results = _map(cfg, certify_point, list(names))
    for name, res in zip(names, results):
        for k, v in res.items():
            report[f"{name}.{k}"] = bool(v) if isinstance(v, (bool, np.bool_)) else float(v)
    passed = all(report[f"{name}.pass"] for name in names)
    report["all.pass"] = passed
    with open(os.path.join(cfg.output_dir, "certify.json"), "w") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    return passed, report


# ---------------------------------------------------------------------------
# sample


def build_chain(cfg, n=None):
    inst = cfg.instance()
    n = cfg.sample_n if n is None else n
    if cfg.kernel == "exact":
        return ReverseChain(inst)
    spec = build_partition(n)
    if cfg.kernel == "m0":
        return ReverseChain(inst, infeasible_mixture(inst, spec))
    ckpt = os.path.join(cfg.output_dir, "checkpoints")
    return ReverseChain(inst, [neural_mixture(cfg, inst, t, spec, ckpt) for t in range(1, inst.T + 1)])


def cmd_sample(cfg):
    """Draw ``count`` predictor samples; write ``samples.csv``; return summary stats."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    inst = cfg.instance()
    chain = build_chain(cfg)
    x = sample_predictor(chain, cfg.context, cfg.count, np.random.default_rng(point_seed(cfg.seed, cfg.sample_n)))
    with open(os.path.join(cfg.output_dir, "samples.csv"), "w") as fh:
        fh.write("x0\n")
        fh.writelines(f"{float(v)!r}\n" for v in x)
    law = compose_exact_chain(inst, cfg.context)
    n = x.size
    summary = {
        "count": n,
        "mean": float(x.mean()) if n else math.nan,
        "var": float(x.var(ddof=1)) if n > 1 else math.nan,
        "mean_std_err": float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
        "exact_mean": float(law.mean),
        "exact_var": float(law.var),
        "ks_distance": ks_distance(x, law),
    }
    if cfg.kernel != "exact" and inst.T <= 2:
        summary["output_kl"] = output_kl_small_T(inst, chain, cfg.context).value
    return summary
