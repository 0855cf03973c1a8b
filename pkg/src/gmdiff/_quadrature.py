"""Quadrature rules shared by the estimators.

All rules return ``(nodes, weights)``; expectation rules have weights that
sum to one.
"""

from functools import lru_cache

import numpy as np

CONTEXT_NODES = 64


@lru_cache(maxsize=None)
def _legendre(order):
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def _hermite_e(order):
    # probabilists' Hermite: weight exp(-x^2/2)
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(lo, hi, order):
    x, w = _legendre(order)
    half = 0.5 * (hi - lo)
    return half * x + 0.5 * (hi + lo), half * w


def gaussian_expectation(mean, var, order):
    """Nodes/weights for E[g(X)], X ~ N(mean, var)."""
    x, w = _hermite_e(order)
    return mean + np.sqrt(var) * x, w.copy()


def context_rule(M, order=CONTEXT_NODES):
    """Expectation rule for C ~ Unif[-M, M]."""
    c, w = gauss_legendre(-M, M, order)
    return c, w / (2.0 * M) if M > 0 else np.full_like(w, 1.0 / len(w))


def composite_legendre(breaks, order):
    """Composite Gauss-Legendre rule over consecutive breakpoints."""
    breaks = np.asarray(breaks, dtype=float)
    x, w = _legendre(order)
    a, b = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (b - a)
    return (half * x + 0.5 * (a + b)).ravel(), (half * w).ravel()


def refined_breaks(lo, hi, features, fine, coarse):
    """Breakpoints on [lo, hi] that resolve sharp features.

    Around every feature location the panel edges grow geometrically from
    ``fine`` until they reach ``coarse``; elsewhere panels are at most
    ``coarse`` wide.
    """
    pts = [lo, hi]
    for f in features:
        if not lo < f < hi:
            continue
        pts.append(f)
        d = fine
        while d < coarse:
            pts.extend((f - d, f + d))
            d *= 2.0
    pts = np.unique(np.clip(pts, lo, hi))
    out = [pts[0]]
    for p in pts[1:]:
        gap = p - out[-1]
        if gap <= 0.0:
            continue
        k = int(np.ceil(gap / coarse))
        out.extend(out[-1] + gap * np.arange(1, k + 1) / k)
    return np.asarray(out)
