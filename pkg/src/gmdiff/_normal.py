"""Standard-normal helpers that stay finite far into the tails."""

import math

import numpy as np
from scipy.special import erf, log_ndtr

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def log1mexp(x):
    """log(1 - exp(x)) for x < 0, accurate on both sides of -log 2."""
    x = np.asarray(x, dtype=float)
    small = x > -math.log(2.0)
    with np.errstate(divide="ignore"):
        return np.where(small, np.log(-np.expm1(np.where(small, x, -1.0))),
                        np.log1p(-np.exp(np.where(small, -1.0, x))))


def log_ndtr_diff(a, b):
    """log(Phi(b) - Phi(a)) for a < b, elementwise.

    Same-sign intervals are handled in the tail that keeps both CDF values
    away from 1, so the result never underflows to -inf for finite input.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.empty(a.shape)

    upper = a >= 0.0
    lower = b <= 0.0
    mid = ~(upper | lower)

    if upper.any():
        la = log_ndtr(-a[upper])
        lb = log_ndtr(-b[upper])
        out[upper] = la + log1mexp(np.minimum(lb - la, -np.finfo(float).tiny))
    if lower.any():
        la = log_ndtr(a[lower])
        lb = log_ndtr(b[lower])
        out[lower] = lb + log1mexp(np.minimum(la - lb, -np.finfo(float).tiny))
    if mid.any():
        # a < 0 < b: both erf terms are positive, no cancellation.
        s = 1.0 / math.sqrt(2.0)
        out[mid] = np.log(0.5 * (erf(b[mid] * s) + erf(-a[mid] * s)))
    return out


def log_two_sided_tail(lo, hi):
    """log(Phi(lo) + 1 - Phi(hi)), the mass outside [lo, hi)."""
    return np.logaddexp(log_ndtr(lo), log_ndtr(-np.asarray(hi, dtype=float)))


def norm_logpdf(x, mean=0.0, var=1.0):
    x = np.asarray(x, dtype=float)
    return -0.5 * (x - mean) ** 2 / var - 0.5 * np.log(var) - LOG_SQRT_2PI


def norm_sf(x):
    return np.exp(log_ndtr(-np.asarray(x, dtype=float)))


def logsumexp_last(a):
    """``log(sum(exp(a), axis=-1))``; overwrites ``a``.

    Lean replacement for ``scipy.special.logsumexp`` on the hot path, which
    copies and promotes its input on every call.
    """
    m = a.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    a -= m
    np.exp(a, out=a)
    return np.log(a.sum(axis=-1)) + m[..., 0]
