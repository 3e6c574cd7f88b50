"""Error-free float transforms used by the server aggregation step.

The server update w' = w - lr * sum_i b_i * (w - f_i) is evaluated
coordinatewise in double-double precision (value + error term). Keeping the
residuals w - f_i exact is what makes the aggregation identities hold at the
bit level: all-zero updates leave w untouched, a single party with unit
weight hands back exactly its final model, and bitwise-equal coefficient
vectors produce bitwise-equal aggregates.

All helpers are vectorized over numpy arrays and assume round-to-nearest
float64 (no FMA is required).
"""

from __future__ import annotations

import numpy as np

_SPLITTER = 134217729.0  # 2**27 + 1, Dekker's splitting constant


def two_sum(a, b):
    """(s, e) with s = fl(a + b) and s + e == a + b exactly."""
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


def two_diff(a, b):
    """(d, e) with d = fl(a - b) and d + e == a - b exactly."""
    d = a - b
    bb = d - a
    e = (a - (d - bb)) - (b + bb)
    return d, e


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def two_prod(a, b):
    """(p, e) with p = fl(a * b) and p + e == a * b exactly."""
    p = a * b
    a_hi, a_lo = _split(a)
    b_hi, b_lo = _split(b)
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


def combine_updates(base, coeffs, residual_targets, scale):
    """fl(base - scale * sum_i coeffs[i] * (base - residual_targets[i])).

    base: float64 vector. coeffs: per-term float scalars. residual_targets:
    per-term float64 vectors. The sum runs in list order; each residual
    base - target is expanded exactly, products and the final subtraction
    are tracked with error terms, and the result is rounded once at the end.
    """
    acc_hi = np.zeros_like(base)
    acc_lo = np.zeros_like(base)
    for coeff, target in zip(coeffs, residual_targets):
        r_hi, r_lo = two_diff(base, target)
        p_hi, p_lo = two_prod(coeff, r_hi)
        p_lo = p_lo + coeff * r_lo
        acc_hi, carry = two_sum(acc_hi, p_hi)
        acc_lo = acc_lo + (carry + p_lo)
    if scale != 1.0:
        s_hi, s_lo = two_prod(scale, acc_hi)
        acc_hi, acc_lo = s_hi, s_lo + scale * acc_lo
    out_hi, out_lo = two_diff(base, acc_hi)
    return out_hi + (out_lo - acc_lo)
