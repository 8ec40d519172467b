"""Numpy implementations of the elementwise kernels.

Used when the compiled extension is unavailable, and as the reference the compiled
kernels are tested against. Every function here has a twin in ``_ckernels.pyx``
with the same signature and semantics.
"""
from __future__ import annotations

import numpy as np

SNAP_TOL = 1e-12
TIE_TOL = 1e-12


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _log1pexp_neg_abs(a):
    return np.log1p(np.exp(-np.abs(a)))


def _softplus(a):
    return np.maximum(a, 0.0) + _log1pexp_neg_abs(a)


def double_softplus(x, lower, upper):
    """Bound ``x`` columnwise into ``(lower, upper)``; returns ``(y, dy/dx)``."""
    x = np.asarray(x, dtype=float)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), x.shape[-1:])
    upper = np.broadcast_to(np.asarray(upper, dtype=float), x.shape[-1:])
    y = np.empty_like(x)
    dy = np.empty_like(x)
    lo_fin = np.isfinite(lower)
    up_fin = np.isfinite(upper)

    both = lo_fin & up_fin
    if both.any():
        l, u = lower[both], upper[both]
        a = x[..., both] - l
        b = x[..., both] - u
        # anchor on the nearer bound; (x - l) - (x - u) cancels badly for large |x|
        val = np.where(a + b > 0, u - (_softplus(-b) - _softplus(-a)),
                       l + (_softplus(a) - _softplus(b)))
        # rounding can leave the interval by an ulp
        y[..., both] = np.minimum(np.maximum(val, l), u)
        dy[..., both] = _sigmoid(a) - _sigmoid(b)
    only_lo = lo_fin & ~up_fin
    if only_lo.any():
        a = x[..., only_lo] - lower[only_lo]
        y[..., only_lo] = lower[only_lo] + np.maximum(a, 0.0) + _log1pexp_neg_abs(a)
        dy[..., only_lo] = _sigmoid(a)
    only_up = ~lo_fin & up_fin
    if only_up.any():
        a = upper[only_up] - x[..., only_up]
        y[..., only_up] = upper[only_up] - (np.maximum(a, 0.0) + _log1pexp_neg_abs(a))
        dy[..., only_up] = _sigmoid(a)
    free = ~lo_fin & ~up_fin
    if free.any():
        y[..., free] = x[..., free]
        dy[..., free] = 1.0
    return y, dy


def proportional_response(p_tilde, total, p_lower, p_upper):
    """Row-wise repair of bound-feasible dispatches onto ``sum(p) == total``.

    Returns ``(p_hat, eta, code)`` with code +1 (stretch up), -1 (shrink down),
    +2/-2 when the denominator was degenerate and the row snapped to a bound.
    """
    p_tilde = np.atleast_2d(np.asarray(p_tilde, dtype=float))
    total = np.broadcast_to(np.asarray(total, dtype=float), p_tilde.shape[:1])
    s = p_tilde.sum(axis=1)
    up_room = p_upper.sum() - s
    down_room = s - p_lower.sum()
    up = s < total

    eta = np.empty_like(s)
    code = np.where(up, 1, -1).astype(np.int8)
    snap_up = up & (up_room <= SNAP_TOL)
    snap_down = ~up & (down_room <= SNAP_TOL)
    ok_up = up & ~snap_up
    ok_down = ~up & ~snap_down
    eta[ok_up] = (total[ok_up] - s[ok_up]) / up_room[ok_up]
    eta[ok_down] = (s[ok_down] - total[ok_down]) / down_room[ok_down]
    eta[snap_up | snap_down] = 1.0
    code[snap_up] = 2
    code[snap_down] = -2

    target = np.where(up[:, None], p_upper[None, :], p_lower[None, :])
    p_hat = p_tilde + eta[:, None] * (target - p_tilde)
    return p_hat, eta, code


def proportional_response_vjp(grad, p_tilde, total, p_lower, p_upper, eta, code):
    grad = np.atleast_2d(grad)
    p_tilde = np.atleast_2d(p_tilde)
    total = np.broadcast_to(np.asarray(total, dtype=float), p_tilde.shape[:1])
    s = p_tilde.sum(axis=1)
    up = code > 0
    target = np.where(up[:, None], p_upper[None, :], p_lower[None, :])
    # d eta / d s for each branch
    deta = np.zeros_like(s)
    iu = code == 1
    idn = code == -1
    U = p_upper.sum()
    L = p_lower.sum()
    deta[iu] = (total[iu] - U) / (U - s[iu]) ** 2
    deta[idn] = (total[idn] - L) / (s[idn] - L) ** 2
    out = grad * (1.0 - eta)[:, None]
    out += (deta * np.sum(grad * (target - p_tilde), axis=1))[:, None]
    snapped = np.abs(code) == 2
    out[snapped] = 0.0
    return out


def smooth_split(a, s):
    """Smooth positive/negative parts: ``lo - up == a`` with both strictly positive.

    ``lo = s + a/2 + sqrt(s^2 + a^2/4)``, ``up = s - a/2 + sqrt(...)``.
    Returns ``(lo, up, dlo/da)``; ``dup/da = dlo/da - 1``.
    """
    a = np.asarray(a, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), a.shape[-1:])
    half = 0.5 * a
    r = np.sqrt(s * s + half * half)
    lo = s + half + r
    up = s - half + r
    dlo = 0.5 + 0.25 * a / r
    return lo, up, dlo


def hard_split(a):
    a = np.asarray(a, dtype=float)
    return np.maximum(a, 0.0), np.maximum(-a, 0.0)


def overflow(pf, f_lower, f_upper):
    """Minimal overflow per branch and its derivative sign with respect to the flow."""
    pf = np.asarray(pf, dtype=float)
    over = pf - f_upper
    under = f_lower - pf
    xi = np.maximum(np.maximum(over, 0.0), np.maximum(under, 0.0))
    sign = np.where(over > 0, 1.0, np.where(under > 0, -1.0, 0.0))
    return xi, sign


def ratio_test(x_b, delta, lb, ub, piv_tol, flip_len, bland, basis):
    """Bounded-variable ratio test.

    ``delta`` is the rate of change of each basic variable per unit step. Returns
    ``(step, row, to_upper)`` where ``row == -1`` means the entering variable
    reaches its own opposite bound first (or ``step`` is infinite).
    """
    limits = np.full(x_b.shape, np.inf)
    dec = delta < -piv_tol
    inc = delta > piv_tol
    limits[dec] = np.maximum(x_b[dec] - lb[dec], 0.0) / -delta[dec]
    limits[inc] = np.maximum(ub[inc] - x_b[inc], 0.0) / delta[inc]
    t_min = limits.min(initial=np.inf)
    if not np.isfinite(t_min) or flip_len <= t_min:
        return flip_len, -1, False
    cand = np.flatnonzero(limits <= t_min + TIE_TOL * max(1.0, t_min))
    if bland:
        row = int(cand[np.argmin(basis[cand])])
    else:
        row = int(cand[np.argmax(np.abs(delta[cand]))])
    return float(limits[row]), row, bool(delta[row] > 0)
