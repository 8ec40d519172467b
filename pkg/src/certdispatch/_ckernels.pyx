# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs, sqrt, isfinite, INFINITY

cnp.import_array()

cdef double SNAP_TOL = 1e-12
cdef double TIE_TOL = 1e-12


cdef inline double _sigmoid(double a) nogil:
    cdef double ea
    if a >= 0:
        return 1.0 / (1.0 + exp(-a))
    ea = exp(a)
    return ea / (1.0 + ea)


cdef inline double _softplus(double a) nogil:
    return (a if a > 0 else 0.0) + log1p(exp(-fabs(a)))


def double_softplus(x, lower, upper):
    xa = np.ascontiguousarray(x, dtype=np.float64)
    squeeze = xa.ndim == 1
    if squeeze:
        xa = xa.reshape(1, -1)
    cdef Py_ssize_t n = xa.shape[0], k = xa.shape[1], i, j
    cdef const double[:, ::1] xv = xa
    cdef const double[::1] lo = np.ascontiguousarray(np.broadcast_to(np.asarray(lower, dtype=np.float64), (k,)))
    cdef const double[::1] up = np.ascontiguousarray(np.broadcast_to(np.asarray(upper, dtype=np.float64), (k,)))
    y = np.empty((n, k))
    dy = np.empty((n, k))
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] dv = dy
    cdef double a, b, l, u
    cdef bint lf, uf
    with nogil:
        for j in range(k):
            l = lo[j]
            u = up[j]
            lf = isfinite(l)
            uf = isfinite(u)
            for i in range(n):
                if lf and uf:
                    a = xv[i, j] - l
                    b = xv[i, j] - u
                    # anchor on the nearer bound; (x - l) - (x - u) cancels badly for large |x|
                    if a + b > 0:
                        yv[i, j] = u - (_softplus(-b) - _softplus(-a))
                    else:
                        yv[i, j] = l + (_softplus(a) - _softplus(b))
                    # rounding can leave the interval by an ulp
                    if yv[i, j] > u:
                        yv[i, j] = u
                    elif yv[i, j] < l:
                        yv[i, j] = l
                    dv[i, j] = _sigmoid(a) - _sigmoid(b)
                elif lf:
                    a = xv[i, j] - l
                    yv[i, j] = l + _softplus(a)
                    dv[i, j] = _sigmoid(a)
                elif uf:
                    a = u - xv[i, j]
                    yv[i, j] = u - _softplus(a)
                    dv[i, j] = _sigmoid(a)
                else:
                    yv[i, j] = xv[i, j]
                    dv[i, j] = 1.0
    if squeeze:
        return y[0], dy[0]
    return y, dy


def proportional_response(p_tilde, total, p_lower, p_upper):
    pa = np.ascontiguousarray(np.atleast_2d(p_tilde), dtype=np.float64)
    cdef Py_ssize_t n = pa.shape[0], g = pa.shape[1], i, j
    cdef const double[:, ::1] pv = pa
    cdef const double[::1] tot = np.ascontiguousarray(np.broadcast_to(np.asarray(total, dtype=np.float64), (n,)))
    cdef const double[::1] pl = np.ascontiguousarray(p_lower, dtype=np.float64)
    cdef const double[::1] pu = np.ascontiguousarray(p_upper, dtype=np.float64)
    out = np.empty((n, g))
    eta_a = np.empty(n)
    code_a = np.empty(n, dtype=np.int8)
    cdef double[:, ::1] ov = out
    cdef double[::1] ev = eta_a
    cdef signed char[::1] cv = code_a
    cdef double L = 0.0, U = 0.0, s, room, eta
    cdef bint up
    for j in range(g):
        L += pl[j]
        U += pu[j]
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(g):
                s += pv[i, j]
            up = s < tot[i]
            if up:
                room = U - s
                if room <= SNAP_TOL:
                    eta = 1.0
                    cv[i] = 2
                else:
                    eta = (tot[i] - s) / room
                    cv[i] = 1
                for j in range(g):
                    ov[i, j] = pv[i, j] + eta * (pu[j] - pv[i, j])
            else:
                room = s - L
                if room <= SNAP_TOL:
                    eta = 1.0
                    cv[i] = -2
                else:
                    eta = (s - tot[i]) / room
                    cv[i] = -1
                for j in range(g):
                    ov[i, j] = pv[i, j] + eta * (pl[j] - pv[i, j])
            ev[i] = eta
    return out, eta_a, code_a


def proportional_response_vjp(grad, p_tilde, total, p_lower, p_upper, eta, code):
    ga = np.ascontiguousarray(np.atleast_2d(grad), dtype=np.float64)
    pa = np.ascontiguousarray(np.atleast_2d(p_tilde), dtype=np.float64)
    cdef Py_ssize_t n = pa.shape[0], g = pa.shape[1], i, j
    cdef const double[:, ::1] gv = ga
    cdef const double[:, ::1] pv = pa
    cdef const double[::1] tot = np.ascontiguousarray(np.broadcast_to(np.asarray(total, dtype=np.float64), (n,)))
    cdef const double[::1] pl = np.ascontiguousarray(p_lower, dtype=np.float64)
    cdef const double[::1] pu = np.ascontiguousarray(p_upper, dtype=np.float64)
    cdef const double[::1] ev = np.ascontiguousarray(eta, dtype=np.float64)
    cdef const signed char[::1] cv = np.ascontiguousarray(code, dtype=np.int8)
    out = np.empty((n, g))
    cdef double[:, ::1] ov = out
    cdef double L = 0.0, U = 0.0, s, deta, dot, tgt
    for j in range(g):
        L += pl[j]
        U += pu[j]
    with nogil:
        for i in range(n):
            if cv[i] == 2 or cv[i] == -2:
                for j in range(g):
                    ov[i, j] = 0.0
                continue
            s = 0.0
            dot = 0.0
            for j in range(g):
                s += pv[i, j]
            for j in range(g):
                tgt = pu[j] if cv[i] > 0 else pl[j]
                dot += gv[i, j] * (tgt - pv[i, j])
            if cv[i] == 1:
                deta = (tot[i] - U) / ((U - s) * (U - s))
            else:
                deta = (tot[i] - L) / ((s - L) * (s - L))
            for j in range(g):
                ov[i, j] = gv[i, j] * (1.0 - ev[i]) + deta * dot
    return out


def smooth_split(a, s):
    aa = np.ascontiguousarray(a, dtype=np.float64)
    shape = aa.shape
    if aa.ndim == 1:
        aa = aa.reshape(1, -1)
    cdef Py_ssize_t n = aa.shape[0], k = aa.shape[1], i, j
    cdef const double[:, ::1] av = aa
    cdef const double[::1] sv = np.ascontiguousarray(np.broadcast_to(np.asarray(s, dtype=np.float64), (k,)))
    lo = np.empty((n, k))
    up = np.empty((n, k))
    dlo = np.empty((n, k))
    cdef double[:, ::1] lv = lo
    cdef double[:, ::1] uv = up
    cdef double[:, ::1] dv = dlo
    cdef double half, r, sj
    with nogil:
        for i in range(n):
            for j in range(k):
                sj = sv[j]
                half = 0.5 * av[i, j]
                r = sqrt(sj * sj + half * half)
                lv[i, j] = sj + half + r
                uv[i, j] = sj - half + r
                dv[i, j] = 0.5 + 0.25 * av[i, j] / r
    return lo.reshape(shape), up.reshape(shape), dlo.reshape(shape)


def hard_split(a):
    aa = np.ascontiguousarray(a, dtype=np.float64)
    shape = aa.shape
    cdef const double[::1] av = aa.reshape(-1)
    cdef Py_ssize_t n = av.shape[0], i
    pos = np.empty(n)
    neg = np.empty(n)
    cdef double[::1] pv = pos
    cdef double[::1] nv = neg
    with nogil:
        for i in range(n):
            pv[i] = av[i] if av[i] > 0 else 0.0
            nv[i] = -av[i] if av[i] < 0 else 0.0
    return pos.reshape(shape), neg.reshape(shape)


def overflow(pf, f_lower, f_upper):
    fa = np.ascontiguousarray(pf, dtype=np.float64)
    shape = fa.shape
    if fa.ndim == 1:
        fa = fa.reshape(1, -1)
    cdef Py_ssize_t n = fa.shape[0], k = fa.shape[1], i, j
    cdef const double[:, ::1] fv = fa
    cdef const double[::1] lo = np.ascontiguousarray(f_lower, dtype=np.float64)
    cdef const double[::1] hi = np.ascontiguousarray(f_upper, dtype=np.float64)
    xi = np.empty((n, k))
    sign = np.empty((n, k))
    cdef double[:, ::1] xv = xi
    cdef double[:, ::1] sv = sign
    cdef double over, under
    with nogil:
        for i in range(n):
            for j in range(k):
                over = fv[i, j] - hi[j]
                under = lo[j] - fv[i, j]
                if over > 0:
                    xv[i, j] = over
                    sv[i, j] = 1.0
                elif under > 0:
                    xv[i, j] = under
                    sv[i, j] = -1.0
                else:
                    xv[i, j] = 0.0
                    sv[i, j] = 0.0
    return xi.reshape(shape), sign.reshape(shape)


def ratio_test(x_b, delta, lb, ub, double piv_tol, double flip_len, bint bland, basis):
    cdef const double[::1] xv = np.ascontiguousarray(x_b, dtype=np.float64)
    cdef const double[::1] dv = np.ascontiguousarray(delta, dtype=np.float64)
    cdef const double[::1] lv = np.ascontiguousarray(lb, dtype=np.float64)
    cdef const double[::1] uv = np.ascontiguousarray(ub, dtype=np.float64)
    cdef const long[::1] bv = np.ascontiguousarray(basis, dtype=np.int_)
    cdef Py_ssize_t m = xv.shape[0], i
    cdef Py_ssize_t row = -1
    cdef double t_min = INFINITY, lim, cut, best_key, key, room
    lims = np.empty(m)
    cdef double[::1] lm = lims
    for i in range(m):
        lim = INFINITY
        if dv[i] < -piv_tol:
            room = xv[i] - lv[i]
            lim = (room if room > 0 else 0.0) / -dv[i]
        elif dv[i] > piv_tol:
            room = uv[i] - xv[i]
            lim = (room if room > 0 else 0.0) / dv[i]
        lm[i] = lim
        if lim < t_min:
            t_min = lim
    if not isfinite(t_min) or flip_len <= t_min:
        return flip_len, -1, False
    cut = t_min + TIE_TOL * (t_min if t_min > 1.0 else 1.0)
    best_key = INFINITY
    for i in range(m):
        if lm[i] <= cut:
            if bland:
                key = <double> bv[i]
            else:
                key = -fabs(dv[i])
            if key < best_key:
                best_key = key
                row = i
    return lm[row], row, dv[row] > 0
