# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels.

The Python-visible API mirrors ``_kernels_py`` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, erfc, M_PI

cnp.import_array()

cdef double LOG_SQRT_2PI = 0.5 * log(2.0 * M_PI)
cdef double SQRT1_2 = 0.7071067811865476


cdef inline double _log_ndtr(double x) noexcept nogil:
    cdef double x2, s
    if x > 0.0:
        return log1p(-0.5 * erfc(x * SQRT1_2))
    if x > -30.0:
        return log(0.5 * erfc(-x * SQRT1_2))
    # asymptotic expansion of the Mills ratio in the far left tail
    x2 = 1.0 / (x * x)
    s = 1.0 - x2 * (1.0 - 3.0 * x2 * (1.0 - 5.0 * x2 * (1.0 - 7.0 * x2 * (1.0 - 9.0 * x2))))
    return -0.5 * x * x - log(-x) - LOG_SQRT_2PI + log(s)


cdef inline double _mills(double x) noexcept nogil:
    return exp(-0.5 * x * x - LOG_SQRT_2PI - _log_ndtr(x))


def log_ndtr_array(x):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _log_ndtr(xv[i])
    return out.reshape(np.shape(x))


def mills(x):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _mills(xv[i])
    return out.reshape(np.shape(x))


def sfa_terms(eps, mu, double su2, double sv2):
    cdef const double[::1] e = np.ascontiguousarray(eps, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0]
    cdef const double[::1] m = np.ascontiguousarray(
        np.broadcast_to(np.asarray(mu, dtype=np.float64), (n,)))
    ll = np.empty(n)
    ge = np.empty(n)
    gm = np.empty(n)
    gu = np.empty(n)
    gv = np.empty(n)
    cdef double[::1] llv = ll, gev = ge, gmv = gm, guv = gu, gvv = gv
    cdef double s2 = su2 + sv2
    cdef double s = sqrt(s2), su = sqrt(su2)
    cdef double D = sqrt(s2 * su2 * sv2)
    cdef double r, c, d, lc, ld, lam_c, lam_d, common
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            r = (e[i] - m[i]) / s
            c = (sv2 * m[i] + su2 * e[i]) / D
            d = m[i] / su
            lc = _log_ndtr(c)
            ld = _log_ndtr(d)
            llv[i] = -LOG_SQRT_2PI - 0.5 * log(s2) - 0.5 * r * r + lc - ld
            lam_c = exp(-0.5 * c * c - LOG_SQRT_2PI - lc)
            lam_d = exp(-0.5 * d * d - LOG_SQRT_2PI - ld)
            gev[i] = -r / s + lam_c * su2 / D
            gmv[i] = r / s + lam_c * sv2 / D - lam_d / su
            common = -0.5 / s2 + 0.5 * r * r / s2
            guv[i] = (common + lam_c * (e[i] / D - 0.5 * c * (su2 + s2) / (s2 * su2))
                      + 0.5 * lam_d * d / su2)
            gvv[i] = common + lam_c * (m[i] / D - 0.5 * c * (sv2 + s2) / (s2 * sv2))
    return ll, ge, gm, gu, gv


def bc_scores(eps, mu, double su2, double sv2):
    cdef const double[::1] e = np.ascontiguousarray(eps, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0]
    cdef const double[::1] m = np.ascontiguousarray(
        np.broadcast_to(np.asarray(mu, dtype=np.float64), (n,)))
    log_ce = np.empty(n)
    u_hat = np.empty(n)
    cdef double[::1] lv = log_ce, uv = u_hat
    cdef double s2 = su2 + sv2
    cdef double sig = sqrt(su2 * sv2 / s2)
    cdef double ms, c
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            ms = (sv2 * m[i] + su2 * e[i]) / s2
            c = ms / sig
            lv[i] = -ms + 0.5 * sig * sig + _log_ndtr(c - sig) - _log_ndtr(c)
            uv[i] = ms + sig * _mills(c)
    return log_ce, u_hat


def garch_filter(resid, double omega, double alpha, double beta, double h0):
    cdef const double[::1] r = np.ascontiguousarray(resid, dtype=np.float64)
    cdef Py_ssize_t t, n = r.shape[0]
    h = np.empty(n)
    cdef double[::1] hv = h
    if n == 0:
        return h
    with nogil:
        hv[0] = h0
        for t in range(1, n):
            hv[t] = omega + alpha * r[t - 1] * r[t - 1] + beta * hv[t - 1]
    return h


def garch_loglik_grad(resid, double omega, double alpha, double beta, double h0):
    cdef const double[::1] r = np.ascontiguousarray(resid, dtype=np.float64)
    cdef Py_ssize_t t, n = r.shape[0]
    h = np.empty(n)
    scores = np.zeros((n, 3))
    cdef double[::1] hv = h
    cdef double[:, ::1] sc = scores
    cdef double d0 = 0.0, d1 = 0.0, d2 = 0.0, w, r2, ll = 0.0
    with nogil:
        hv[0] = h0
        for t in range(n):
            if t > 0:
                # derivative recursion uses h[t-1] before it is overwritten
                d0 = 1.0 + beta * d0
                d1 = r[t - 1] * r[t - 1] + beta * d1
                d2 = hv[t - 1] + beta * d2
                hv[t] = omega + alpha * r[t - 1] * r[t - 1] + beta * hv[t - 1]
            r2 = r[t] * r[t]
            ll += -0.5 * (2.0 * LOG_SQRT_2PI + log(hv[t]) + r2 / hv[t])
            w = -0.5 * (1.0 / hv[t] - r2 / (hv[t] * hv[t]))
            sc[t, 0] = d0 * w
            sc[t, 1] = d1 * w
            sc[t, 2] = d2 * w
    return ll, scores.sum(axis=0), scores, h


def lcv_grid(u, v, hu, hv, Py_ssize_t block=128):
    """Leave-one-out log-likelihood on the (hu, hv) bandwidth grid."""
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[::1] hua = np.ascontiguousarray(hu, dtype=np.float64)
    cdef const double[::1] hva = np.ascontiguousarray(hv, dtype=np.float64)
    cdef Py_ssize_t n = uu.shape[0], G1 = hua.shape[0], G2 = hva.shape[0]
    S_arr = np.zeros((n, G1, G2))
    cdef double[:, :, ::1] S = S_arr
    ka_arr = np.empty(G1)
    kb_arr = np.empty(G2)
    cdef double[::1] ka = ka_arr, kb = kb_arr
    cdef double[::1] cu = np.empty(G1), cv = np.empty(G2)
    cdef Py_ssize_t i, j, a, b
    cdef double du0, du1, du2, dv0, dv1, dv2, h
    for a in range(G1):
        cu[a] = 1.0 / (hua[a] * sqrt(2.0 * M_PI))
    for b in range(G2):
        cv[b] = 1.0 / (hva[b] * sqrt(2.0 * M_PI))
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                # reflected kernel is symmetric in (i, j): compute once, add to both
                du0 = uu[i] - uu[j]
                du1 = uu[i] + uu[j]
                du2 = uu[i] + uu[j] - 2.0
                dv0 = vv[i] - vv[j]
                dv1 = vv[i] + vv[j]
                dv2 = vv[i] + vv[j] - 2.0
                for a in range(G1):
                    h = hua[a]
                    ka[a] = cu[a] * (exp(-0.5 * du0 * du0 / (h * h))
                                     + exp(-0.5 * du1 * du1 / (h * h))
                                     + exp(-0.5 * du2 * du2 / (h * h)))
                for b in range(G2):
                    h = hva[b]
                    kb[b] = cv[b] * (exp(-0.5 * dv0 * dv0 / (h * h))
                                     + exp(-0.5 * dv1 * dv1 / (h * h))
                                     + exp(-0.5 * dv2 * dv2 / (h * h)))
                for a in range(G1):
                    for b in range(G2):
                        S[i, a, b] += ka[a] * kb[b]
                        S[j, a, b] += ka[a] * kb[b]
    return np.log(np.maximum(S_arr / (n - 1), 1e-300)).sum(axis=0)
