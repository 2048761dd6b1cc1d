# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled sequential recursions (GARCH filter/simulation, mean-reverting
price path). Arithmetic order matches the pure-Python fallback exactly so
both backends are bit-identical."""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, sqrt

cnp.import_array()


def garch_loglik_grad(double[::1] r, double omega, double alpha, double beta,
                      double sigma0_sq):
    """Gaussian quasi-log-likelihood of GARCH(1,1) and its gradient.

    Returns (loglik, d_omega, d_alpha, d_beta).
    """
    cdef Py_ssize_t n = r.shape[0]
    cdef double s = sigma0_sq
    cdef double so = 0.0, sa = 0.0, sb = 0.0  # d sigma^2 / d param
    cdef double ll = 0.0, go = 0.0, ga = 0.0, gb = 0.0
    cdef double rt, w, s_prev
    cdef Py_ssize_t t
    for t in range(n):
        rt = r[t]
        ll += -0.5 * (log(s) + rt * rt / s)
        w = 0.5 * (rt * rt - s) / (s * s)
        go += w * so
        ga += w * sa
        gb += w * sb
        s_prev = s
        so = 1.0 + beta * so
        sa = rt * rt + beta * sa
        sb = s_prev + beta * sb
        s = omega + alpha * rt * rt + beta * s_prev
    return ll, go, ga, gb


def garch_sigma2_path(double[::1] r, double omega, double alpha, double beta,
                      double sigma0_sq):
    """Conditional variance path implied by observed returns."""
    cdef Py_ssize_t n = r.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double s = sigma0_sq
    cdef Py_ssize_t t
    for t in range(n):
        out[t] = s
        s = omega + alpha * r[t] * r[t] + beta * s
    return out_arr


def garch_simulate(double omega, double alpha, double beta, double sigma0_sq,
                   double[::1] eps):
    """Simulate r_t = sigma_t * eps_t; returns (returns, sigma path)."""
    cdef Py_ssize_t n = eps.shape[0]
    r_arr = np.empty(n, dtype=np.float64)
    sig_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] r = r_arr
    cdef double[::1] sig = sig_arr
    cdef double s = sigma0_sq
    cdef double st, rt
    cdef Py_ssize_t t
    for t in range(n):
        st = sqrt(s)
        rt = st * eps[t]
        sig[t] = st
        r[t] = rt
        s = omega + alpha * rt * rt + beta * s
    return r_arr, sig_arr


def vasicek_path(double theta, double mu, double sigma, double p0, double dt,
                 double[::1] eps):
    """Euler path of dP = theta (mu - P) dt + sigma dW; length len(eps)+1."""
    cdef Py_ssize_t n = eps.shape[0]
    out_arr = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double p = p0
    cdef double sdt = sqrt(dt)
    cdef Py_ssize_t t
    out[0] = p
    for t in range(n):
        p = p + theta * (mu - p) * dt + sigma * sdt * eps[t]
        out[t + 1] = p
    return out_arr
