"""Pure-Python fallback for the compiled recursions.

Arithmetic order mirrors ``_native.pyx`` line for line so the two backends
produce bit-identical results.
"""

import math

import numpy as np


def garch_loglik_grad(r, omega, alpha, beta, sigma0_sq):
    r = np.asarray(r, dtype=np.float64)
    s = float(sigma0_sq)
    so = sa = sb = 0.0
    ll = go = ga = gb = 0.0
    for rt in r.tolist():
        ll += -0.5 * (math.log(s) + rt * rt / s)
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


def garch_sigma2_path(r, omega, alpha, beta, sigma0_sq):
    r = np.asarray(r, dtype=np.float64)
    out = np.empty(len(r), dtype=np.float64)
    s = float(sigma0_sq)
    for t, rt in enumerate(r.tolist()):
        out[t] = s
        s = omega + alpha * rt * rt + beta * s
    return out


def garch_simulate(omega, alpha, beta, sigma0_sq, eps):
    eps = np.asarray(eps, dtype=np.float64)
    n = len(eps)
    r = np.empty(n, dtype=np.float64)
    sig = np.empty(n, dtype=np.float64)
    s = float(sigma0_sq)
    for t, e in enumerate(eps.tolist()):
        st = math.sqrt(s)
        rt = st * e
        sig[t] = st
        r[t] = rt
        s = omega + alpha * rt * rt + beta * s
    return r, sig


def vasicek_path(theta, mu, sigma, p0, dt, eps):
    eps = np.asarray(eps, dtype=np.float64)
    n = len(eps)
    out = np.empty(n + 1, dtype=np.float64)
    p = float(p0)
    sdt = math.sqrt(dt)
    out[0] = p
    for t, e in enumerate(eps.tolist()):
        p = p + theta * (mu - p) * dt + sigma * sdt * e
        out[t + 1] = p
    return out
