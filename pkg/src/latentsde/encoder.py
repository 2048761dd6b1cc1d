"""Continuous-time encoder: a causal sum-of-exponentials kernel (poles and
residues learned in the Laplace domain) convolved against an irregular
observation window via a left Riemann sum, plus a Fourier-embedded bias net.

Pole real parts are -softplus(raw) so stability survives gradient updates.
Conjugate closure is structural: each pair entry contributes
2 Re(A e^{lambda t}); purely real poles contribute once with im = A_im = 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Mlp1h, value_of

__all__ = [
    "LaplaceKernel",
    "TimeEmbedding",
    "ObservationWindow",
    "kernel_eval",
    "time_embed",
    "encode",
    "encode_batch",
    "raw_rate",
]


def raw_rate(rate):
    """Inverse of softplus: raw such that softplus(raw) = rate (rate > 0)."""
    return np.log(np.expm1(rate))


@dataclass
class LaplaceKernel:
    """Sum-of-exponentials kernel kappa(t), zero for t < 0.

    Entry p has pole lambda_p = -softplus(raw_re[p]) + i*im[p] and residue
    A[p] = A_re[p] + i*A_im[p] (dz x dx). pair[p] marks a conjugate pair
    (counts double toward the nominal pole count K and contributes
    2 Re(A e^{lambda t})); non-pair entries are purely real poles.
    """

    raw_re: np.ndarray  # (P,)
    im: np.ndarray  # (P,)
    A_re: np.ndarray  # (P, dz, dx)
    A_im: np.ndarray  # (P, dz, dx)
    pair: np.ndarray  # (P,) bool, constant (not learned)

    @property
    def dz(self):
        return value_of(self.A_re).shape[1]

    @property
    def dx(self):
        return value_of(self.A_re).shape[2]

    @property
    def pole_count(self):
        return int(np.sum(np.where(self.pair, 2, 1)))

    @staticmethod
    def init(dz, dx, n_pairs, rng, n_real=0, scale=0.5):
        p = n_pairs + n_real
        pair = np.array([True] * n_pairs + [False] * n_real)
        im = np.concatenate([rng.uniform(0.5, 6.0, n_pairs), np.zeros(n_real)])
        return LaplaceKernel(
            raw_re=raw_rate(rng.uniform(0.5, 3.0, p)),
            im=im,
            A_re=rng.standard_normal((p, dz, dx)) * scale / np.sqrt(dx),
            A_im=np.where(pair[:, None, None], rng.standard_normal((p, dz, dx)) * scale / np.sqrt(dx), 0.0),
            pair=pair,
        )


@dataclass
class TimeEmbedding:
    """[sin(2 pi f_1 t), cos(2 pi f_1 t), ..., sin(2 pi f_F t), cos(2 pi f_F t)]
    with learnable positive frequencies f = softplus(raw_freqs)."""

    raw_freqs: np.ndarray  # (F,)

    @property
    def dim(self):
        return 2 * value_of(self.raw_freqs).shape[0]

    @staticmethod
    def init(n_freqs, rng=None):
        # geometric ladder of initial frequencies 0.5, 1, 2, ...
        f = 0.5 * 2.0 ** np.arange(n_freqs)
        return TimeEmbedding(raw_freqs=raw_rate(f))


@dataclass
class ObservationWindow:
    """Irregular (value, timestamp) sequence with observation mask.

    times strictly increasing in [0, T]; masked-out entries of values are 0.
    """

    times: np.ndarray  # (N,)
    values: np.ndarray  # (N, dx)
    mask: np.ndarray  # (N, dx) in {0, 1}
    T: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.size:
            if np.any(np.diff(t) <= 0):
                raise ContractViolation("times must be strictly increasing")
            if t[0] < 0 or t[-1] > self.T:
                raise ContractViolation("times must lie in [0, T]")
        m = np.asarray(self.mask)
        if not np.isin(m, (0, 1)).all():
            raise ContractViolation("mask entries must be 0 or 1")
        if np.any(np.asarray(self.values)[m == 0] != 0):
            raise ContractViolation("masked entries of values must be 0")


def _coeffs(kernel: LaplaceKernel, lags):
    """Real/imag mixing coefficients c_re, c_im of shape lags.shape + (P,);
    kappa(lag) = sum_p c_re[..,p] A_re[p] + c_im[..,p] A_im[p], 0 for lag<0."""
    lagv = np.asarray(lags, dtype=np.float64)
    causal = (lagv >= 0).astype(np.float64)[..., None]  # (..., 1)
    tl = np.where(lagv[..., None] >= 0, lagv[..., None], 0.0)  # clamped lag
    rate = ad.softplus(kernel.raw_re)  # (P,)
    decay = ad.exp(ad.mul(ad.mul(rate, -1.0), tl))  # (..., P)
    ang = ad.mul(kernel.im, tl)
    mult = np.where(np.asarray(kernel.pair, dtype=bool), 2.0, 1.0)
    c_re = ad.mul(ad.mul(decay, ad.cos(ang)), mult * causal)
    c_im = ad.mul(ad.mul(decay, ad.sin(ang)), -mult * causal)
    return c_re, c_im


def kernel_eval(kernel: LaplaceKernel, t):
    """kappa(t) as a (dz, dx) matrix; exactly zero for t < 0 (causality)."""
    c_re, c_im = _coeffs(kernel, np.asarray(float(t)))
    return ad.add(
        ad.einsum("p,pzx->zx", c_re, kernel.A_re),
        ad.einsum("p,pzx->zx", c_im, kernel.A_im),
    )


def time_embed(emb: TimeEmbedding, t):
    """Fourier features of shape t.shape + (2F,)."""
    tv = np.asarray(t, dtype=np.float64)
    freqs = ad.softplus(emb.raw_freqs)  # (F,)
    ang = ad.mul(freqs, (2.0 * np.pi) * tv[..., None])  # (..., F)
    s, c = ad.sin(ang), ad.cos(ang)
    F = value_of(freqs).shape[0]
    parts = []
    for k in range(F):
        parts.append(ad.slice_axis(s, -1, k, k + 1))
        parts.append(ad.slice_axis(c, -1, k, k + 1))
    return ad.concat(parts, axis=-1)


def bias_path(kernel_bias: Mlp1h, emb: TimeEmbedding, grid):
    """Bias b(t) on a time grid: MLP over the Fourier embedding, (M, dz)."""
    return ad.mlp_forward(kernel_bias, time_embed(emb, np.asarray(grid, dtype=np.float64)))


def encode_batch(kernel: LaplaceKernel, bias_net: Mlp1h, emb: TimeEmbedding,
                 times, x, mask, grid):
    """Encode a batch sharing one observation-time vector.

    times: (N,), x: (B, N, dx), mask: (B, N, dx), grid: (M,) nondecreasing
    in [0, T]. Returns latent path (B, M, dz):
    z(t_j) = sum_{t_i <= t_j} kappa(t_j - t_i) (mask_i * x_i) dt_i + b(t_j)
    with dt_i = t_i - t_{i-1}, t_0 := 0.
    """
    times = np.asarray(times, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ContractViolation("grid times must be nondecreasing")
    xm = value_of(x) * value_of(mask)
    if times.size == 0:
        warnings.warn("encoding an empty window: bias term only")
        b = bias_path(bias_net, emb, grid)
        B = xm.shape[0]
        zeros = np.zeros((B, grid.shape[0], kernel.dz))
        return ad.add(zeros, b)
    dt = np.diff(times, prepend=0.0)  # (N,)
    lags = grid[:, None] - times[None, :]  # (M, N)
    c_re, c_im = _coeffs(kernel, lags)  # (M, N, P)
    w = (dt[None, :, None]).astype(np.float64)
    c_re = ad.mul(c_re, w)
    c_im = ad.mul(c_im, w)
    z = ad.add(
        ad.einsum("jip,pzx,bix->bjz", c_re, kernel.A_re, xm),
        ad.einsum("jip,pzx,bix->bjz", c_im, kernel.A_im, xm),
    )
    return ad.add(z, bias_path(bias_net, emb, grid))


def encode(kernel: LaplaceKernel, bias_net: Mlp1h, emb: TimeEmbedding,
           window: ObservationWindow, grid):
    """Encode one observation window on a time grid; returns (M, dz)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size and (grid.min() < 0 or grid.max() > window.T):
        raise ContractViolation("grid times must lie in [0, T]")
    x = np.asarray(window.values, dtype=np.float64)[None]
    m = np.asarray(window.mask, dtype=np.float64)[None]
    out = encode_batch(kernel, bias_net, emb, window.times, x, m, grid)
    return ad.reshape(out, (grid.shape[0], kernel.dz)) if isinstance(out, ad.Node) else out[0]
