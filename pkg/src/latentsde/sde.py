"""Latent neural SDE: drift and factored-diffusion networks, Euler-Maruyama
simulation with recorded noise, and the market-price-of-risk vector.

The diffusion factorizes as sigma = L D with L unit lower triangular and D
diagonal positive, so sigma is invertible by construction and lambda =
sigma^{-1} mu is computed by forward substitution (sigma is never inverted).
dw = dz throughout (square sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Mlp1h, value_of
from .encoder import TimeEmbedding, time_embed

__all__ = [
    "DriftNet",
    "DiffusionNet",
    "LatentTrajectory",
    "SdeBlowUp",
    "drift_eval",
    "diffusion_eval",
    "diffusion_factors",
    "euler_maruyama",
    "simulate_batch",
    "market_price_of_risk",
    "noise_for_sample",
]

BLOWUP_NORM = 1e6


class SdeBlowUp(FloatingPointError):
    def __init__(self, step, norm):
        super().__init__(f"SDE state blew up at step {step} (norm {norm:.3e})")
        self.step = step


@dataclass
class DriftNet:
    net: Mlp1h  # din = dz + 2F, dout = dz
    emb: TimeEmbedding

    @staticmethod
    def init(dz, hidden, emb, rng, w_scale=None):
        return DriftNet(net=Mlp1h.init(dz + emb.dim, hidden, dz, rng, w_scale), emb=emb)


@dataclass
class DiffusionNet:
    lnet: Mlp1h  # dout = dz (dz - 1) / 2 strict lower entries
    dnet: Mlp1h  # dout = dz log-volatilities -> softplus
    emb: TimeEmbedding
    dz: int

    @staticmethod
    def init(dz, hidden, emb, rng, w_scale=None):
        return DiffusionNet(
            lnet=Mlp1h.init(dz + emb.dim, hidden, dz * (dz - 1) // 2, rng, w_scale),
            dnet=Mlp1h.init(dz + emb.dim, hidden, dz, rng, w_scale),
            emb=emb,
            dz=dz,
        )


@dataclass
class LatentTrajectory:
    """Simulated path on a uniform grid, with the noise that produced it."""

    grid: np.ndarray  # (M+1,)
    states: np.ndarray  # (M+1, dz)
    noise: np.ndarray  # (M, dw)
    seed: int


def _with_time(emb, z, t):
    """concat(z, time_embed(t)) broadcast over the leading dims of z."""
    e = time_embed(emb, t)
    lead = value_of(z).shape[:-1]
    ev = value_of(e)
    if ev.shape[:-1] != lead:
        e = ad.add(e, np.zeros(lead + (ev.shape[-1],)))
    return ad.concat([z, e], axis=-1)


def drift_eval(d: DriftNet, z, t):
    """mu(z, t) of shape (..., dz)."""
    return ad.mlp_forward(d.net, _with_time(d.emb, z, t))


def diffusion_factors(s: DiffusionNet, z, t):
    """(L, D): unit-lower-triangular (..., dz, dz) and positive diag (..., dz)."""
    u = _with_time(s.emb, z, t)
    lv = ad.mlp_forward(s.lnet, u) if s.dz > 1 else None
    D = ad.softplus(ad.mlp_forward(s.dnet, u))
    eye = np.eye(s.dz)
    if lv is None:
        lead = value_of(D).shape[:-1]
        L = np.broadcast_to(eye, lead + (1, 1)).copy() if lead else eye
    else:
        L = ad.add(ad.fill_strict_lower(lv, s.dz), eye)
    return L, D


def diffusion_eval(s: DiffusionNet, z, t):
    """sigma(z, t) = L diag(D), shape (..., dz, dz); det = prod(D) > 0."""
    L, D = diffusion_factors(s, z, t)
    return ad.mul(L, ad.reshape(D, value_of(D).shape[:-1] + (1, value_of(D).shape[-1])))


def unit_lower_solve(L, b):
    """Solve L y = b for unit-lower-triangular L; shapes (..., n, n), (..., n)."""
    n = value_of(b).shape[-1]
    ys = []
    for i in range(n):
        acc = ad.slice_axis(b, -1, i, i + 1)  # (..., 1)
        for j in range(i):
            lij = ad.reshape(
                ad.slice_axis(ad.slice_axis(L, -2, i, i + 1), -1, j, j + 1),
                value_of(b).shape[:-1] + (1,),
            )
            acc = ad.sub(acc, ad.mul(lij, ys[j]))
        ys.append(acc)
    return ad.concat(ys, axis=-1)


def market_price_of_risk(d: DriftNet, s: DiffusionNet, z, t):
    """lambda = sigma^{-1} mu via forward substitution against L, then
    division by D (sigma never formed)."""
    mu = drift_eval(d, z, t)
    L, D = diffusion_factors(s, z, t)
    return ad.div(unit_lower_solve(L, mu), D)


def noise_for_sample(seed, sample_index, M, dw):
    """Counter-based per-sample noise stream, independent of batch layout."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(sample_index)))))
    return gen.standard_normal((M, dw))


def _as_fn(f, evaluator):
    if callable(f):
        return f
    return lambda z, t: evaluator(f, z, t)


def euler_maruyama(drift, diffusion, z0, T, M, seed, sample_index=0, noise=None, t0=0.0):
    """Simulate z_{j+1} = z_j + mu dt + sigma sqrt(dt) eps_j on M uniform steps.

    drift/diffusion are DriftNet/DiffusionNet or plain callables (z, t) ->
    array. All noise draws are recorded; replaying with the stored noise
    reproduces the path bit-exactly.
    """
    if M < 1 or T <= 0:
        raise ContractViolation("euler_maruyama requires M >= 1, T > 0")
    z0 = np.asarray(z0, dtype=np.float64)
    dz = z0.shape[-1]
    mu = _as_fn(drift, drift_eval)
    sig = _as_fn(diffusion, diffusion_eval)
    if noise is None:
        noise = noise_for_sample(seed, sample_index, M, dz)
    dt = T / M
    sdt = np.sqrt(dt)
    grid = t0 + np.arange(M + 1) * dt
    states = np.empty((M + 1, dz))
    states[0] = z0
    z = z0
    for j in range(M):
        sj = np.asarray(sig(z, grid[j]), dtype=np.float64)
        z = z + (np.asarray(mu(z, grid[j]), dtype=np.float64) * dt + sj @ (sdt * noise[j]))
        norm = np.linalg.norm(z)
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise SdeBlowUp(j, norm)
        states[j + 1] = z
    return LatentTrajectory(grid=grid, states=states, noise=noise, seed=seed)


def simulate_batch(drift, diffusion, z0, T, M, noise, t0=0.0):
    """Tape-friendly batched simulation.

    z0: (B, dz) array or Node; noise: (B, M, dw) constants. drift/diffusion
    are nets or plain callables. Returns the list of M+1 state Nodes/arrays
    of shape (B, dz) plus the grid.
    """
    mu_fn = _as_fn(drift, drift_eval)
    sig_fn = _as_fn(diffusion, diffusion_eval)
    dt = T / M
    sdt = np.sqrt(dt)
    grid = t0 + np.arange(M + 1) * dt
    states = [z0]
    z = z0
    for j in range(M):
        mu = mu_fn(z, grid[j])
        sig = sig_fn(z, grid[j])
        dz_step = ad.einsum("bij,bj->bi", sig, sdt * noise[:, j])
        z = ad.add(z, ad.add(ad.mul(mu, dt), dz_step))
        vals = value_of(z)
        if not np.all(np.isfinite(vals)) or np.max(np.abs(vals)) > BLOWUP_NORM:
            raise SdeBlowUp(j, float(np.max(np.abs(vals))))
        states.append(z)
    return states, grid
