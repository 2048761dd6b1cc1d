"""No-arbitrage regularizers for the latent SDE.

Three penalties tie the learned dynamics to a pricing PDE: the Feynman-Kac
residual of an auxiliary value network, a hinge on the squared market price
of risk, and a consistency term pulling simulated states back to the encoder
path. All are built from tape primitives so their parameter gradients come
from ordinary reverse accumulation, including through the exact input
gradient and Hessian of the value network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Mlp1h, value_of
from .sde import DiffusionNet, DriftNet, diffusion_eval, drift_eval, market_price_of_risk

__all__ = [
    "PhysicsConfig",
    "PricingNet",
    "fk_residual",
    "pde_loss",
    "mpr_hinge",
    "mpr_loss",
    "consistency_loss",
    "collocation_points",
    "EVAL_COUNTS",
    "reset_eval_counts",
]

# how many times each physics penalty has been evaluated since the last
# reset; lets tests assert that a configuration skips physics entirely
EVAL_COUNTS = {"pde": 0, "mpr": 0}


def reset_eval_counts():
    EVAL_COUNTS["pde"] = 0
    EVAL_COUNTS["mpr"] = 0


@dataclass
class PhysicsConfig:
    r: float = 0.0  # short rate in the pricing PDE
    kappa: float = 2.0  # Sharpe-ratio bound on the market price of risk
    n_coll: int = 64  # collocation points per loss evaluation


@dataclass
class PricingNet:
    """Scalar value network V(z, t); takes the raw time as its last input."""

    net: Mlp1h  # din = dz + 1, dout = 1

    @staticmethod
    def init(dz, hidden, rng, w_scale=None):
        return PricingNet(net=Mlp1h.init(dz + 1, hidden, 1, rng, w_scale))


def _with_raw_time(z, t):
    lead = value_of(z).shape[:-1]
    tv = np.asarray(t, dtype=np.float64)
    if tv.shape == ():
        tcol = np.full(lead + (1,), float(tv))
    elif tv.shape == lead:
        tcol = tv[..., None]
    else:
        raise ContractViolation("time shape must be scalar or match z leading dims")
    return ad.concat([z, tcol], axis=-1)


def fk_residual(pnet: PricingNet, drift: DriftNet, diffusion: DiffusionNet, z, t, r=0.0):
    """dV/dt + mu . grad V + 1/2 tr(sigma sigma^T hess V) - r V, shape (...,).

    Derivatives of V in its inputs are exact (closed form for the single
    hidden layer), not finite differences.
    """
    dz = value_of(z).shape[-1]
    u = _with_raw_time(z, t)
    g = ad.mlp_input_grad(pnet.net, u)  # (..., dz+1)
    dVdt = ad.reshape(ad.slice_axis(g, -1, dz, dz + 1), value_of(z).shape[:-1])
    grad_z = ad.slice_axis(g, -1, 0, dz)
    hess_z = ad.slice_axis(ad.slice_axis(ad.mlp_input_hessian(pnet.net, u), -2, 0, dz), -1, 0, dz)
    mu = drift_eval(drift, z, t)
    sig = diffusion_eval(diffusion, z, t)
    advect = ad.asum(ad.mul(mu, grad_z), axis=-1)
    diffuse = ad.scale(ad.einsum("...ik,...jk,...ij->...", sig, sig, hess_z), 0.5)
    res = ad.add(dVdt, ad.add(advect, diffuse))
    if r != 0.0:
        v = ad.reshape(ad.mlp_forward(pnet.net, u), value_of(z).shape[:-1])
        res = ad.sub(res, ad.scale(v, r))
    return res


def pde_loss(pnet, drift, diffusion, z_coll, t_coll, r=0.0):
    """Mean squared Feynman-Kac residual over the collocation batch."""
    EVAL_COUNTS["pde"] += 1
    return ad.amean(ad.square(fk_residual(pnet, drift, diffusion, z_coll, t_coll, r)))


def mpr_hinge(lam, kappa):
    """mean over the batch of max(0, |lambda|^2 - kappa^2)."""
    sq = ad.asum(ad.square(lam), axis=-1)
    return ad.amean(ad.max0(ad.sub(sq, float(kappa) ** 2)))


def mpr_loss(drift, diffusion, z, t, kappa):
    EVAL_COUNTS["mpr"] += 1
    return mpr_hinge(market_price_of_risk(drift, diffusion, z, t), kappa)


def consistency_loss(sim_states, z_enc):
    """(1/M) sum_j |z_sim(t_j) - z_enc(t_j)|^2, averaged over the batch.

    sim_states: list of M+1 (B, dz) states from the simulator (index 0 is the
    shared initial state and is skipped); z_enc: (B, M+1, dz).
    """
    M = len(sim_states) - 1
    if value_of(z_enc).shape[-2] != M + 1:
        raise ContractViolation("encoder path and simulated path disagree on M")
    B, dz = value_of(sim_states[0]).shape
    sim = ad.concat([ad.reshape(s, (B, 1, dz)) for s in sim_states[1:]], axis=1)
    diff = ad.sub(sim, ad.slice_axis(z_enc, 1, 1, M + 1))
    return ad.amean(ad.asum(ad.square(diff), axis=-1))


def collocation_points(sim_states, grid, n_coll, rng):
    """Detached (z, t) pairs resampled uniformly from the simulated batch."""
    vals = np.stack([value_of(s) for s in sim_states], axis=1)  # (B, M+1, dz)
    B, Mp1, _ = vals.shape
    bi = rng.integers(0, B, size=n_coll)
    ji = rng.integers(0, Mp1, size=n_coll)
    return vals[bi, ji], np.asarray(grid)[ji]
