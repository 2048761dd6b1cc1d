"""Full forecasting model: kernel encoder, latent SDE, auxiliary pricing
net, and linear prediction head, with the composite training loss.

Parameters live in plain numpy arrays grouped into named blocks; binding a
model to a tape replaces every block with a leaf of the same name, so
gradients from reverse accumulation line up with the optimizer's parameter
dict by construction.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Mlp1h, Tape, value_of
from .encoder import LaplaceKernel, TimeEmbedding, encode_batch
from .physics import PhysicsConfig, PricingNet, collocation_points, consistency_loss, mpr_loss, pde_loss
from .sde import DiffusionNet, DriftNet, noise_for_sample, simulate_batch

__all__ = [
    "ModelParams",
    "LossWeights",
    "LossBreakdown",
    "param_blocks",
    "params_to_blocks",
    "params_from_blocks",
    "tape_bind",
    "clone_params",
    "forward_pass",
    "composite_loss",
    "batch_noise",
]


@dataclass
class LossWeights:
    lambda1: float = 0.1  # pricing-PDE residual
    lambda2: float = 0.1  # market-price-of-risk hinge
    lambda3: float = 0.1  # encoder/SDE consistency
    lambda4: float = 1e-3  # symbolic L1 (distillation phase only)

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ContractViolation("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    forecast: float
    pde: float
    mpr: float
    consistency: float
    symbolic_l1: float
    total: float


@dataclass
class ModelParams:
    kernel: LaplaceKernel
    bias_net: Mlp1h  # encoder bias b(t) over the time embedding
    emb: TimeEmbedding  # shared by bias, drift and diffusion nets
    drift: DriftNet
    diffusion: DiffusionNet
    pricing: PricingNet
    head_w: np.ndarray  # (dz,)
    head_b: np.ndarray  # (1,)
    # input/target standardization, fitted on the training split (not learned)
    x_mean: Optional[np.ndarray] = None
    x_std: Optional[np.ndarray] = None
    y_mean: float = 0.0
    y_std: float = 1.0

    @property
    def dz(self):
        return self.kernel.dz

    @staticmethod
    def init(dz, dx, hidden, n_pairs, n_freqs, rng):
        emb = TimeEmbedding.init(n_freqs, rng)
        return ModelParams(
            kernel=LaplaceKernel.init(dz, dx, n_pairs, rng),
            bias_net=Mlp1h.init(emb.dim, hidden, dz, rng),
            emb=emb,
            drift=DriftNet.init(dz, hidden, emb, rng, w_scale=0.1 / np.sqrt(dz + emb.dim)),
            diffusion=DiffusionNet.init(dz, hidden, emb, rng, w_scale=0.1 / np.sqrt(dz + emb.dim)),
            pricing=PricingNet.init(dz, hidden, rng),
            head_w=rng.standard_normal(dz) / np.sqrt(dz),
            head_b=np.zeros(1),
        )


def _mlp_blocks(prefix, net):
    return [(f"{prefix}.{a}", net, a) for a in ("W1", "b1", "W2", "b2")]


def _block_registry(p: ModelParams):
    blocks = [
        ("kernel.raw_re", p.kernel, "raw_re"),
        ("kernel.im", p.kernel, "im"),
        ("kernel.A_re", p.kernel, "A_re"),
        ("kernel.A_im", p.kernel, "A_im"),
        ("emb.raw_freqs", p.emb, "raw_freqs"),
    ]
    blocks += _mlp_blocks("bias", p.bias_net)
    blocks += _mlp_blocks("drift", p.drift.net)
    blocks += _mlp_blocks("diff_l", p.diffusion.lnet)
    blocks += _mlp_blocks("diff_d", p.diffusion.dnet)
    blocks += _mlp_blocks("pricing", p.pricing.net)
    blocks += [("head.w", p, "head_w"), ("head.b", p, "head_b")]
    return blocks


def param_blocks(p: ModelParams) -> dict:
    """{block name: ndarray}; the arrays are the live parameters."""
    return {name: getattr(owner, attr) for name, owner, attr in _block_registry(p)}


def clone_params(p: ModelParams) -> ModelParams:
    return copy.deepcopy(p)


def tape_bind(p: ModelParams, tape: Tape) -> ModelParams:
    """Shadow structure whose parameter blocks are tape leaves named as in
    param_blocks."""
    leaf = {name: tape.leaf(getattr(owner, attr), name)
            for name, owner, attr in _block_registry(p)}
    kernel = LaplaceKernel(leaf["kernel.raw_re"], leaf["kernel.im"],
                           leaf["kernel.A_re"], leaf["kernel.A_im"], p.kernel.pair)
    emb = TimeEmbedding(leaf["emb.raw_freqs"])

    def mlp(prefix):
        return Mlp1h(leaf[f"{prefix}.W1"], leaf[f"{prefix}.b1"],
                     leaf[f"{prefix}.W2"], leaf[f"{prefix}.b2"])

    return ModelParams(
        kernel=kernel,
        bias_net=mlp("bias"),
        emb=emb,
        drift=DriftNet(net=mlp("drift"), emb=emb),
        diffusion=DiffusionNet(lnet=mlp("diff_l"), dnet=mlp("diff_d"), emb=emb, dz=p.dz),
        pricing=PricingNet(net=mlp("pricing")),
        head_w=leaf["head.w"],
        head_b=leaf["head.b"],
        x_mean=p.x_mean, x_std=p.x_std, y_mean=p.y_mean, y_std=p.y_std,
    )


def params_to_blocks(p: ModelParams) -> dict:
    """Serializable view: learnable blocks plus the conjugate-pair mask and
    standardization constants."""
    blocks = dict(param_blocks(p))
    blocks["kernel.pair"] = np.asarray(p.kernel.pair, dtype=np.float64)
    blocks["norm.x_mean"] = np.zeros(0) if p.x_mean is None else p.x_mean
    blocks["norm.x_std"] = np.ones(0) if p.x_std is None else p.x_std
    blocks["norm.y"] = np.array([p.y_mean, p.y_std])
    return blocks


def params_from_blocks(blocks: dict) -> ModelParams:
    kernel = LaplaceKernel(blocks["kernel.raw_re"], blocks["kernel.im"],
                           blocks["kernel.A_re"], blocks["kernel.A_im"],
                           blocks["kernel.pair"].astype(bool))
    emb = TimeEmbedding(blocks["emb.raw_freqs"])

    def mlp(prefix):
        return Mlp1h(blocks[f"{prefix}.W1"], blocks[f"{prefix}.b1"],
                     blocks[f"{prefix}.W2"], blocks[f"{prefix}.b2"])

    x_mean = blocks["norm.x_mean"]
    return ModelParams(
        kernel=kernel,
        bias_net=mlp("bias"),
        emb=emb,
        drift=DriftNet(net=mlp("drift"), emb=emb),
        diffusion=DiffusionNet(lnet=mlp("diff_l"), dnet=mlp("diff_d"),
                               emb=emb, dz=kernel.dz),
        pricing=PricingNet(net=mlp("pricing")),
        head_w=blocks["head.w"],
        head_b=blocks["head.b"],
        x_mean=None if x_mean.size == 0 else x_mean,
        x_std=None if x_mean.size == 0 else blocks["norm.x_std"],
        y_mean=float(blocks["norm.y"][0]),
        y_std=float(blocks["norm.y"][1]),
    )


def standardize_windows(p: ModelParams, windows):
    x = np.asarray(windows, dtype=np.float64)
    if p.x_mean is None:
        return x
    return (x - p.x_mean) / p.x_std


def batch_noise(seed, sample_indices, M, dz):
    """(B, M, dz) noise, one counter-based stream per global sample index
    (independent of batch composition and thread count)."""
    return np.stack([noise_for_sample(seed, i, M, dz) for i in sample_indices])


def forward_pass(p: ModelParams, windows, M, seed=0, sample_indices=None,
                 noise=None, use_sde=True):
    """Encode, simulate, and read out the prediction.

    windows: (B, L, dx) raw feature windows covering observation times
    (i+1)/L on the unit interval. The latent grid has M+1 points spanning
    the forecast horizon [1, 2], so the initial state z_0 = enc(1) summarizes
    the whole window and the SDE extrapolates across the horizon the target
    is measured over. Returns (yhat (B,) in standardized target units, sim
    states list, enc (B, M+1, dz), grid). With use_sde=False the readout
    uses the encoder's terminal extrapolation and no simulation runs.
    """
    x = standardize_windows(p, windows)
    B, L, dx = x.shape
    times = np.arange(1, L + 1) / L
    grid = 1.0 + np.arange(M + 1) / M
    enc = encode_batch(p.kernel, p.bias_net, p.emb, times, x, np.ones_like(x), grid)
    if use_sde:
        z0 = ad.slice_axis(enc, 1, 0, 1)
        z0 = ad.reshape(z0, (B, p.dz))
        if noise is None:
            if sample_indices is None:
                sample_indices = range(B)
            noise = batch_noise(seed, sample_indices, M, p.dz)
        states, _ = simulate_batch(p.drift, p.diffusion, z0, 1.0, M, noise, t0=grid[0])
        zT = states[-1]
    else:
        states = None
        zT = ad.reshape(ad.slice_axis(enc, 1, M, M + 1), (B, p.dz))
    yhat = ad.add(ad.einsum("bz,z->b", zT, p.head_w),
                  ad.reshape(p.head_b, ()))
    return yhat, states, enc, grid


def _check_finite(name, node):
    v = value_of(node)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite loss component '{name}'")
    return node


def composite_loss(p: ModelParams, windows, targets, weights: LossWeights,
                   physics_cfg: PhysicsConfig, M=20, seed=0,
                   sample_indices=None, noise=None, coll_rng=None,
                   coll_points=None, use_sde=True, use_pde=True, use_mpr=True,
                   use_consistency=True, symbolic_l1_value=0.0) -> tuple:
    """Forecast MSE plus weighted physics penalties; returns (total node,
    LossBreakdown of detached values). Targets are given in original units
    and standardized internally. Collocation points are resampled from the
    simulated path and treated as constants; pass coll_points=(z, t) to pin
    them (gradient checks differentiate at fixed collocation points)."""
    y = (np.asarray(targets, dtype=np.float64) - p.y_mean) / p.y_std
    if y.size == 0:
        raise ContractViolation("batch must be nonempty")
    yhat, states, enc, grid = forward_pass(
        p, windows, M, seed, sample_indices, noise, use_sde)
    forecast = _check_finite("forecast", ad.amean(ad.square(ad.sub(yhat, y))))
    total = forecast
    pde = mpr = cons = 0.0
    path = states if use_sde else [ad.reshape(ad.slice_axis(enc, 1, j, j + 1),
                                              (value_of(enc).shape[0], p.dz))
                                   for j in range(value_of(enc).shape[1])]
    if use_pde or use_mpr:
        if coll_points is not None:
            zc, tc = coll_points
        else:
            rng = np.random.default_rng(seed) if coll_rng is None else coll_rng
            zc, tc = collocation_points(path, grid, physics_cfg.n_coll, rng)
    if use_pde:
        pde = _check_finite("pde", pde_loss(p.pricing, p.drift, p.diffusion,
                                            zc, tc, physics_cfg.r))
        total = ad.add(total, ad.scale(pde, weights.lambda1))
    if use_mpr:
        mpr = _check_finite("mpr", mpr_loss(p.drift, p.diffusion, zc, tc,
                                            physics_cfg.kappa))
        total = ad.add(total, ad.scale(mpr, weights.lambda2))
    if use_consistency and use_sde:
        cons = _check_finite("consistency", consistency_loss(states, enc))
        total = ad.add(total, ad.scale(cons, weights.lambda3))
    if symbolic_l1_value:
        total = ad.add(total, ad.scale(float(symbolic_l1_value), weights.lambda4))
    breakdown = LossBreakdown(
        forecast=float(value_of(forecast)),
        pde=float(value_of(pde)),
        mpr=float(value_of(mpr)),
        consistency=float(value_of(cons)),
        symbolic_l1=float(symbolic_l1_value),
        total=float(value_of(total)),
    )
    return total, breakdown
