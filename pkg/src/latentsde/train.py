"""Training, distillation, and the ablation grid.

Pretraining minimizes the composite loss with Adam, tracks a validation
forecast loss for plateau-based learning-rate decay and early stopping, and
retains the best-validation parameters. Distillation then fits the symbolic
head to the frozen model's predictions. The ablation grid retrains the model
under seven configurations that differ only in which components are active.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ContractViolation, Mlp1h, Tape, adam_step, mlp_forward, tape_backprop
from .metrics import MetricsReport, evaluate
from .model import (LossWeights, ModelParams, clone_params, composite_loss,
                    forward_pass, param_blocks, tape_bind)
from .physics import PhysicsConfig
from .symbolic import BasisLibrary, SymbolicHead, build_library, distill_step, extract_expression

__all__ = [
    "TrainConfig",
    "AblationVariant",
    "TrainResult",
    "MlpBaseline",
    "pretrain",
    "predict",
    "distill",
    "train_mlp_baseline",
    "run_ablation",
    "ablation_rows",
    "VARIANT_FLAGS",
]

IMPROVE_TOL = 1e-12


@dataclass
class TrainConfig:
    dz: int = 8
    hidden: int = 32
    n_pairs: int = 4
    n_freqs: int = 4
    sde_steps: int = 20
    epochs: int = 10
    distill_epochs: int = 5
    batch_size: int = 64
    lr: float = 0.01
    distill_lr: float = 0.02
    seed: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    early_stop_patience: int = 5
    rebalance: bool = True  # reset loss weights from epoch-1 magnitudes
    n_pred_samples: int = 1  # noise draws averaged per prediction
    weights: LossWeights = field(default_factory=LossWeights)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.sde_steps < 1:
            raise ContractViolation("epochs, batch_size and sde_steps must be positive")


class AblationVariant(Enum):
    A0_FULL = "A0_Full"
    A1_NO_SDE = "A1_NoSDE"
    A2_NO_PDE = "A2_NoPDE"
    A3_NO_MPR = "A3_NoMPR"
    A4_NO_PHYSICS = "A4_NoPhysics"
    A5_NO_CONSISTENCY = "A5_NoConsistency"
    A6_MLP = "A6_MLP"


# which loss components stay active; A1 keeps the physics penalties on the
# encoder path but never simulates, so its consistency term is undefined
VARIANT_FLAGS = {
    AblationVariant.A0_FULL: dict(use_sde=True, use_pde=True, use_mpr=True, use_consistency=True),
    AblationVariant.A1_NO_SDE: dict(use_sde=False, use_pde=True, use_mpr=True, use_consistency=False),
    AblationVariant.A2_NO_PDE: dict(use_sde=True, use_pde=False, use_mpr=True, use_consistency=True),
    AblationVariant.A3_NO_MPR: dict(use_sde=True, use_pde=True, use_mpr=False, use_consistency=True),
    AblationVariant.A4_NO_PHYSICS: dict(use_sde=True, use_pde=False, use_mpr=False, use_consistency=True),
    AblationVariant.A5_NO_CONSISTENCY: dict(use_sde=True, use_pde=True, use_mpr=True, use_consistency=False),
}


@dataclass
class TrainResult:
    params: object  # ModelParams or MlpBaseline
    history: list  # one dict per epoch
    best_val: float


def _standardization(params, windows, targets):
    params.x_mean = windows.mean(axis=(0, 1))
    params.x_std = np.maximum(windows.std(axis=(0, 1)), 1e-8)
    params.y_mean = float(np.mean(targets))
    params.y_std = float(max(np.std(targets), 1e-8))


def _val_forecast_loss(params, windows, targets, cfg, use_sde):
    """Mean squared forecast error on standardized targets, fixed noise."""
    if len(targets) == 0:
        raise ContractViolation("validation split is empty")
    y = (np.asarray(targets, dtype=np.float64) - params.y_mean) / params.y_std
    sq = 0.0
    for s in range(0, len(y), cfg.batch_size):
        idx = np.arange(s, min(s + cfg.batch_size, len(y)))
        yhat, _, _, _ = forward_pass(params, windows[idx], cfg.sde_steps,
                                     seed=cfg.seed, sample_indices=idx,
                                     use_sde=use_sde)
        sq += float(np.sum((yhat - y[idx]) ** 2))
    return sq / len(y)


def pretrain(dataset, cfg: TrainConfig, use_sde=True, use_pde=True,
             use_mpr=True, use_consistency=True) -> TrainResult:
    """Fit the model on the train split; returns the best-validation
    parameters with the per-epoch history."""
    xw_tr, y_tr = dataset.subset("train")
    xw_va, y_va = dataset.subset("val")
    if len(y_tr) == 0:
        raise ContractViolation("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(cfg.dz, xw_tr.shape[2], cfg.hidden,
                              cfg.n_pairs, cfg.n_freqs, rng)
    _standardization(params, xw_tr, y_tr)
    opt = AdamState(lr=cfg.lr)
    weights = replace(cfg.weights)
    n = len(y_tr)
    history = []
    best_val = np.inf
    best_params = clone_params(params)
    plateau_wait = 0
    stop_wait = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        sums = {"forecast": 0.0, "pde": 0.0, "mpr": 0.0, "consistency": 0.0, "total": 0.0}
        n_batches = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            tape = Tape()
            bound = tape_bind(params, tape)
            total, bd = composite_loss(
                bound, xw_tr[idx], y_tr[idx], weights, cfg.physics,
                M=cfg.sde_steps, seed=cfg.seed,
                sample_indices=epoch * n + idx, coll_rng=rng,
                use_sde=use_sde, use_pde=use_pde, use_mpr=use_mpr,
                use_consistency=use_consistency)
            grads = tape_backprop(tape, total)
            adam_step(opt, param_blocks(params), grads)
            for k in sums:
                sums[k] += getattr(bd, k)
            n_batches += 1
        means = {k: v / n_batches for k, v in sums.items()}
        if epoch == 1 and cfg.rebalance:
            ref = means["forecast"]
            for lam, comp in (("lambda1", "pde"), ("lambda2", "mpr"),
                              ("lambda3", "consistency")):
                if getattr(weights, lam) > 0 and means[comp] > 1e-12:
                    setattr(weights, lam, 0.1 * ref / means[comp])
        val = _val_forecast_loss(params, xw_va, y_va, cfg, use_sde)
        history.append({"epoch": epoch, **means, "val_forecast": val, "lr": opt.lr,
                        "lambda1": weights.lambda1, "lambda2": weights.lambda2,
                        "lambda3": weights.lambda3})
        if val < best_val - IMPROVE_TOL:
            best_val = val
            best_params = clone_params(params)
            plateau_wait = 0
            stop_wait = 0
        else:
            plateau_wait += 1
            stop_wait += 1
            if plateau_wait >= cfg.plateau_patience:
                opt.lr *= cfg.plateau_factor
                plateau_wait = 0
            if stop_wait >= cfg.early_stop_patience:
                break
    return TrainResult(params=best_params, history=history, best_val=best_val)


def predict(params, windows, cfg: TrainConfig, use_sde=True, base_index=0):
    """Point forecasts in original target units.

    The noise stream for window i is keyed by (cfg.seed, base_index + i), so
    predictions do not depend on batching or thread count; n_pred_samples
    draws are averaged with disjoint stream offsets.
    """
    if isinstance(params, MlpBaseline):
        return params.predict(windows)
    windows = np.asarray(windows, dtype=np.float64)
    nw = len(windows)
    acc = np.zeros(nw)
    n_samp = cfg.n_pred_samples if use_sde else 1
    for rep in range(n_samp):
        for s in range(0, nw, cfg.batch_size):
            idx = np.arange(s, min(s + cfg.batch_size, nw))
            yhat, _, _, _ = forward_pass(
                params, windows[idx], cfg.sde_steps, seed=cfg.seed,
                sample_indices=base_index + rep * nw + idx, use_sde=use_sde)
            acc[idx] += yhat
    return acc / n_samp * params.y_std + params.y_mean


def distill(params: ModelParams, dataset, cfg: TrainConfig, use_sde=True):
    """Fit the symbolic head to the frozen model's train-split predictions.

    The model parameters are bitwise unchanged; returns (head, library,
    expression).
    """
    xw_tr, _ = dataset.subset("train")
    before = {k: v.tobytes() for k, v in param_blocks(params).items()}
    teacher = predict(params, xw_tr, cfg, use_sde=use_sde)
    lib = build_library(xw_tr.shape[2], xw_tr.shape[1])
    head = SymbolicHead.init(lib.K, l1_weight=cfg.weights.lambda4, lr=cfg.distill_lr)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(teacher)
    for _ in range(cfg.distill_epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            distill_step(head, lib, xw_tr[idx], teacher[idx])
    after = {k: v.tobytes() for k, v in param_blocks(params).items()}
    if before != after:
        raise ContractViolation("distillation must not modify the trained model")
    return head, lib, extract_expression(head, lib)


@dataclass
class MlpBaseline:
    """Flattened-window multilayer perceptron trained on squared error."""

    net: Mlp1h
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def predict(self, windows):
        x = (np.asarray(windows, dtype=np.float64) - self.x_mean) / self.x_std
        flat = x.reshape(len(x), -1)
        out = mlp_forward(self.net, flat)
        return np.asarray(out).ravel() * self.y_std + self.y_mean


def train_mlp_baseline(dataset, cfg: TrainConfig, init_net=None) -> TrainResult:
    """Same optimizer, schedule, and early stopping as pretrain, on the
    flattened-window net with a pure forecast loss. init_net overrides the
    seeded initialization (used to verify permutation invariance exactly)."""
    xw_tr, y_tr = dataset.subset("train")
    xw_va, y_va = dataset.subset("val")
    rng = np.random.default_rng(cfg.seed)
    L, dx = xw_tr.shape[1], xw_tr.shape[2]
    net = Mlp1h.init(L * dx, cfg.hidden, 1, rng) if init_net is None else copy.deepcopy(init_net)
    model = MlpBaseline(
        net=net,
        x_mean=xw_tr.mean(axis=(0, 1)),
        x_std=np.maximum(xw_tr.std(axis=(0, 1)), 1e-8),
        y_mean=float(np.mean(y_tr)),
        y_std=float(max(np.std(y_tr), 1e-8)),
    )
    y = (y_tr - model.y_mean) / model.y_std
    yv = (y_va - model.y_mean) / model.y_std
    xt = ((xw_tr - model.x_mean) / model.x_std).reshape(len(y), -1)
    xv = ((xw_va - model.x_mean) / model.x_std).reshape(len(yv), -1)
    opt = AdamState(lr=cfg.lr)
    blocks = {"W1": model.net.W1, "b1": model.net.b1,
              "W2": model.net.W2, "b2": model.net.b2}
    history = []
    best_val = np.inf
    best_net = copy.deepcopy(model.net)
    plateau_wait = stop_wait = 0
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        tot = 0.0
        n_batches = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            tape = Tape()
            net = Mlp1h(*(tape.leaf(blocks[k], k) for k in ("W1", "b1", "W2", "b2")))
            out = ad.reshape(mlp_forward(net, xt[idx]), (len(idx),))
            loss = ad.amean(ad.square(ad.sub(out, y[idx])))
            grads = tape_backprop(tape, loss)
            adam_step(opt, blocks, grads)
            tot += float(loss.value)
            n_batches += 1
        val = float(np.mean((np.asarray(mlp_forward(model.net, xv)).ravel() - yv) ** 2))
        history.append({"epoch": epoch, "forecast": tot / n_batches, "pde": 0.0,
                        "mpr": 0.0, "consistency": 0.0, "total": tot / n_batches,
                        "val_forecast": val, "lr": opt.lr})
        if val < best_val - IMPROVE_TOL:
            best_val = val
            best_net = copy.deepcopy(model.net)
            plateau_wait = stop_wait = 0
        else:
            plateau_wait += 1
            stop_wait += 1
            if plateau_wait >= cfg.plateau_patience:
                opt.lr *= cfg.plateau_factor
                plateau_wait = 0
            if stop_wait >= cfg.early_stop_patience:
                break
    model.net = best_net
    return TrainResult(params=model, history=history, best_val=best_val)


def run_ablation(dataset, cfg: TrainConfig, variants=None) -> dict:
    """Retrain under each variant with identical seeds and epoch budgets;
    returns {AblationVariant: MetricsReport} scored on the test split."""
    if variants is None:
        variants = list(AblationVariant)
    xw_te, y_te = dataset.subset("test")
    _, y_tr = dataset.subset("train")
    center = float(np.mean(y_tr))
    results = {}
    for variant in variants:
        if variant is AblationVariant.A6_MLP:
            res = train_mlp_baseline(dataset, cfg)
            yhat = res.params.predict(xw_te)
        else:
            flags = VARIANT_FLAGS[variant]
            res = pretrain(dataset, cfg, **flags)
            yhat = predict(res.params, xw_te, cfg, use_sde=flags["use_sde"])
        results[variant] = evaluate(yhat, y_te, center=center)
    return results


def ablation_rows(results: dict) -> list:
    """Stable table rows (variant, rmse, rank_ic, dir_acc, weighted_r2)."""
    rows = []
    for variant in AblationVariant:
        if variant not in results:
            continue
        rep = results[variant]
        rows.append({"variant": variant.value, "rmse": rep.rmse,
                     "rank_ic": rep.rank_ic, "dir_acc": rep.dir_acc,
                     "weighted_r2": rep.weighted_r2})
    return rows
