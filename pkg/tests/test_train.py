import numpy as np
import pytest

from latentsde import autodiff as ad
from latentsde import physics
from latentsde.dslob import WindowedDataset
from latentsde.model import (LossWeights, ModelParams, clone_params, composite_loss,
                             forward_pass, param_blocks, params_from_blocks,
                             params_to_blocks, tape_bind)
from latentsde.physics import PhysicsConfig
from latentsde.symbolic import parse_expression
from latentsde.train import (AblationVariant, TrainConfig, VARIANT_FLAGS, ablation_rows,
                             distill, predict, pretrain, run_ablation, train_mlp_baseline)


def tiny_dataset(n=90, L=6, dx=3, seed=0):
    rng = np.random.default_rng(seed)
    windows = rng.standard_normal((n, L, dx))
    y = 0.6 * windows[:, -3:, 0].mean(axis=1) + 0.05 * rng.standard_normal(n)
    split = np.zeros(n, dtype=np.int8)
    split[60:75] = 1
    split[75:] = 2
    return WindowedDataset(windows=windows, targets=y, split=split)


def tiny_params(dx=3, dz=3, seed=0):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(dz=dz, dx=dx, hidden=6, n_pairs=2, n_freqs=2, rng=rng)
    p.x_mean = np.zeros(dx)
    p.x_std = np.ones(dx)
    return p


def tiny_cfg(**kw):
    base = dict(dz=3, hidden=6, n_pairs=2, n_freqs=2, sde_steps=4, epochs=3,
                distill_epochs=3, batch_size=16, seed=0,
                physics=PhysicsConfig(n_coll=8))
    base.update(kw)
    return TrainConfig(**base)


class TestLossWeights:
    def test_negative_weight_rejected(self):
        with pytest.raises(ad.ContractViolation):
            LossWeights(lambda1=-0.1)

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3) == (0.1, 0.1, 0.1)


class TestForwardPass:
    def test_shapes_and_horizon_grid(self):
        p = tiny_params()
        windows = np.random.default_rng(1).standard_normal((5, 6, 3))
        yhat, states, enc, grid = forward_pass(p, windows, M=4, seed=0)
        assert yhat.shape == (5,)
        assert len(states) == 5 and states[0].shape == (5, 3)
        assert enc.shape == (5, 5, 3)
        # forecast grid spans the horizon after the observation window
        assert grid[0] == 1.0 and grid[-1] == 2.0

    def test_initial_state_is_encoder_at_window_end(self):
        p = tiny_params()
        windows = np.random.default_rng(2).standard_normal((4, 6, 3))
        _, states, enc, _ = forward_pass(p, windows, M=4, seed=0)
        np.testing.assert_array_equal(states[0], enc[:, 0])

    def test_no_sde_reads_encoder_terminal(self):
        p = tiny_params()
        windows = np.random.default_rng(3).standard_normal((4, 6, 3))
        yhat, states, enc, _ = forward_pass(p, windows, M=4, use_sde=False)
        assert states is None
        np.testing.assert_allclose(yhat, enc[:, -1] @ p.head_w + p.head_b[0],
                                   rtol=0, atol=1e-14)

    def test_noise_keyed_by_sample_index(self):
        p = tiny_params()
        w = np.random.default_rng(4).standard_normal((6, 6, 3))
        full, _, _, _ = forward_pass(p, w, M=4, seed=7, sample_indices=np.arange(6))
        tail, _, _, _ = forward_pass(p, w[3:], M=4, seed=7, sample_indices=np.arange(3, 6))
        np.testing.assert_allclose(full[3:], tail, rtol=0, atol=1e-12)


class TestCompositeLoss:
    def test_total_is_weighted_sum(self):
        p = tiny_params()
        rng = np.random.default_rng(5)
        windows = rng.standard_normal((6, 6, 3))
        targets = rng.standard_normal(6)
        weights = LossWeights(lambda1=0.3, lambda2=0.7, lambda3=1.1)
        _, bd = composite_loss(p, windows, targets, weights, PhysicsConfig(n_coll=8),
                               M=4, coll_rng=np.random.default_rng(0))
        expected = (bd.forecast + 0.3 * bd.pde + 0.7 * bd.mpr + 1.1 * bd.consistency)
        assert abs(bd.total - expected) < 1e-12

    def test_forecast_component_matches_forward_pass(self):
        p = tiny_params()
        rng = np.random.default_rng(6)
        windows = rng.standard_normal((5, 6, 3))
        targets = rng.standard_normal(5)
        idx = np.arange(5)
        _, bd = composite_loss(p, windows, targets, LossWeights(),
                               PhysicsConfig(n_coll=8), M=4, seed=3,
                               sample_indices=idx, coll_rng=np.random.default_rng(0))
        yhat, _, _, _ = forward_pass(p, windows, M=4, seed=3, sample_indices=idx)
        y_std = (targets - p.y_mean) / p.y_std
        assert abs(bd.forecast - np.mean((yhat - y_std) ** 2)) < 1e-12

    def test_nonfinite_component_is_named(self):
        p = tiny_params()
        p.head_w[:] = np.nan
        rng = np.random.default_rng(7)
        with pytest.raises(FloatingPointError, match="forecast"):
            composite_loss(p, rng.standard_normal((4, 6, 3)), rng.standard_normal(4),
                           LossWeights(), PhysicsConfig(n_coll=8), M=4,
                           coll_rng=np.random.default_rng(0))

    def test_empty_batch_rejected(self):
        p = tiny_params()
        with pytest.raises(ad.ContractViolation):
            composite_loss(p, np.zeros((0, 6, 3)), np.zeros(0), LossWeights(),
                           PhysicsConfig(n_coll=8), M=4)


class TestGradients:
    def test_composite_gradients_match_finite_differences(self):
        p = tiny_params()
        rng = np.random.default_rng(8)
        windows = rng.standard_normal((4, 6, 3))
        targets = rng.standard_normal(4)
        noise = rng.standard_normal((4, 4, 3))
        weights = LossWeights(lambda1=0.2, lambda2=0.4, lambda3=0.6)
        pcfg = PhysicsConfig(n_coll=6, kappa=0.5)
        coll = (rng.standard_normal((6, 3)), 1.0 + rng.uniform(size=6))

        def loss_at(params):
            total, _ = composite_loss(params, windows, targets, weights, pcfg,
                                      M=4, noise=noise, coll_points=coll)
            return float(ad.value_of(total))

        tape = ad.Tape()
        bound = tape_bind(p, tape)
        total, _ = composite_loss(bound, windows, targets, weights, pcfg,
                                  M=4, noise=noise, coll_points=coll)
        grads = ad.tape_backprop(tape, total)

        blocks = param_blocks(p)
        check_rng = np.random.default_rng(9)
        eps = 1e-6
        failures = 0
        n_checked = 0
        for name, arr in blocks.items():
            flat = arr.reshape(-1)
            for k in check_rng.choice(flat.size, size=min(2, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + eps
                up = loss_at(p)
                flat[k] = orig - eps
                dn = loss_at(p)
                flat[k] = orig
                fd = (up - dn) / (2 * eps)
                an = grads[name].reshape(-1)[k]
                denom = max(abs(fd), abs(an), 1e-8)
                if abs(fd - an) / denom > 1e-4:
                    failures += 1
                n_checked += 1
        assert n_checked >= 40
        assert failures <= 1  # hinge kinks may clip one coordinate


class TestPretrain:
    def test_history_schema_and_best_val(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        res = pretrain(ds, cfg)
        assert 1 <= len(res.history) <= cfg.epochs
        for row in res.history:
            for key in ("epoch", "forecast", "pde", "mpr", "consistency",
                        "total", "val_forecast", "lr"):
                assert key in row
        assert res.best_val == min(r["val_forecast"] for r in res.history)

    def test_rebalance_matches_epoch_one_magnitudes(self):
        ds = tiny_dataset()
        res = pretrain(ds, tiny_cfg(epochs=2))
        row1 = res.history[0]
        for lam, comp in (("lambda1", "pde"), ("lambda2", "mpr"),
                          ("lambda3", "consistency")):
            if row1[comp] > 1e-12:
                assert abs(row1[lam] - 0.1 * row1["forecast"] / row1[comp]) < 1e-12

    def test_rebalance_disabled_keeps_weights(self):
        ds = tiny_dataset()
        res = pretrain(ds, tiny_cfg(epochs=2, rebalance=False))
        assert res.history[0]["lambda1"] == 0.1

    def test_plateau_rule_consistent_with_recorded_lr(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(epochs=8, plateau_patience=1, early_stop_patience=99)
        res = pretrain(ds, cfg)
        lr = cfg.lr
        best = np.inf
        wait = 0
        for row in res.history:
            assert row["lr"] == lr
            if row["val_forecast"] < best - 1e-12:
                best = row["val_forecast"]
                wait = 0
            else:
                wait += 1
                if wait >= cfg.plateau_patience:
                    lr *= cfg.plateau_factor
                    wait = 0

    def test_determinism(self):
        ds = tiny_dataset()
        r1 = pretrain(ds, tiny_cfg())
        r2 = pretrain(ds, tiny_cfg())
        for k, v in param_blocks(r1.params).items():
            np.testing.assert_array_equal(v, param_blocks(r2.params)[k])
        assert r1.history == r2.history


class TestPredict:
    def test_batch_size_independence(self):
        ds = tiny_dataset()
        res = pretrain(ds, tiny_cfg(epochs=1))
        xw, _ = ds.subset("test")
        a = predict(res.params, xw, tiny_cfg(batch_size=16))
        b = predict(res.params, xw, tiny_cfg(batch_size=5))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_original_units(self):
        ds = tiny_dataset()
        res = pretrain(ds, tiny_cfg(epochs=1))
        xw, y = ds.subset("test")
        yh = predict(res.params, xw, tiny_cfg())
        # predictions live on the target's scale, not the standardized one
        assert np.abs(np.mean(yh) - np.mean(y)) < 5 * np.std(y)


class TestBlocksRoundTrip:
    def test_checkpoint_blocks_rebuild_identical_model(self):
        ds = tiny_dataset()
        res = pretrain(ds, tiny_cfg(epochs=1))
        rebuilt = params_from_blocks(params_to_blocks(res.params))
        xw, _ = ds.subset("test")
        np.testing.assert_array_equal(predict(res.params, xw, tiny_cfg()),
                                      predict(rebuilt, xw, tiny_cfg()))


class TestDistill:
    def test_freeze_contract_and_grammar(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        res = pretrain(ds, cfg)
        before = {k: v.tobytes() for k, v in param_blocks(res.params).items()}
        head, lib, expr = distill(res.params, ds, cfg)
        after = {k: v.tobytes() for k, v in param_blocks(res.params).items()}
        assert before == after
        terms = parse_expression(expr)
        labels = {e.label() for e in lib.entries}
        assert all(desc.label() in labels for _, desc in terms)


class TestAblation:
    def test_a4_never_evaluates_physics(self):
        ds = tiny_dataset()
        physics.reset_eval_counts()
        pretrain(ds, tiny_cfg(epochs=1), **VARIANT_FLAGS[AblationVariant.A4_NO_PHYSICS])
        assert physics.EVAL_COUNTS == {"pde": 0, "mpr": 0}
        pretrain(ds, tiny_cfg(epochs=1), **VARIANT_FLAGS[AblationVariant.A0_FULL])
        assert physics.EVAL_COUNTS["pde"] > 0 and physics.EVAL_COUNTS["mpr"] > 0

    def test_rows_schema(self):
        ds = tiny_dataset()
        variants = [AblationVariant.A0_FULL, AblationVariant.A6_MLP]
        rows = ablation_rows(run_ablation(ds, tiny_cfg(epochs=1), variants))
        assert [r["variant"] for r in rows] == ["A0_Full", "A6_MLP"]
        assert set(rows[0]) == {"variant", "rmse", "rank_ic", "dir_acc", "weighted_r2"}

    def test_a6_permutation_invariance(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(epochs=2)
        rng = np.random.default_rng(11)
        L, dx = ds.windows.shape[1], ds.windows.shape[2]
        init = ad.Mlp1h.init(L * dx, cfg.hidden, 1, np.random.default_rng(cfg.seed))
        perm = rng.permutation(L)
        permuted = WindowedDataset(windows=ds.windows[:, perm], targets=ds.targets,
                                   split=ds.split)
        # permute first-layer input columns the same way the flattened inputs move
        col_perm = (perm[:, None] * dx + np.arange(dx)).ravel()
        init_p = ad.Mlp1h(init.W1[:, col_perm], init.b1.copy(), init.W2.copy(), init.b2.copy())
        base = train_mlp_baseline(ds, cfg, init_net=init)
        moved = train_mlp_baseline(permuted, cfg, init_net=init_p)
        xw_te, _ = ds.subset("test")
        np.testing.assert_allclose(base.params.predict(xw_te),
                                   moved.params.predict(xw_te[:, perm]),
                                   rtol=0, atol=1e-10)
