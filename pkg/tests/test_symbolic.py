"""Basis library, Gumbel-softmax selection, distillation, and the
expression grammar."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentsde.autodiff import ContractViolation
from latentsde.symbolic import (
    BasisDescriptor,
    SymbolicHead,
    build_library,
    distill_step,
    evaluate_library,
    extract_expression,
    gumbel_softmax,
    parse_descriptor,
    parse_expression,
    symbolic_predict,
    tau_schedule,
)


def test_library_composition():
    lib = build_library(dx=1, L=20)
    assert lib.labels() == [
        "last(ch=0)", "ma(ch=0,w=5)", "ma(ch=0,w=10)", "ma(ch=0,w=20)",
        "diff(ch=0)", "ratio(ch=0)", "var(ch=0)",
    ]
    assert build_library(dx=3, L=20).K == 21
    # the full-window moving average collapses onto ma10 when L = 10
    assert build_library(dx=1, L=10).K == 6
    with pytest.raises(ContractViolation):
        build_library(dx=1, L=1)


def test_descriptor_round_trip():
    lib = build_library(dx=2, L=20)
    for e in lib.entries:
        assert parse_descriptor(e.label()) == e
    with pytest.raises(ValueError):
        parse_descriptor("ma(ch=0)")
    with pytest.raises(ValueError):
        parse_descriptor("exp(ch=0)")


def test_constant_channel_features():
    lib = build_library(dx=1, L=20)
    feats = evaluate_library(lib, np.full((20, 1), 3.5))
    by = dict(zip(lib.labels(), feats))
    assert by["last(ch=0)"] == 3.5
    assert by["ma(ch=0,w=5)"] == by["ma(ch=0,w=20)"] == 3.5
    assert by["diff(ch=0)"] == 0.0
    assert by["ratio(ch=0)"] == 1.0
    assert by["var(ch=0)"] == 0.0


def test_ramp_features_hand_oracle():
    lib = build_library(dx=1, L=10)
    feats = dict(zip(lib.labels(), evaluate_library(lib, np.arange(1.0, 11.0)[:, None])))
    assert feats["ma(ch=0,w=10)"] == pytest.approx(5.5)
    assert feats["var(ch=0)"] == pytest.approx(9.16666666666667)
    assert feats["ma(ch=0,w=5)"] == pytest.approx(8.0)
    assert feats["diff(ch=0)"] == 1.0
    assert feats["ratio(ch=0)"] == 10.0
    assert feats["last(ch=0)"] == 10.0


def test_ratio_guard_near_zero_first_value():
    lib = build_library(dx=1, L=5)
    w = np.ones((5, 1))
    w[0, 0] = 0.0
    assert evaluate_library(lib, w)[lib.labels().index("ratio(ch=0)")] == 1.0
    w[0, 0] = 1e-9
    assert evaluate_library(lib, w)[lib.labels().index("ratio(ch=0)")] == 1.0


def test_predict_zero_one_hot_and_loop_oracle():
    lib = build_library(dx=2, L=12)
    rng = np.random.default_rng(0)
    win = rng.standard_normal((12, 2))
    head = SymbolicHead.init(lib.K)
    assert symbolic_predict(head, lib, win) == 0.0
    head.weights[lib.labels().index("last(ch=1)")] = 1.0
    assert symbolic_predict(head, lib, win) == pytest.approx(win[-1, 1])
    head.weights[:] = rng.standard_normal(lib.K)
    naive = sum(
        head.weights[k] * evaluate_library(lib, win)[k] for k in range(lib.K)
    )
    assert symbolic_predict(head, lib, win) == pytest.approx(naive, abs=1e-12)
    batch = rng.standard_normal((7, 12, 2))
    preds = symbolic_predict(head, lib, batch)
    assert preds.shape == (7,)
    assert preds[3] == pytest.approx(symbolic_predict(head, lib, batch[3]), abs=1e-12)


def test_gumbel_softmax_basics():
    p = gumbel_softmax(np.zeros(5), np.zeros(5), tau=1.0)
    np.testing.assert_allclose(p, 0.2, atol=1e-15)
    logits = np.array([0.1, 1.3, 0.4])
    p = gumbel_softmax(logits, np.zeros(3), tau=0.01)
    assert p[1] > 0.999
    with pytest.raises(ContractViolation):
        gumbel_softmax(logits, np.zeros(3), tau=0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=8),
       st.floats(0.05, 10.0))
def test_gumbel_softmax_is_probability_vector(logits, tau):
    g = np.random.default_rng(1).gumbel(size=len(logits))
    p = gumbel_softmax(np.array(logits), g, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_gumbel_selection_predict():
    lib = build_library(dx=1, L=10)
    head = SymbolicHead.init(lib.K)
    head.selection_logits = np.zeros(lib.K)
    head.selection_logits[0] = 50.0  # effectively one-hot on "last"
    head.temperature = 0.5
    win = np.random.default_rng(2).standard_normal((10, 1))
    assert symbolic_predict(head, lib, win) == pytest.approx(win[-1, 0], abs=1e-9)


def test_distill_step_loss_hand_computation():
    lib = build_library(dx=1, L=5)
    head = SymbolicHead.init(lib.K, l1_weight=0.1)
    head.weights[0] = 2.0  # weight on "last"
    wins = np.stack([np.linspace(1, 5, 5)[:, None], np.full((5, 1), 2.0)])
    teacher = np.array([4.0, 10.0])
    # preds: 2*last = [10, 4]; residuals [6, -6]; mse 36; l1 0.1*2
    loss = distill_step(head, lib, wins, teacher)
    assert loss == pytest.approx(36.0 + 0.2)


def test_shrinkage_toward_zero_teacher():
    lib = build_library(dx=1, L=10)
    rng = np.random.default_rng(3)
    head = SymbolicHead.init(lib.K, l1_weight=5.0, lr=0.01)
    head.weights[:] = rng.standard_normal(lib.K) * 0.1
    wins = rng.standard_normal((16, 10, 1)) * 1e-3
    norms = [np.abs(head.weights).sum()]
    for _ in range(200):
        distill_step(head, lib, wins, np.zeros(16))
        norms.append(np.abs(head.weights).sum())
    assert norms[-1] < 0.05 * norms[0]
    assert all(b <= a + 1e-9 for a, b in zip(norms[:20], norms[1:21]))


def _converge(head, lib, wins, teacher, steps):
    for _ in range(steps):
        loss = distill_step(head, lib, wins, teacher)
    return loss


def test_recoverability_of_single_basis_teacher():
    lib = build_library(dx=1, L=20)
    rng = np.random.default_rng(4)
    wins = rng.standard_normal((64, 20, 1))
    k = lib.labels().index("ma(ch=0,w=10)")
    teacher = evaluate_library(lib, wins)[:, k]
    head = SymbolicHead.init(lib.K, l1_weight=0.0, lr=0.02)
    _converge(head, lib, wins, teacher, 4000)
    resid = symbolic_predict(head, lib, wins) - teacher
    assert float(np.mean(resid**2)) < 1e-6


def test_l1_weight_monotone_in_penalty():
    lib = build_library(dx=1, L=10)
    rng = np.random.default_rng(5)
    wins = rng.standard_normal((48, 10, 1))
    teacher = 1.5 * evaluate_library(lib, wins)[:, 0] - 0.7 * evaluate_library(lib, wins)[:, 2]
    norms = []
    for lam in (0.01, 0.3):
        head = SymbolicHead.init(lib.K, l1_weight=lam, lr=0.01)
        _converge(head, lib, wins, teacher, 6000)
        norms.append(np.abs(head.weights).sum())
    assert norms[1] <= norms[0] + 1e-6


def test_extract_expression_fixtures():
    lib = build_library(dx=1, L=20)
    head = SymbolicHead.init(lib.K)
    assert extract_expression(head, lib) == "ŷ = 0"
    head.weights[lib.labels().index("ma(ch=0,w=10)")] = 1.0
    assert extract_expression(head, lib) == "ŷ = 1.00000·ma(ch=0,w=10)"
    head.weights[lib.labels().index("var(ch=0)")] = -2.5
    assert extract_expression(head, lib) == (
        "ŷ = -2.50000·var(ch=0) + 1.00000·ma(ch=0,w=10)"
    )
    head.weights[0] = 1e-4  # below the default threshold
    assert "last" not in extract_expression(head, lib)


def test_expression_round_trip():
    lib = build_library(dx=2, L=15)
    rng = np.random.default_rng(6)
    head = SymbolicHead.init(lib.K)
    head.weights[:] = np.where(rng.uniform(size=lib.K) < 0.4,
                               rng.standard_normal(lib.K), 0.0)
    text = extract_expression(head, lib, threshold=1e-3)
    parsed = parse_expression(text)
    win = rng.standard_normal((15, 2))
    feats = evaluate_library(lib, win)
    back = sum(w * feats[lib.entries.index(d)] for w, d in parsed)
    kept = np.where(np.abs(head.weights) > 1e-3, head.weights, 0.0)
    # weights survive only to 6 significant digits
    assert back == pytest.approx(float(feats @ kept), rel=1e-5, abs=1e-9)
    assert extract_expression(
        SymbolicHead(weights=_weights_from(parsed, lib)), lib, threshold=1e-3
    ) == text
    assert parse_expression("ŷ = 0") == []
    with pytest.raises(ValueError):
        parse_expression("y = 1.0*ma(ch=0,w=5)")


def _weights_from(parsed, lib):
    w = np.zeros(lib.K)
    for val, d in parsed:
        w[lib.entries.index(d)] = val
    return w


def test_round_trip_reproduces_predict_to_1e9():
    lib = build_library(dx=1, L=20)
    head = SymbolicHead.init(lib.K)
    head.weights[1] = 0.5
    head.weights[4] = -1.25
    parsed = parse_expression(extract_expression(head, lib))
    w2 = _weights_from(parsed, lib)
    win = np.random.default_rng(7).standard_normal((20, 1))
    assert float(evaluate_library(lib, win) @ w2) == pytest.approx(
        symbolic_predict(head, lib, win), abs=1e-9)


def test_tau_schedule_geometric():
    assert tau_schedule(0, 5) == pytest.approx(1.0)
    assert tau_schedule(4, 5) == pytest.approx(0.1)
    mid = [tau_schedule(e, 5) for e in range(5)]
    ratios = [b / a for a, b in zip(mid, mid[1:])]
    np.testing.assert_allclose(ratios, ratios[0])
    assert tau_schedule(0, 1) == 0.1
