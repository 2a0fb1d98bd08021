import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stagedetect.dataset import SyntheticConfig, generate_synthetic
from stagedetect.features import encode_trace
from stagedetect.stage2_sequence import (
    LstmParams,
    SeqTrainConfig,
    SequenceModelError,
    gradient_check,
    lstm_forward,
    lstm_logits,
    lstm_train,
    logistic,
    pad_batch,
)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_forward(p: LstmParams, xs) -> float:
    """Per-unit scalar loops; independent of the vectorized implementation."""
    H = p.H
    h = [0.0] * H
    c = [0.0] * H
    for x in xs:
        z = [sum(p.W[r, j] * x[j] for j in range(p.m)) + sum(p.U[r, j] * h[j] for j in range(H)) + p.b[r]
             for r in range(4 * H)]
        nh, nc = [], []
        for u in range(H):
            i, f, o = sig(z[u]), sig(z[H + u]), sig(z[2 * H + u])
            g = math.tanh(z[3 * H + u])
            nc.append(f * c[u] + i * g)
            nh.append(o * math.tanh(nc[-1]))
        h, c = nh, nc
    return sig(sum(w * v for w, v in zip(p.w_out, h)) + p.b_out)


def test_zero_params_give_half():
    p = LstmParams.zeros(3, 4)
    xd = np.random.default_rng(0).normal(size=(7, 3))
    assert lstm_forward(p, xd).score == 0.5


def test_empty_trace_uses_output_bias():
    p = LstmParams.init(3, 2, seed=1)
    p = p.with_flat(np.r_[p.flat()[:-1], 0.7])
    assert lstm_forward(p, np.zeros((0, 3))).score == pytest.approx(sig(0.7))


def test_hand_computed_single_step():
    # m=2, H=1, T=1; rows of W are (i, f, o, g)
    W = np.array([[0.5, -0.25], [0.1, 0.2], [1.0, 0.0], [-0.5, 0.75]])
    p = LstmParams(W, np.zeros((4, 1)), np.array([0.1, 1.0, -0.2, 0.3]), np.array([2.0]), -0.5)
    x = np.array([1.0, 2.0])
    zi = 0.5 - 0.5 + 0.1
    zo = 1.0 - 0.2
    zg = -0.5 + 1.5 + 0.3
    c = sig(zi) * math.tanh(zg)
    h = sig(zo) * math.tanh(c)
    expected = sig(2.0 * h - 0.5)
    assert lstm_forward(p, x[None]).score == pytest.approx(expected, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 5), st.integers(0, 10**6))
def test_forward_matches_naive(m, H, T, seed):
    rng = np.random.default_rng(seed)
    p = LstmParams.init(m, H, scale=0.8, seed=seed)
    xd = rng.normal(size=(T, m))
    assert lstm_forward(p, xd).score == pytest.approx(naive_forward(p, xd), abs=1e-12)


def test_left_padding_is_exact():
    rng = np.random.default_rng(2)
    p = LstmParams.init(3, 4, scale=0.5, seed=2)
    seqs = [rng.normal(size=(T, 3)) for T in (1, 5, 0, 3)]
    batched = lstm_logits(p, seqs)
    for s, z in zip(seqs, batched):
        single = lstm_logits(p, [s])[0]
        # masked steps carry state exactly; only BLAS batch rounding differs
        assert z == pytest.approx(single, abs=1e-13)
    x, mask = pad_batch(seqs, 3)
    assert mask.sum(axis=1).tolist() == [1, 5, 0, 3]


def test_gradient_check_small_models():
    rng = np.random.default_rng(3)
    for draw in range(5):
        m, H, T = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 7)
        p = LstmParams.init(int(m), int(H), scale=0.5, seed=draw)
        xd = rng.normal(size=(int(T), int(m)))
        assert gradient_check(p, (xd, draw % 2), eps=1e-5) < 1e-4


def test_batch_gradient_matches_finite_difference():
    # padded minibatch: the analytic gradient must still match a numeric one
    from stagedetect.stage2_sequence import loss_and_grad
    rng = np.random.default_rng(4)
    p = LstmParams.init(2, 3, scale=0.5, seed=4)
    x, mask = pad_batch([rng.normal(size=(T, 2)) for T in (2, 4, 1)], 2)
    y = np.array([1.0, 0.0, 1.0])
    g = loss_and_grad(p, x, mask, y)[1].flat()
    theta = p.flat()
    for j in rng.choice(theta.size, 12, replace=False):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        num = (loss_and_grad(p.with_flat(theta + e), x, mask, y)[0]
               - loss_and_grad(p.with_flat(theta - e), x, mask, y)[0]) / 2e-6
        assert g[j] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_gradient_check_rejects_bad_eps():
    with pytest.raises(SequenceModelError):
        gradient_check(LstmParams.zeros(1, 1), (np.zeros((1, 1)), 1), eps=0.0)


def _toy_task(n, seed):
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    for k in range(n):
        xd = rng.normal(size=(int(rng.integers(2, 6)), 3))
        seqs.append(xd)
        labels.append(k % 2)
    return seqs, labels


def test_zero_learning_rate_leaves_params_unchanged():
    seqs, labels = _toy_task(10, 0)
    init = LstmParams.init(3, 2, seed=9)
    out = lstm_train(seqs, labels, SeqTrainConfig(hidden=2, learning_rate=0.0, epochs=2), init=init)
    assert np.array_equal(out.flat(), init.flat())


def test_training_is_deterministic():
    seqs, labels = _toy_task(20, 1)
    cfg = SeqTrainConfig(hidden=3, learning_rate=0.1, epochs=3, batch_size=4, seed=5)
    a, b = lstm_train(seqs, labels, cfg), lstm_train(seqs, labels, cfg)
    assert np.array_equal(a.flat(), b.flat())


def test_small_step_full_batch_loss_decreases():
    seqs, labels = _toy_task(8, 2)
    hist = []
    lstm_train(seqs, labels, SeqTrainConfig(hidden=4, learning_rate=1e-3, epochs=30, seed=1),
               full_batch=True, history=hist)
    assert len(hist) == 31
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


def test_label_validation():
    seqs, _ = _toy_task(4, 3)
    with pytest.raises(SequenceModelError, match="single class"):
        lstm_train(seqs, [1, 1, 1, 1])
    with pytest.raises(SequenceModelError):
        lstm_train(seqs, [0, 1, 2, 1])


def test_learns_marker_task():
    def encoded(seed):
        ds = generate_synthetic(SyntheticConfig(n_benign=100, n_malicious=100, seed=seed))
        v, keys = ds.schema.vocabulary, ds.schema.attr_keys
        return [encode_trace(s.trace, v, 32, keys).encoded for s in ds.samples], ds.labels

    tr_x, tr_y = encoded(21)
    te_x, te_y = encoded(22)
    cfg = SeqTrainConfig(hidden=8, learning_rate=0.5, epochs=60, batch_size=16, seed=0)
    p = lstm_train(tr_x, tr_y, cfg)
    pred = np.array([lstm_forward(p, x).score >= 0.5 for x in te_x])
    assert (pred == te_y).mean() >= 0.95


def test_logistic_strictly_inside_unit_interval():
    assert 0.0 < logistic(-1e6) < logistic(0.0) == 0.5 < logistic(1e6) < 1.0


def test_json_round_trip_and_validation():
    p = LstmParams.init(3, 2, seed=0)
    back = LstmParams.from_json(p.to_json())
    assert np.array_equal(back.flat(), p.flat())
    bad = p.to_json()
    bad["gate_order"] = ["f", "i", "o", "g"]
    with pytest.raises(SequenceModelError, match="gate order"):
        LstmParams.from_json(bad)
    Wi, Ui, bi = p.gate("i")
    assert Wi.shape == (2, 3) and np.array_equal(Wi, p.W[:2])
    assert np.array_equal(p.gate("f")[2], [1.0, 1.0])
