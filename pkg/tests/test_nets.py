import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from gruntlab.eval import fit_sequence_standardizer
from gruntlab.features import extract_all
from gruntlab.learn.nets import (CONV_SEQ_LLD, CONV_SEQ_SMALL, ConvBlock, NetConfig, NetParams,
                                 TrainConfig, conv_out_len, cross_entropy, grad_check, net_backward,
                                 net_forward, net_init, net_predict, net_train, softmax, tiny_config)


def test_init_determinism():
    cfg = tiny_config("crnn")
    assert np.array_equal(net_init(cfg, 3).vector, net_init(cfg, 3).vector)
    assert not np.array_equal(net_init(cfg, 3).vector, net_init(cfg, 4).vector)


def test_crnn_conv_stacks():
    mf = NetConfig.crnn((44, 40), feature="mfcc")
    assert [(b.filters, b.kernel) for b in mf.conv_blocks] == [(10, 6), (20, 8), (40, 10)]
    ll = NetConfig.crnn((100, 130), feature="lld")
    assert [(b.filters, b.kernel) for b in ll.conv_blocks] == [(30, 10), (30, 8), (40, 10)]
    assert CONV_SEQ_SMALL == ((10, 6), (20, 8), (40, 10)) and CONV_SEQ_LLD == ((30, 10), (30, 8), (40, 10))
    p = net_init(ll, 0)
    assert p["conv0.W"].shape == (10, 130, 30) and p["conv2.W"].shape == (10, 30, 40)
    assert all(b.dropout == 0.5 for b in mf.conv_blocks) and mf.lstm_layers == 2


def test_spectrogram_time_axis_table():
    cfg = NetConfig.crnn((227, 227), feature="spectrogram")
    # 'same' conv keeps length, each max-pool halves with floor
    assert cfg.time_steps() == [227, 113, 56, 28]
    assert NetConfig.crnn((44, 40)).time_steps() == [44, 22, 11, 5]
    assert NetConfig.crnn((100, 130), feature="lld").time_steps() == [100, 50, 25, 12]


def test_valid_padding_collapse_is_reported():
    with pytest.raises(ValueError, match="collapses"):
        NetConfig.crnn((44, 40), padding="valid")


def test_config_invariants():
    with pytest.raises(ValueError):
        NetConfig("crnn", (8, 3), (ConvBlock(2, 3), ConvBlock(2, 3)))
    with pytest.raises(ValueError):
        NetConfig("crnn", (8, 3), tuple(ConvBlock(2, 2, dropout=0.3) for _ in range(3)))
    with pytest.raises(ValueError):
        NetConfig.lstm_rnn((8, 3), lstm_layers=3)
    cfg = NetConfig.crnn((44, 40))
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_params_give_uniform_softmax():
    cfg = tiny_config("crnn")
    logits, _ = net_forward(NetParams(cfg), np.zeros((8, 3)))
    assert logits.tolist() == [[0.0, 0.0]]
    np.testing.assert_array_equal(softmax(logits), [[0.5, 0.5]])


def test_eval_mode_is_deterministic():
    cfg = tiny_config("crnn")
    p = net_init(cfg, 1)
    x = np.random.default_rng(0).standard_normal((3, 8, 3))
    a, _ = net_forward(p, x, "eval")
    b, _ = net_forward(p, x, "eval")
    assert np.array_equal(a, b)
    c, _ = net_forward(p, x, "train", 1)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("arch", ["crnn", "lstm_rnn"])
def test_grad_check_tiny(arch):
    rep = grad_check(tiny_config(arch), n_trials=5, seed=1)
    assert rep.finite and rep.max_rel_error < 1e-4


def test_confident_correct_class_has_zero_logit_gradient():
    cfg = tiny_config("lstm_rnn")
    p = NetParams(cfg)
    p["dense.b"][:] = [1000.0, 0.0]
    _, cache = net_forward(p, np.ones((1, 8, 3)))
    g = NetParams(cfg, net_backward(p, cache, np.array([0])))
    assert np.all(g["dense.b"] == 0) and np.all(g["dense.W"] == 0)


@pytest.mark.parametrize("arch", ["crnn", "lstm_rnn"])
def test_duplicated_sample_doubles_gradient(arch):
    cfg = tiny_config(arch)
    p = net_init(cfg, 2)
    x = np.random.default_rng(1).standard_normal((1, 8, 3))
    _, c1 = net_forward(p, x)
    _, c2 = net_forward(p, np.concatenate([x, x]))
    g1 = net_backward(p, c1, np.array([1]))
    g2 = net_backward(p, c2, np.array([1, 1]))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)


def test_inverted_dropout_expectation():
    cfg = tiny_config("crnn")
    p = net_init(cfg, 0)
    x = np.random.default_rng(2).standard_normal((8, 3))
    n = 40000
    _, ev = net_forward(p, x[None], "eval")
    _, tr = net_forward(p, np.repeat(x[None], n, axis=0), "train", 7)
    # the padded input of block 1 holds block 0's (dropped-out) pooled output
    ref = ev.conv[1][0][0]
    mean = tr.conv[1][0].mean(axis=0)
    assert np.linalg.norm(mean - ref) <= 0.01 * np.linalg.norm(ref)


@given(st.integers(2, 60), st.integers(1, 6), st.integers(1, 3), st.sampled_from(["same", "valid"]))
@settings(max_examples=40, deadline=None)
def test_conv_pool_shape_arithmetic(t, kernel, pool, padding):
    blocks = tuple(ConvBlock(2, kernel, pool) for _ in range(3))
    expected, cur = [t], t
    for _ in range(3):
        cur = (cur if padding == "same" else cur - kernel + 1) // pool
        expected.append(cur)
    if min(expected) < 1:
        with pytest.raises(ValueError):
            NetConfig("crnn", (t, 2), blocks, lstm_hidden=2, bidirectional=True, padding=padding)
        return
    cfg = NetConfig("crnn", (t, 2), blocks, lstm_hidden=2, bidirectional=True, padding=padding)
    assert cfg.time_steps() == expected
    _, cache = net_forward(net_init(cfg, 0), np.zeros((1, t, 2)))
    conv_lengths = [entry[4][1] for entry in cache.conv]
    assert conv_lengths == [conv_out_len(e, kernel, padding) for e in expected[:-1]]


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(1e-3, 1e3))
def test_softmax_and_argmax_invariance(logits, scale):
    z = np.array([logits])
    s = softmax(z)
    assert abs(s.sum() - 1) < 1e-12
    top = np.sort(z[0])
    assume(top[-1] - top[-2] > 1e-9)
    assert np.argmax(softmax(scale * z)) == np.argmax(s)


def test_cross_entropy_matches_direct_formula():
    z = np.random.default_rng(0).standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    ref = -np.log(np.exp(z[np.arange(5), labels]) / np.exp(z).sum(axis=1))
    np.testing.assert_allclose(cross_entropy(z, labels), ref, rtol=1e-12)


def test_zero_learning_rate_keeps_params():
    cfg = tiny_config("lstm_rnn")
    init = net_init(cfg, 0)
    X = np.random.default_rng(0).standard_normal((6, 8, 3))
    y = np.array([0, 1] * 3)
    p, _ = net_train(cfg, TrainConfig(2, 0.0, 3, 0), X, y, init=init)
    assert np.array_equal(p.vector, init.vector)


def test_training_determinism():
    cfg = tiny_config("crnn")
    X = np.random.default_rng(0).standard_normal((8, 8, 3))
    y = np.array([0, 1] * 4)
    a, ha = net_train(cfg, TrainConfig(4, 1e-2, 3, 9), X, y)
    b, hb = net_train(cfg, TrainConfig(4, 1e-2, 3, 9), X, y)
    assert ha == hb and np.array_equal(a.vector, b.vector)


def test_crnn_learns_separable_mfcc_toy(small_corpus):
    manifest, clips = small_corpus
    feats, _ = extract_all(clips, "mfcc")
    keys = [r.key for r in manifest.records]
    X = np.stack([feats[k] for k in keys])
    y = np.array([0 if r.sex == "female" else 1 for r in manifest.records])
    std = fit_sequence_standardizer(X)
    cfg = NetConfig.crnn((44, 40), lstm_hidden=16)
    params, hist = net_train(cfg, TrainConfig(16, 1e-3, 30, 0), std.apply(X), y)
    pred = np.argmax(net_predict(params, std.apply(X)), axis=1)
    recalls = [np.mean(pred[y == c] == c) for c in (0, 1)]
    assert np.mean(recalls) >= 0.95
    assert hist[-1] < hist[0]
