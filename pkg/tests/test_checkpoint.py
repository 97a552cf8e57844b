import numpy as np
import pytest

from gruntlab.learn.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from gruntlab.learn.nets import NetConfig, net_init, net_predict
from gruntlab.learn.svm import Standardizer, SvmModel


def test_net_round_trip(tmp_path):
    cfg = NetConfig.crnn((44, 40), lstm_hidden=8)
    params = net_init(cfg, 0)
    std = Standardizer(np.arange(40.0), np.ones(40))
    save_checkpoint(tmp_path / "m.gmdl", params, std, {"task": "sex"})
    back, bstd, meta = load_checkpoint(tmp_path / "m.gmdl")
    assert back.config == cfg and np.array_equal(back.vector, params.vector)
    assert np.array_equal(bstd.mean, std.mean) and meta == {"task": "sex"}
    x = np.random.default_rng(0).standard_normal((2, 44, 40))
    assert np.array_equal(net_predict(back, x), net_predict(params, x))


def test_svm_round_trip():
    std = Standardizer(np.zeros(3), np.full(3, 2.0))
    m = SvmModel(np.array([1.0, -2.0, 0.5]), 0.25, 1e-3, std)
    data = encode_checkpoint(m)
    assert data[:4] == b"GMDL"
    back, bstd, _ = decode_checkpoint(data)
    assert np.array_equal(back.weights, m.weights) and back.bias == 0.25 and back.c_value == 1e-3
    assert np.array_equal(back.standardizer.std, std.std)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        decode_checkpoint(b"NOPE" + bytes(20))
    data = encode_checkpoint(SvmModel(np.ones(4), 0.0, 1.0))
    with pytest.raises(ValueError):
        decode_checkpoint(data[:-8])
    with pytest.raises(TypeError):
        encode_checkpoint("model")
