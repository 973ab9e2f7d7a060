import json
import math

import numpy as np
import pytest

import tsformer_sa as ts


def mexican_hat(u):
    return 2.0 / (math.sqrt(3.0) * math.pi**0.25) * (1 - u * u) * np.exp(-u * u / 2)


def direct_cwt(x, scales):
    n = len(x)
    out = np.zeros((len(scales), n))
    for k, a in enumerate(scales):
        half = math.floor(5 * a)
        for t in range(n):
            lo, hi = max(0, t - half), min(n - 1, t + half)
            tau = np.arange(lo, hi + 1)
            out[k, t] = np.sum(x[tau] * mexican_hat((tau - t) / a)) / math.sqrt(a)
    return out


def test_cwt_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(64)
    scales = ts.default_scales()
    got = ts.cwt(x)
    assert got.shape == (20, 64)
    assert np.max(np.abs(got - direct_cwt(x, scales))) <= 1e-6


def test_bandpass_keeps_passband_and_rejects_line_noise():
    fs = 250.0
    t = np.arange(2500) / fs
    data = np.stack([np.sin(2 * np.pi * 5 * t), np.sin(2 * np.pi * 50 * t)]).astype(np.float32)
    out = ts.bandpass(data, fs)
    mid = out[:, 1000:1500]
    assert 0.9 <= np.max(np.abs(mid[0])) <= 1.01
    assert np.max(np.abs(mid[1])) <= 0.1


def test_metrics_spot_values():
    m = ts.metrics(tp=3, fn=1, tn=8, fp=2)
    assert m["tpr"] == 0.75
    assert m["fpr"] == 0.2
    assert abs(m["ba"] - 0.775) <= 1e-15
    with pytest.raises(ts.NumericalError):
        ts.metrics(0, 0, 4, 1)


def test_loss_identities():
    assert ts.multiview_loss(np.array([[0.2, 0.4, -1.0]]), np.array([[1.0, 0.0, 0.3]])) == 0.0
    eye = np.eye(2)
    assert abs(ts.multiview_loss(eye, eye, tau=1.0) + math.log(math.e / (2 + math.e))) <= 1e-12
    assert abs(ts.cross_entropy(np.zeros((1, 2)), [0]) - math.log(2)) <= 1e-9
    with pytest.raises(ts.ShapeError):
        ts.multiview_loss(np.ones((2, 3)), np.ones((3, 2)))


def test_token_fusion_example():
    assert ts.fusion_mask([1, 2, 3, 4], [4, 3, 2, 1]) == [1, 1, 0, 0]
    assert ts.fusion_mask([1, 1, 1, 1], [1, 1, 1, 1]) == [0, 0, 0, 0]
    tem = np.arange(1, 9, dtype=float).reshape(4, 2)
    spe = 10 * tem
    ft, fs = ts.token_fuse(tem, spe, [1, 2, 3, 4], [4, 3, 2, 1])
    np.testing.assert_array_equal(ft[:2], 0.5 * (tem[:2] + spe[:2]))
    np.testing.assert_array_equal(ft[2:], 0.5 * tem[2:])
    np.testing.assert_array_equal(fs[2:], 0.5 * (spe[2:] + tem[2:]))
    np.testing.assert_array_equal(fs[:2], 0.5 * spe[:2])


def test_token_scores_sum_with_diagonal_to_token_count():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((4, 4))
    s = np.array(ts.token_score(x, w))
    logits = x @ w @ x.T / 2.0
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(s, a.sum(axis=0) - np.diag(a), rtol=1e-12)


def test_default_model_shapes():
    model = ts.Model(seed=1)
    assert model.tokens == 50
    rng = np.random.default_rng(2)
    out = model.forward(rng.standard_normal((64, 250)), rng.standard_normal((20, 64, 250)), adapted=True)
    assert out["temporal_tokens"].shape == (50, 128)
    assert out["z_fus"].shape == (384,)
    assert out["z_sub"].shape == (384,)
    assert out["z_tem"].shape == (96,)
    assert out["logits"].shape == (2,)
    assert model.parameter_count("adapter") == 4866
    with pytest.raises(ts.ShapeError):
        model.forward(np.zeros(10), np.zeros(10))


def test_config_and_schedule():
    cfg = json.loads(ts.reduced_config())
    assert cfg["model"]["dim"] == 64
    assert ts.lr(40) == 4e-4
    assert ts.lr(80) == 3.2e-4
    with pytest.raises(ts.ConfigError):
        ts.Model(config='{"model": {"heads": 3}}')


def test_gradcheck_and_cli():
    rep = ts.gradcheck("f64")
    assert rep["max_rel_error"] <= 1e-4
    code, out, _ = ts.cli(["gradcheck", "--dtype", "f64"])
    assert code == 0
    assert "max relative error" in out
    code, _, err = ts.cli(["evaluate", "--bogus"])
    assert code == 1
    assert "--protocol" in err
