import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import encoder_case
from motionid.encoder import (MODEL_VERSION, EncoderConfig, init_encoder, load_model, model_to_bytes,
                              model_from_bytes, param_shapes, save_model)
from motionid.errors import (ChecksumError, ConfigError, NumericError, ShapeError, StateError,
                             TruncatedFileError, VersionError)
from motionid.preprocessing import FeatureStats, FeatureWindow

SMALL = EncoderConfig(gru_layers=2, gru_layer_size=8, gru_dropout=0.2, embedding_dim=5, window_len=6)


def _windows(n, t=6, d=18, seed=0):
    return np.random.default_rng(seed).normal(size=(n, t, d))


def test_init_is_deterministic_per_seed():
    a, b, c = init_encoder(SMALL, 1), init_encoder(SMALL, 1), init_encoder(SMALL, 2)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_init_bounds_and_dtype():
    model = init_encoder(SMALL, 0)
    bound = 1 / math.sqrt(SMALL.gru_layer_size)
    for p in model.params.values():
        assert p.dtype == np.float32 and np.abs(p).max() <= bound


def test_default_config_head_shape():
    shapes = param_shapes(EncoderConfig())
    assert shapes["head.W"] == (450, 192)
    assert shapes["gru0.W_in"] == (18, 1350) and shapes["gru2.W_rec"] == (450, 1350)


@pytest.mark.parametrize("changes", [{"gru_layers": 0}, {"mode": "other"}, {"gru_dropout": 1.0},
                                     {"mode": "classification", "num_classes": 1}])
def test_invalid_config(changes):
    from dataclasses import replace
    with pytest.raises(ConfigError):
        init_encoder(replace(SMALL, **changes), 0)


def test_forward_unit_norm_embeddings():
    model = init_encoder(EncoderConfig(gru_layers=1, gru_layer_size=16, embedding_dim=192, window_len=10), 0)
    out = model.forward(_windows(4, t=10))
    assert out.shape == (4, 192)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


def test_forward_accepts_feature_windows():
    model = init_encoder(SMALL, 0)
    x = _windows(3)
    wins = [FeatureWindow("u", i, w) for i, w in enumerate(x)]
    np.testing.assert_array_equal(model.forward(wins), model.forward(x))


def test_eval_mode_is_deterministic_and_train_mode_uses_dropout():
    model = init_encoder(SMALL, 0)
    x = _windows(4)
    assert model.forward(x).tobytes() == model.forward(x).tobytes()
    train = model.forward(x, train_mode=True, rng=np.random.default_rng(0))
    assert not np.allclose(train, model.forward(x))
    with pytest.raises(StateError):
        model.forward(x, train_mode=True)


def test_hand_evaluated_single_unit_gru():
    cfg = EncoderConfig(gru_layers=1, gru_layer_size=1, gru_dropout=0.0, input_dim=1, window_len=2,
                        mode="classification", num_classes=2)
    model = init_encoder(cfg, 0, dtype=np.float64, stats=FeatureStats.identity(1))
    wz, wr, wc, uz, ur, uc, bz, br, bc = 0.5, -0.3, 0.8, 0.2, 0.4, -0.6, 0.1, -0.2, 0.05
    model.params["gru0.W_in"][:] = [[wz, wr, wc]]
    model.params["gru0.W_rec"][:] = [[uz, ur, uc]]
    model.params["gru0.bias"][:] = [bz, br, bc]
    model.params["head.W"][:] = [[1.5, -2.0]]
    model.params["head.bias"][:] = [0.25, 0.0]

    def sig(v):
        return 1 / (1 + math.exp(-v))

    h = 0.0
    for x in (0.7, -1.2):
        z = sig(wz * x + uz * h + bz)
        r = sig(wr * x + ur * h + br)
        c = math.tanh(wc * x + uc * (r * h) + bc)
        h = z * h + (1 - z) * c
    expected = [1.5 * h + 0.25, -2.0 * h]
    out = model.forward(np.array([[[0.7], [-1.2]]]))
    np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)


def test_shape_and_numeric_errors():
    model = init_encoder(SMALL, 0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 6, 5)))
    x = _windows(2)
    x[0, 3, 2] = np.nan
    with pytest.raises(NumericError, match="layer 0"):
        model.forward(x)


def test_backward_requires_forward_cache():
    model = init_encoder(SMALL, 0)
    with pytest.raises(StateError):
        model.backward(np.zeros((1, 5)))
    model.forward(_windows(1))  # eval forward keeps no cache
    with pytest.raises(StateError):
        model.backward(np.zeros((1, 5)))


def test_zero_upstream_gives_zero_gradients():
    model = init_encoder(SMALL, 0)
    model.forward(_windows(3), train_mode=True, rng=np.random.default_rng(1))
    grads, d_in = model.backward(np.zeros((3, 5)))
    assert all(not g.any() for g in grads.values()) and not d_in.any()


def test_gradient_along_output_direction_vanishes():
    model = init_encoder(SMALL, 0, dtype=np.float64)
    out = model.forward(_windows(3), keep_cache=True)
    grads, _ = model.backward(2.5 * out)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-12


def test_permuting_batch_permutes_outputs():
    model = init_encoder(SMALL, 3)
    x = _windows(5)
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(model.forward(x[perm]), model.forward(x)[perm], atol=1e-6)


@pytest.mark.parametrize("layers", [1, 2, 3, 4])
@pytest.mark.parametrize("mode", ["embedding", "classification"])
def test_gradients_match_finite_differences(layers, mode):
    for seed in range(3):
        assert encoder_case(layers, seed, mode, dropout=0.3 if layers > 1 else 0.0) <= 1e-4


def test_one_layer_eight_unit_gradcheck():
    from gradcheck import numeric_grad, rel_error
    cfg = EncoderConfig(gru_layers=1, gru_layer_size=8, gru_dropout=0.0, embedding_dim=4, window_len=5)
    model = init_encoder(cfg, 7, dtype=np.float64)
    x = _windows(2, t=5, seed=7)
    g = np.random.default_rng(7).normal(size=(2, 4))
    model.forward(x, keep_cache=True)
    grads, _ = model.backward(g)

    def objective():
        return float(np.sum(model.forward(x) * g))

    for name in model.params:
        assert rel_error(grads[name], numeric_grad(objective, model.params[name])) <= 1e-4


def test_save_load_roundtrip(tmp_path):
    stats = FeatureStats(np.linspace(-1, 1, 18), np.linspace(0.5, 2, 18))
    model = init_encoder(SMALL, 4, stats=stats, classes=["a", "b"])
    path = tmp_path / "m.mkey"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config and back.stats == model.stats and back.classes == ["a", "b"]
    x = _windows(3)
    assert back.forward(x).tobytes() == model.forward(x).tobytes()


def test_corrupt_truncated_and_newer_files():
    data = bytearray(model_to_bytes(init_encoder(SMALL, 0)))
    bad = bytearray(data)
    bad[len(bad) // 2] ^= 0x10
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(bad))
    with pytest.raises(TruncatedFileError):
        model_from_bytes(bytes(data[:-10]))
    newer = bytearray(data)
    newer[4:6] = (MODEL_VERSION + 1).to_bytes(2, "little")
    with pytest.raises(VersionError, match=f"{MODEL_VERSION + 1}.*{MODEL_VERSION}"):
        model_from_bytes(bytes(newer))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), batch=st.integers(1, 6))
def test_outputs_are_unit_norm(seed, batch):
    model = init_encoder(SMALL, seed)
    out = model.forward(_windows(batch, seed=seed) * 5)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
