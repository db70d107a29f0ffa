import numpy as np
import pytest

from utils.sae import (FeatureDirection, SaeConfig, SaeModel, activation_features, collect_activations, delta_features,
                       extract_features, feature_activation, load_features, save_features, tap_matrix, train_sae,
                       train_sae_set)
from utils.transformer import TokenSeq


def sparse_data(rng, n=400, d=8, k=12):
    atoms = rng.normal(size=(k, d))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    codes = (rng.random((n, k)) < 0.15) * rng.random((n, k)) * 3
    return (codes @ atoms).astype(np.float32)


def test_train_sae_reconstructs_and_normalizes_decoder(rng):
    x = sparse_data(rng)
    sae = train_sae(x, layer=0, m=32, l1=1e-3, steps=300, config=SaeConfig(lr=1e-2, batch_size=64, log_every=1000))
    np.testing.assert_allclose(np.linalg.norm(sae.W_dec, axis=1), 1.0, atol=1e-5)
    assert sae.stats["mse"] < sae.stats["variance"]
    assert sae.encode(x).min() >= 0.0


def test_train_sae_validates_arguments(rng):
    x = sparse_data(rng, n=20)
    with pytest.raises(ValueError):
        train_sae(x, 0, m=8, l1=1e-3, steps=10)
    with pytest.raises(ValueError):
        train_sae(x, 0, m=16, l1=-1.0, steps=10)


def test_sae_save_load(rng, tmp_path):
    x = sparse_data(rng, n=50)
    sae = train_sae(x, 2, m=16, l1=1e-3, steps=5, config=SaeConfig(log_every=1000))
    path = str(tmp_path / "sae.ckpt")
    sae.save(path)
    loaded = SaeModel.load(path)
    assert loaded.layer == 2
    assert loaded.stats["mse"] == pytest.approx(sae.stats["mse"])
    np.testing.assert_allclose(loaded.encode(x), sae.encode(x), atol=1e-5)


def test_collect_activations_order_and_tap_matrix(tiny_model):
    corpus = [[1, 10, 11], [1, 12]]
    taps = collect_activations(tiny_model, corpus, [2, 0])
    assert len(taps) == 2 * 3 + 2 * 2
    assert [(t.input_id, t.layer, t.position) for t in taps[:4]] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 2, 0)]
    assert tap_matrix(taps, 2).shape == (5, 16)
    with pytest.raises(ValueError):
        tap_matrix(taps, 1)


def test_extract_and_activation_features(tiny_model, rng):
    taps = collect_activations(tiny_model, [[1, 10, 11, 12]] * 3, [0, 1])
    saes = train_sae_set(taps, [0, 1], SaeConfig(expansion=2, steps=3, log_every=1000), d=16)
    features = extract_features(saes)
    assert len(features) == 2 * 32
    assert features[0].id == "L00-F0000"
    assert all(f.source == "SAE" for f in features)

    act = activation_features(taps, per_layer=5, seed=0)
    assert [f.layer for f in act] == [0] * 5 + [1] * 5
    assert all(f.source == "ACT" for f in act)
    np.testing.assert_allclose([np.linalg.norm(f.vector) for f in act], 1.0, atol=1e-5)
    assert [f.id for f in act] == [f.id for f in activation_features(taps, per_layer=5, seed=0)]


def test_delta_features_skip_identical_pairs(tiny_model):
    x = [1, 10, 11, 12, 13, 14, 15, 16, 17, 18]
    x_prime = list(x)
    x_prime[8] = 19
    features, skipped = delta_features(tiny_model, [(x, x_prime), (x, list(x))], layer=1)
    assert skipped == 1
    assert len(features) == 1
    assert features[0].source == "DACT"
    h = tiny_model.forward(TokenSeq(x)).residuals[1][8].astype(np.float64)
    h_prime = tiny_model.forward(TokenSeq(x_prime)).residuals[1][8].astype(np.float64)
    diff = (h - h_prime) / np.linalg.norm(h - h_prime)
    np.testing.assert_allclose(features[0].vector, diff, atol=1e-5)


def test_feature_source_is_validated_and_round_trips(tmp_path):
    with pytest.raises(ValueError):
        FeatureDirection("x", 0, np.ones(2), source="OTHER")
    path = str(tmp_path / "f.jsonl")
    features = [FeatureDirection("L01-D0003", 1, np.array([0.6, 0.8], dtype=np.float32), "DACT")]
    assert save_features(path, features) == 1
    loaded = load_features(path)
    assert loaded[0].id == "L01-D0003" and loaded[0].source == "DACT"
    np.testing.assert_allclose(loaded[0].vector, [0.6, 0.8])


def test_feature_activation_is_residual_dot_direction(tiny_model):
    v = np.zeros(16)
    v[3] = 1.0
    ids = [1, 10, 11]
    acts = feature_activation(tiny_model, v, 2, ids)
    np.testing.assert_allclose(acts, tiny_model.forward(TokenSeq(ids)).residuals[2][:, 3], atol=1e-6)
    with pytest.raises(ValueError):
        feature_activation(tiny_model, v, 9, ids)


def test_reconstruction_beats_data_variance_on_held_out_taps(rng):
    x = sparse_data(rng, n=600)
    train, held_out = x[:400], x[400:]
    sae = train_sae(train, layer=0, m=32, l1=1e-3, steps=300, config=SaeConfig(lr=1e-2, batch_size=64, log_every=1000))
    variance = float(np.mean((held_out - held_out.mean(axis=0)) ** 2))
    assert sae.reconstruction_mse(held_out) < variance


def test_larger_sparsity_weight_gives_sparser_codes(rng):
    x = sparse_data(rng)
    config = SaeConfig(lr=1e-2, batch_size=64, log_every=1000)
    base = train_sae(x, layer=0, m=32, l1=1e-2, steps=400, config=config)
    strong = train_sae(x, layer=0, m=32, l1=1e-1, steps=400, config=config)
    assert strong.mean_l0(x) < base.mean_l0(x)


def test_delta_features_are_antisymmetric(tiny_model):
    x = [1, 10, 11, 12, 13, 14, 15, 16, 17, 18]
    x_prime = list(x)
    x_prime[8] = 19
    features, skipped = delta_features(tiny_model, [(x, x_prime), (x_prime, x)], layer=2)
    assert skipped == 0
    np.testing.assert_allclose(features[1].vector, -features[0].vector, atol=1e-7)
