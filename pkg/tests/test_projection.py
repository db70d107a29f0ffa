import numpy as np
import pytest
from sklearn.linear_model import Ridge

from utils.projection import (ProjectionSet, build_projections, canonical_mode, fit_gradient_descent,
                              fit_least_squares, layer_map, pretrain_projection, relative_residual)
from utils.transformer import ModelConfig, Transformer


def test_layer_map_is_proportional():
    assert layer_map(4, 4) == {0: 0, 1: 1, 2: 2, 3: 3}
    assert layer_map(4, 8) == {0: 0, 1: 2, 2: 4, 3: 6}
    assert layer_map(8, 2) == {0: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1, 6: 1, 7: 1}


def test_canonical_mode_aliases():
    assert canonical_mode("frozen") == "frozen-pretrained"
    assert canonical_mode("random") == "random-init"
    assert canonical_mode("joint") == "joint"
    with pytest.raises(ValueError):
        canonical_mode("warm")


def test_least_squares_recovers_exact_map(rng):
    X = rng.normal(size=(60, 5))
    W_true = rng.normal(size=(5, 3))
    W, used_ridge = fit_least_squares(X, X @ W_true)
    assert not used_ridge
    np.testing.assert_allclose(W, W_true, atol=1e-8)
    assert relative_residual(W, X, X @ W_true) < 1e-10


def test_rank_deficient_falls_back_to_ridge(rng):
    base = rng.normal(size=(40, 3))
    X = np.hstack([base, base[:, :1]])
    Y = rng.normal(size=(40, 2))
    W, used_ridge = fit_least_squares(X, Y)
    assert used_ridge
    alpha = 1e-3 * np.trace(X.T @ X) / 4
    expected = Ridge(alpha=alpha, fit_intercept=False).fit(X, Y).coef_.T
    np.testing.assert_allclose(W, expected, atol=1e-8)


def test_gradient_descent_converges_to_closed_form(rng):
    X = rng.normal(size=(80, 4))
    Y = X @ rng.normal(size=(4, 2)) + 0.01 * rng.normal(size=(80, 2))
    closed, _ = fit_least_squares(X, Y)
    np.testing.assert_allclose(fit_gradient_descent(X, Y, steps=3000), closed, atol=1e-6)


def test_projection_set_checks_shapes(tmp_path):
    with pytest.raises(ValueError):
        ProjectionSet({})
    with pytest.raises(ValueError):
        ProjectionSet({0: np.full((2, 2), np.nan)})
    projections = ProjectionSet.random([0, 2], 4, 6, seed=0)
    assert projections.layers == [0, 2] and (projections.d_in, projections.d_out) == (4, 6)
    np.testing.assert_allclose(projections.project(np.ones(4), 2).data, projections.project_numpy(np.ones(4), 2),
                               atol=1e-6)
    with pytest.raises(ValueError):
        projections.project(np.ones(4), 1)
    with pytest.raises(ValueError):
        projections.project(np.ones(3), 0)
    path = str(tmp_path / "proj.ckpt")
    projections.save(path, {"mode": "random-init"})
    loaded = ProjectionSet.load(path)
    assert loaded.layers == [0, 2]
    np.testing.assert_array_equal(loaded.weights[2].data, projections.weights[2].data)


def test_pretrain_between_different_models(tiny_model, vocab, world):
    explainer = Transformer(ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=len(vocab), context_length=96,
                                        seed=5))
    projections, residuals = pretrain_projection(tiny_model, explainer, world.label_corpus(limit=10))
    assert projections.layers == [0, 1, 2, 3]
    assert (projections.d_in, projections.d_out) == (16, 8)
    assert all(0.0 <= r <= 1.0 for r in residuals.values())


def test_build_projections_modes(tiny_model, world):
    corpus = world.label_corpus(limit=6)
    explainer = tiny_model.clone()
    random, trained = build_projections("random", tiny_model, explainer, corpus, seed=1)
    assert trained and random.layers == [0, 1, 2, 3]

    pretrained, _ = pretrain_projection(tiny_model, explainer, corpus)
    frozen, trained = build_projections("frozen", tiny_model, explainer, corpus, 0, pretrained)
    assert not trained
    joint, trained = build_projections("joint", tiny_model, explainer, corpus, 0, pretrained)
    assert trained
    joint.weights[0].data += 1.0
    np.testing.assert_array_equal(frozen.weights[0].data, pretrained.weights[0].data)
