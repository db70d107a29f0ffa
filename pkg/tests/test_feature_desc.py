import numpy as np
import pytest

from utils.feature_desc import (TEMPLATES, ActivationCorpus, FeatureExplanationRecord, Label, LabelGrammar,
                                build_feature_dataset, describe, label_feature, label_features,
                                layer_annotation_agreement, render_feature_prompt, simulate, simulator_score,
                                subsample_fraction, top_exemplars, train_explainer_feat)
from utils.metrics import pearson
from utils.projection import ProjectionSet
from utils.sae import FeatureDirection
from utils.training import OptimizerConfig
from utils.vocab import EOS, SLOT


@pytest.fixture(scope="module")
def grammar(world):
    return LabelGrammar(world.vocab)


@pytest.fixture
def acorpus(tiny_model, world):
    return ActivationCorpus(tiny_model, world.label_corpus(limit=12), range(4))


def unit(rng, d=16):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def test_grammar_labels(grammar, vocab):
    digit_all = grammar.get("digit:all")
    assert grammar.extension(digit_all) == frozenset(vocab.members("digit"))
    low, high = grammar.get("digit:low"), grammar.get("digit:high")
    assert grammar.extension(low) | grammar.extension(high) == grammar.extension(digit_all)
    assert grammar.extension(grammar.get("digit:3")) == {vocab.id("3")}
    assert grammar.extension(grammar.get("nature:all")) == frozenset(vocab.members("animal") + vocab.members("color"))
    assert grammar.parse(["digit", "all", EOS]) == digit_all
    assert grammar.parse(["digit"]) is None
    assert grammar.gold_ids(digit_all) == vocab.encode(["digit", "all", EOS])
    with pytest.raises(ValueError):
        grammar.get("digit:nothing")


def test_simulator_score_matches_brute_force(acorpus, grammar, rng):
    v = unit(rng)
    label = grammar.get("filler:all")
    expected = np.mean([pearson(h @ v, simulate(grammar, label, ids))
                        for ids, h in zip(acorpus.corpus, acorpus.residuals[1])])
    assert simulator_score(acorpus, grammar, v, 1, label) == pytest.approx(expected, abs=1e-9)


def test_label_feature_is_exhaustive_argmax(acorpus, grammar, rng):
    v = unit(rng)
    best, score = label_feature(acorpus, grammar, v, 2)
    scores = {label: simulator_score(acorpus, grammar, v, 2, label) for label in grammar.labels}
    top = max(scores.values())
    assert score == pytest.approx(top, abs=1e-9)
    tied = sorted((l for l, s in scores.items() if abs(s - top) <= 1e-9), key=lambda l: l.rendered)
    assert best == tied[0]


def test_label_features_drops_low_scores(acorpus, grammar, rng):
    features = [FeatureDirection(f"L01-F{i:04d}", 1, unit(rng)) for i in range(3)]
    assert len(label_features(acorpus, grammar, features)) == 3
    assert label_features(acorpus, grammar, features, min_score=2.0) == {}


def test_top_exemplars_orders_by_peak_activation(acorpus, rng):
    v = unit(rng)
    picks = top_exemplars(acorpus, v, 0, 3)
    peaks = [max(a) for a in acorpus.activations(v, 0)]
    order = np.argsort(-np.array(peaks), kind="stable")[:3]
    assert picks == [acorpus.corpus[i] for i in order]


def test_render_feature_prompt_modes():
    tokens, slot = render_feature_prompt(0, 2, 4)
    assert tokens[slot] == SLOT
    assert tokens[-4:-1] == ["at", "layer", "L2"]
    wrong, _ = render_feature_prompt(0, 3, 4, "wrong")
    assert "L0" in wrong
    bare, _ = render_feature_prompt(0, 2, 4, "none")
    assert "layer" not in bare
    with pytest.raises(ValueError):
        render_feature_prompt(len(TEMPLATES), 0, 4)


def labeled_features(grammar, rng, layers=(0, 1), per_layer=6):
    features = [FeatureDirection(f"L{l:02d}-F{i:04d}", l, unit(rng).astype(np.float32))
                for l in layers for i in range(per_layer)]
    labels = {f.id: (grammar.labels[i % len(grammar.labels)], 0.5) for i, f in enumerate(features)}
    return features, labels


def test_build_feature_dataset_splits_per_layer(grammar, rng):
    features, labels = labeled_features(grammar, rng)
    dataset = build_feature_dataset(features, labels, grammar, 4, held_out_per_layer=2, seed=0)
    assert len(dataset.held_out) == 2 * 2 * len(TEMPLATES)
    assert len(dataset.train) == 2 * 4
    assert not set(dataset.held_out_ids) & {r.feature_id for r in dataset.train}
    for r in dataset.held_out[:len(TEMPLATES)]:
        assert r.gold_ids == grammar.gold_ids(grammar.get(r.gold_label))
    again = build_feature_dataset(features, labels, grammar, 4, held_out_per_layer=2, seed=0)
    assert again.held_out_ids == dataset.held_out_ids


def test_build_feature_dataset_rejects_uncovered_layer(grammar, rng):
    features, labels = labeled_features(grammar, rng, layers=(0,))
    stray = FeatureDirection("L03-F0000", 3, unit(rng))
    with pytest.raises(ValueError):
        build_feature_dataset(features + [stray], labels, grammar, 4, 1, 0)


def test_subsample_fraction(grammar, rng):
    features, labels = labeled_features(grammar, rng, per_layer=10)
    train = build_feature_dataset(features, labels, grammar, 4, 0, 0).train
    half = subsample_fraction(train, 0.5, seed=1)
    assert len(half) == 10
    assert subsample_fraction(train, 1.0, 1) == train
    with pytest.raises(ValueError):
        subsample_fraction(train, 0.0, 1)
    with pytest.raises(ValueError):
        subsample_fraction(train, 0.01, 1)


def test_record_round_trip(grammar, vocab, rng):
    features, labels = labeled_features(grammar, rng, layers=(1,), per_layer=1)
    record = build_feature_dataset(features, labels, grammar, 4, 1, 0).held_out[0]
    back = FeatureExplanationRecord.from_record(record.to_record(vocab), vocab)
    assert back.prompt_ids == record.prompt_ids
    assert back.gold_ids == record.gold_ids
    np.testing.assert_allclose(back.vector, record.vector, atol=1e-7)


def test_train_and_describe(tiny_model, grammar, vocab, rng):
    features, labels = labeled_features(grammar, rng, per_layer=3)
    records = build_feature_dataset(features, labels, grammar, 4, 0, 0).train
    projections = ProjectionSet.identity(range(4), 16)
    explainer = tiny_model.clone()
    losses, history = train_explainer_feat(explainer, records, projections, "frozen",
                                           OptimizerConfig(lr=1e-2, batch_size=4, epochs=2, log_every=100))
    assert losses
    np.testing.assert_array_equal(projections.weights[0].data, np.eye(16))
    tokens = describe(explainer, projections, records[0].vector, records[0].layer, 0, vocab, 4)
    assert len(tokens) <= 5
    assert EOS not in tokens
    agreement = layer_annotation_agreement(explainer, projections, records[:2], vocab, 4)
    assert set(agreement) == {"wrong", "none"}
    assert all(0.0 <= v <= 1.0 for v in agreement.values())


def test_train_explainer_feat_checks_dimension(tiny_model, grammar, rng):
    features, labels = labeled_features(grammar, rng, per_layer=1)
    records = build_feature_dataset(features, labels, grammar, 4, 0, 0).train
    with pytest.raises(ValueError):
        train_explainer_feat(tiny_model, records, ProjectionSet.identity(range(4), 8), "joint", OptimizerConfig())


def test_label_is_hashable_value():
    assert Label("digit", "all") == Label("digit", "all")
    assert Label("digit", "all").rendered == "digit all"
