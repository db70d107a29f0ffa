import numpy as np
import pytest

from utils.act_patch import generate_patch_samples, make_counterfactual_pairs, render_patch_record
from utils.baselines import (FeatureIndex, selfie_describe, selfie_prompt, zero_shot_ablate, zero_shot_branch,
                             zero_shot_patch)
from utils.feature_desc import ActivationCorpus, LabelGrammar
from utils.input_ablate import HintedSample, render_ablate_record
from utils.metrics import CHANGED_PREFIX, UNCHANGED_PREFIX, parse_branch
from utils.projection import ProjectionSet
from utils.vocab import BOS, OPTION_LETTERS, QUOTE_OPEN, SLOT


def unit_rows(rng, n, d=6):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_feature_index_matches_linear_scan(rng, tmp_path):
    vectors = unit_rows(rng, 12)
    entries = [(f"L{i % 3:02d}-F{i:04d}", i % 3, vectors[i], f"label{i}") for i in range(12)]
    index = FeatureIndex.build(list(reversed(entries)))
    assert len(index) == 12
    for query in unit_rows(rng, 5):
        best_all = max(entries, key=lambda e: float(e[2] @ query))
        assert index.nn_all(query) == best_all[3]
        layer_entries = [e for e in entries if e[1] == 2]
        assert index.nn_layer(query, 2) == max(layer_entries, key=lambda e: float(e[2] @ query))[3]
    with pytest.raises(ValueError):
        index.nn_layer(vectors[0], 7)

    path = str(tmp_path / "index.joblib")
    index.save(path)
    assert FeatureIndex.load(path).nn_all(vectors[4]) == "label4"


def test_feature_index_ties_go_to_lowest_id():
    v = np.array([1.0, 0.0])
    index = FeatureIndex.build([("b", 0, v, "second"), ("a", 0, v, "first")])
    assert index.nn_all(v) == "first"
    assert index.nn_layer(v, 0) == "first"


def test_feature_index_validation():
    with pytest.raises(ValueError):
        FeatureIndex.build([("a", 0, np.array([2.0, 0.0]), "x")])
    v = np.array([0.0, 1.0])
    with pytest.raises(ValueError):
        FeatureIndex.build([("a", 0, v, "x"), ("a", 1, v, "y")])
    with pytest.raises(ValueError):
        FeatureIndex.build([]).nn_all(v)


def test_selfie_prompt_has_two_slots(vocab):
    ids, slots = selfie_prompt(vocab)
    assert len(slots) == 2
    assert all(vocab.decode(ids)[s] == SLOT for s in slots)


def test_selfie_picks_best_scale(tiny_model, world, rng):
    grammar = LabelGrammar(world.vocab)
    acorpus = ActivationCorpus(tiny_model, world.label_corpus(limit=8), [1])
    v = rng.normal(size=16)
    v /= np.linalg.norm(v)
    result = selfie_describe(tiny_model, v, 1, acorpus, grammar, scales=(1.0, 10.0, 50.0))
    assert set(result.per_scale) == {1.0, 10.0, 50.0}
    assert result.score == max(result.per_scale.values())
    assert result.tokens in result.decodes.values()


def test_zero_shot_patch_is_parseable(tiny_model, vocab, world):
    pair = make_counterfactual_pairs(world, seed=0, max_pairs=1)[0]
    sample = generate_patch_samples(tiny_model, vocab, [pair])[3]
    record = render_patch_record(sample, vocab, 0)
    candidates = vocab.encode(list(pair.x.options))
    out = zero_shot_patch(tiny_model, record, vocab, candidates, ProjectionSet.identity(range(4), 16))
    parsed = parse_branch(out)
    assert parsed is not None
    assert parsed[1] in pair.x.options
    with pytest.raises(ValueError):
        zero_shot_patch(tiny_model, record, vocab, [])


def test_zero_shot_branch_compares_per_token_likelihood(tiny_model, vocab, monkeypatch):
    changed = vocab.encode(CHANGED_PREFIX + [QUOTE_OPEN])
    unchanged = vocab.encode(UNCHANGED_PREFIX + [QUOTE_OPEN])
    assert len(changed) > len(unchanged)
    per_token = {tuple(changed): -1.0, tuple(unchanged): -1.1}
    monkeypatch.setattr(tiny_model, "sequence_log_likelihood",
                        lambda seq, continuation: per_token[tuple(continuation)] * len(continuation))
    candidates = vocab.encode(["O01"])
    out = zero_shot_branch(tiny_model, vocab.encode([BOS]), [], candidates, vocab)
    assert parse_branch(out) == (True, "O01")

    per_token[tuple(changed)] = per_token[tuple(unchanged)] = -1.0
    assert parse_branch(zero_shot_branch(tiny_model, vocab.encode([BOS]), [], candidates, vocab))[0] is False


def test_zero_shot_ablate_answers_with_a_letter(tiny_model, vocab, world):
    question = world.questions[0]
    sample = HintedSample(f"{question.question_id}-hB-s0", question.question_id, "B", 0, "B", False, "B")
    out = zero_shot_ablate(tiny_model, render_ablate_record(sample, question, vocab), vocab)
    parsed = parse_branch(out)
    assert parsed is not None
    assert parsed[1] in OPTION_LETTERS
