import math

import numpy as np
import pytest
from scipy import stats

from utils.feature_desc import LabelGrammar
from utils.metrics import (PredictionRecord, ScoreReport, branch_accuracy, content_match, dot_similarity,
                           exact_match, format_p_value, has_changed_f1, lexical_judge, mean_stderr, paired_t_test,
                           parse_branch, pearson, render_branch, sae_pattern_similarity, score_branch_task, spearman,
                           welch_t_test)
from utils.projection import layer_map
from utils.sae import FeatureDirection


def branch(has_changed, content):
    return render_branch(has_changed, content)


def test_pearson_matches_scipy_and_handles_zero_variance(rng):
    a, b = rng.normal(size=20), rng.normal(size=20)
    assert pearson(a, b) == pytest.approx(stats.pearsonr(a, b)[0], abs=1e-12)
    assert pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0
    assert pearson([], []) == 0.0
    with pytest.raises(ValueError):
        pearson([1.0, 2.0], [1.0])


def test_lexical_judge_levels(vocab):
    grammar = LabelGrammar(vocab)

    def judge(pred, gold, seen):
        return lexical_judge(grammar.get(pred).rendered.split(" "), grammar.get(gold).rendered.split(" "), grammar,
                             seen)

    everything = vocab.content_ids()
    assert judge("animal:all", "animal:all", everything) == 1.0
    assert judge("animal:low", "animal:all", everything) == 0.75
    assert judge("animal:all", "nature:all", vocab.members("animal")) == 0.5
    assert judge("digit:3", "symbol:all", vocab.members("symbol")) == 0.25
    assert judge("digit:all", "color:all", everything) == 0.0
    assert lexical_judge(["digit"], ["digit", "all"], grammar, everything) == 0.0


def test_parse_branch():
    assert parse_branch(branch(True, "O03")) == (True, "O03")
    assert parse_branch(branch(False, "B") + ["extra"]) == (False, "B")
    assert parse_branch(["the", "output"]) is None


def test_has_changed_f1_by_hand():
    records = [
        PredictionRecord("patch", "a", branch(True, "O01"), branch(True, "O01")),
        PredictionRecord("patch", "b", branch(True, "O02"), branch(True, "O01")),
        PredictionRecord("patch", "c", branch(False, "O02"), branch(True, "O03")),
        PredictionRecord("patch", "d", ["garbage"], branch(False, "O04")),
    ]
    # truth [T, T, T, F], predictions [T, T, F, T]
    f1_changed = 2 * 2 / (3 + 3)
    f1_unchanged = 0.0
    assert has_changed_f1(records) == pytest.approx((f1_changed + f1_unchanged) / 2)
    assert content_match(records) == pytest.approx(1 / 4)
    assert exact_match(records) == pytest.approx(1 / 4)
    assert branch_accuracy(records) == pytest.approx(2 / 4)


def test_has_changed_f1_rejects_non_branch_gold():
    with pytest.raises(ValueError):
        has_changed_f1([PredictionRecord("patch", "x", branch(True, "A"), ["digit", "all"])])


def test_prediction_record_round_trip():
    record = PredictionRecord("ablate", "q0001-hA-s0", branch(False, "C"), branch(True, "C"), score=0.5)
    row = record.to_record()
    assert row["has_changed"] is False and row["content"] == "C"
    back = PredictionRecord.from_record(row)
    assert back.predicted == record.predicted and back.score == 0.5
    assert PredictionRecord("feat", "f", ["digit", "all"], ["digit", "all"]).parsed is None
    with pytest.raises(ValueError):
        PredictionRecord("other", "x", [], [])


def test_paired_t_test_degenerate_and_regular(rng):
    a = rng.normal(size=10)
    assert paired_t_test(a, a) == 1.0
    assert paired_t_test(a + 0.3, a) == 0.0
    b = a + rng.normal(size=10)
    assert paired_t_test(a, b) == pytest.approx(stats.ttest_rel(a, b).pvalue)
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [2.0])


def test_welch_t_test_matches_scipy_and_handles_constant_samples(rng):
    a = rng.normal(size=12)
    b = rng.normal(loc=0.5, scale=2.0, size=7)
    assert welch_t_test(a, b) == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue)
    assert welch_t_test(np.full(4, 0.5), np.full(3, 0.5)) == 1.0
    assert welch_t_test(np.full(4, 0.5), np.full(3, 0.25)) == 0.0
    with pytest.raises(ValueError):
        welch_t_test([1.0], [1.0, 2.0])


def test_format_p_value():
    assert format_p_value(0.0) == "<1e-06"
    assert format_p_value(0.5) == "0.500000"


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1], [2]) == 0.0
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0


def test_mean_stderr_uses_sample_deviation():
    mean, stderr, n = mean_stderr([1.0, 2.0, 3.0])
    assert (mean, n) == (2.0, 3)
    assert stderr == pytest.approx(1.0 / math.sqrt(3))
    assert mean_stderr([]) == (0.0, 0.0, 0)
    assert mean_stderr([4.0]) == (4.0, 0.0, 1)


def test_score_report_frame_and_dict():
    report = ScoreReport()
    report.add("judge", [1.0, 0.0])
    report.add_cell("SAE", "judge", [1.0])
    report.annotations["judge_vs_base"] = "<1e-06"
    frame = report.to_frame()
    assert list(frame.columns) == ["cell", "metric", "mean", "stderr", "n"]
    assert list(frame.cell) == ["SAE", "all"]
    data = report.to_dict()
    assert data["metrics"]["judge"]["n"] == 2
    assert data["breakdown"]["SAE"]["judge"]["mean"] == 1.0
    assert data["annotations"] == {"judge_vs_base": "<1e-06"}


def test_score_branch_task():
    records = [PredictionRecord("ablate", "a", branch(True, "A"), branch(True, "A")),
               PredictionRecord("ablate", "b", branch(False, "B"), branch(True, "A"))]
    report = score_branch_task(records)
    assert report.metrics["exact_match"][0] == 0.5
    assert report.metrics["branch_accuracy"][2] == 2
    assert score_branch_task([]).metrics == {}


def test_self_similarity(tiny_model, world):
    corpus = world.label_corpus(limit=4)
    mapping = layer_map(4, 4)
    assert dot_similarity(tiny_model, tiny_model, corpus, mapping) == pytest.approx(100.0, rel=1e-6)
    v = np.zeros(16)
    v[0] = 1.0
    features = [FeatureDirection("L01-F0000", 1, v)]
    score = sae_pattern_similarity(tiny_model, tiny_model, features, {"L01-F0000": corpus[:2]}, mapping)
    assert score == pytest.approx(1.0, abs=1e-6)
    assert sae_pattern_similarity(tiny_model, tiny_model, features, {}, mapping) == 0.0
