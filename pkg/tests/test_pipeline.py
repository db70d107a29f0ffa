import os

import pandas as pd
import pytest

from conftest import SMOKE_CONFIG
from introspect import (Introspector, baseline_variant, explainer_variant, features_path, main, target_path)
from utils.codec_helpers import read_json, read_jsonl
from utils.config import load_config
from utils.manifest import MissingArtifactError, StageOrderError, manifest_name


@pytest.fixture(scope="module")
def intro(tmp_path_factory):
    """A smoke run with a world, both targets, features and patch data for target A."""
    root = tmp_path_factory.mktemp("run")
    introspector = Introspector(load_config(SMOKE_CONFIG, {"output_root": str(root)}))
    introspector.build_world()
    introspector.train_target("A")
    introspector.train_target("B")
    introspector.train_sae("A")
    introspector.label_features("A")
    introspector.gen_patch("A")
    introspector.pretrain_proj("A", "A")
    return introspector


def test_stages_refuse_to_run_out_of_order(tmp_path):
    fresh = Introspector(load_config(SMOKE_CONFIG, {"output_root": str(tmp_path)}))
    with pytest.raises(StageOrderError):
        fresh.train_sae("A")
    with pytest.raises(MissingArtifactError):
        fresh.train_target("A")
    assert not fresh.store.has_manifest(manifest_name("train-target", "A"))
    with pytest.raises(ValueError):
        fresh.run_stage("no-such-stage")


def test_world_and_targets_are_recorded(intro):
    manifest = intro.store.load_manifest("world")
    assert manifest.extra["questions"] == len(intro.world.questions)
    a = intro.store.load_manifest(manifest_name("train-target", "A"))
    b = intro.store.load_manifest(manifest_name("train-target", "B"))
    assert (a.seed, b.seed) == (intro.config.seed, intro.config.seed + 1)
    assert (a.extra["text_half"], b.extra["text_half"]) == (0, 1)
    assert "world.json" in a.inputs
    assert os.path.exists(intro.store.path(target_path("B")))


def test_feature_sources_and_labels(intro):
    for source in ("SAE", "ACT", "DACT"):
        assert os.path.exists(intro.store.path(features_path("A", source)))
    act = read_jsonl(intro.store.path(features_path("A", "ACT")))
    assert len(act) == intro.config.act_per_layer * intro.config.n_layers
    train = intro.feature_records("A", "train")
    heldout = intro.feature_records("A", "heldout")
    assert train and heldout
    assert not {r.feature_id for r in train} & {r.feature_id for r in heldout}
    assert all(r.source == "SAE" for r in train)


def test_patch_data_splits_by_pair(intro):
    train, test = intro.patch_split("A")
    assert train and test
    assert not {s.pair_id for s in train} & {s.pair_id for s in test}
    census = pd.read_csv(intro.store.path("reports/census_patch_A.csv"))
    assert (census.kept <= intro.config.patch_cap).all()


def test_feature_explainer_train_eval_and_baseline(intro):
    variant = intro.train_explainer("feat", "A", "A")
    assert variant == explainer_variant("feat", "A", "A", "joint", 1.0, (), 0)
    report = intro.evaluate("feat", "A", "A")
    assert set(report.metrics) == {"judge", "simulator"}
    assert "SAE" in report.breakdown
    assert set(report.annotations) == {"layer_wrong_agreement", "layer_none_agreement"}
    scores = intro.instance_scores(variant)
    assert {"instance_id", "cell", "judge", "simulator"} <= set(scores.columns)

    nn = intro.run_baseline("feat", "nn-all", "A")
    assert nn == baseline_variant("feat", "nn-all", "A")
    baseline_report = intro.evaluate("feat", target="A", baseline="nn-all")
    assert baseline_report.metrics["judge"][2] == report.metrics["judge"][2]


def test_patch_explainer_with_ablated_prompt(intro):
    full = intro.train_explainer("patch", "A", "A")
    report = intro.evaluate("patch", "A", "A")
    assert {"has_changed_f1", "content_match", "exact_match", "branch_accuracy"} <= set(report.metrics)
    assert any(cell.startswith("type=") for cell in report.breakdown)

    bare = intro.train_explainer("patch", "A", "A", ablate=["activation"])
    assert bare != full and bare.endswith("__activation__s0")
    assert intro.store.load_manifest(manifest_name("train-explainer", bare)).extra["flags"] == ["activation"]
    intro.evaluate("patch", "A", "A", ablate=["activation"])
    with pytest.raises(ValueError):
        intro.train_explainer("feat", "A", "A", ablate=["layer"])


def test_zero_shot_patch_baseline(intro):
    variant = intro.run_baseline("patch", "zero-shot", "A")
    rows = read_jsonl(intro.store.path(f"predictions/{variant}.jsonl"))
    _, test = intro.patch_split("A")
    assert len(rows) == len(test)
    assert all("has_changed" in row for row in rows)


def test_location_probe(intro):
    intro.train_explainer("location", "A", "A")
    report = intro.evaluate("location", "A", "A")
    assert 0.0 <= report.metrics["exact_match"][0] <= 1.0
    with pytest.raises(ValueError):
        intro.train_explainer("location", "A", "B")


def test_ablate_explainer(intro):
    census = intro.gen_ablate("A")
    assert list(census.columns) == ["has_changed", "available", "kept"]
    samples = read_jsonl(intro.store.path("datasets/A/ablate.jsonl"))
    if len({s["question_id"] for s in samples}) < 2:
        pytest.skip("smoke target answered too few hinted questions with a letter")
    intro.train_explainer("ablate", "A", "A")
    report = intro.evaluate("ablate", "A", "A")
    assert "exact_match" in report.metrics


def test_report_traces_back_to_world(intro):
    intro.train_explainer("feat", "A", "A", mode="random")
    intro.evaluate("feat", "A", "A", mode="random")
    summary = intro.report()
    assert {"variant", "metric", "mean", "stderr", "n"} <= set(summary.columns)
    provenance = read_json(intro.store.path("reports/provenance.json"))
    assert all("world" in chain for chain in provenance.values())


def test_feature_matrix_compares_targets_as_independent_samples(intro):
    intro.train_sae("B")
    intro.label_features("B")
    table = intro.run_matrix("feat", seeds=[0])
    assert len(table) == 4
    by_explainer = table[table.view == "by-explainer"]
    assert (by_explainer.test == "welch").all()
    assert (by_explainer.n_pairs == 0).all()
    by_target = table[table.view == "by-target"]
    assert (by_target.test == "paired").all()
    assert (by_target.n_pairs > 0).all()
    assert set(table.cross_cell) == {"A/B", "B/A"}


def _feature_run(root):
    introspector = Introspector(load_config(SMOKE_CONFIG, {"output_root": str(root)}))
    introspector.build_world()
    introspector.train_target("A")
    introspector.train_sae("A")
    introspector.label_features("A")
    introspector.train_explainer("feat", "A", "A", mode="random")
    introspector.evaluate("feat", "A", "A", mode="random")
    introspector.report()
    return {path.name: path.read_bytes() for path in sorted((root / "reports").glob("*.csv"))}


def test_identical_configs_give_identical_reports(tmp_path):
    first = _feature_run(tmp_path / "first")
    second = _feature_run(tmp_path / "second")
    assert "summary.csv" in first
    assert sorted(first) == sorted(second)
    for name in first:
        assert first[name] == second[name], name


def test_cli_exit_codes(tmp_path):
    out = str(tmp_path / "cli")
    assert main(["world", "--config", SMOKE_CONFIG, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "world.json"))
    assert main(["train-sae", "--config", SMOKE_CONFIG, "--out", out]) == 1
    assert main(["world", "--config", str(tmp_path / "missing.cfg"), "--out", out]) == 1
