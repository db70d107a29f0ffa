import os

import pytest

from conftest import SMOKE_CONFIG
from utils.config import OUTPUT_ROOT_ENV, RunConfig, load_config, read_config_file
from utils.manifest import (ArtifactIntegrityError, ArtifactStore, MissingArtifactError, RunManifest,
                            StageOrderError, manifest_name)
from utils.vocab import MAX_LAYERS


@pytest.fixture(autouse=True)
def no_env_root(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)


def write(path, text):
    path.write_text(text)
    return str(path)


def test_include_and_later_keys_win(tmp_path):
    write(tmp_path / "base.cfg", "seed = 3\nn_layers = 6  # deep\nexperiment_seeds = 0, 1\n")
    top = write(tmp_path / "top.cfg", "include base.cfg\n\nn_layers = 4\nablate = activation, layer\n")
    config = load_config(top)
    assert (config.seed, config.n_layers) == (3, 4)
    assert config.experiment_seeds == (0, 1)
    assert config.ablate == ("activation", "layer")
    assert read_config_file(top)["n_layers"] == "4"


def test_include_cycle_and_bad_lines(tmp_path):
    write(tmp_path / "a.cfg", "include b.cfg\n")
    write(tmp_path / "b.cfg", "include a.cfg\n")
    with pytest.raises(ValueError):
        load_config(str(tmp_path / "a.cfg"))
    with pytest.raises(ValueError):
        load_config(write(tmp_path / "bad.cfg", "just words\n"))
    with pytest.raises(ValueError):
        load_config(write(tmp_path / "unknown.cfg", "colour = red\n"))
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.cfg"))


def test_overrides_and_env_root(tmp_path, monkeypatch):
    config = load_config(None, {"seed": 9, "fraction": None})
    assert config.seed == 9 and config.fraction == 1.0
    with pytest.raises(ValueError):
        load_config(None, {"nonsense": 1})
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert load_config().output_root == str(tmp_path)
    assert load_config(None, {"output_root": "elsewhere"}).output_root == "elsewhere"


def test_hash_ignores_runtime_keys():
    a = RunConfig()
    b = RunConfig(output_root="x", n_jobs=4, log_every=1)
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig(seed=1).hash()


def test_smoke_config_loads():
    config = load_config(SMOKE_CONFIG)
    assert config.n_layers == 4
    assert config.output_root.endswith("smoke")


def make_manifest(stage, variant="", inputs=None):
    return RunManifest(stage, variant, "hash", 0, "", 0.1, inputs=inputs or {})


def test_layer_count_must_fit_the_layer_vocabulary(tmp_path):
    assert load_config(SMOKE_CONFIG, {"n_layers": MAX_LAYERS}).n_layers == MAX_LAYERS
    with pytest.raises(ValueError, match="n_layers"):
        load_config(SMOKE_CONFIG, {"n_layers": MAX_LAYERS + 1})
    with pytest.raises(ValueError, match="n_layers"):
        load_config(write(tmp_path / "deep.cfg", "n_layers = 13\n"))


def test_manifest_round_trip_and_trace(tmp_path):
    store = ArtifactStore(str(tmp_path))
    (tmp_path / "world.json").write_text("{}")
    store.write_manifest(make_manifest("build-world"), ["world.json"])
    inputs = store.verify_inputs(["world.json"])
    (tmp_path / "model.ckpt").write_bytes(b"weights")
    store.write_manifest(make_manifest("train-target", "A", inputs), ["model.ckpt"])

    loaded = store.load_manifest(manifest_name("train-target", "A"))
    assert loaded.inputs == inputs
    assert loaded.tool_version
    assert store.list_manifests() == ["build-world", "train-target__A"]
    assert store.trace("model.ckpt") == ["train-target__A", "build-world"]


def test_manifest_integrity_checks(tmp_path):
    store = ArtifactStore(str(tmp_path))
    (tmp_path / "world.json").write_text("{}")
    store.write_manifest(make_manifest("build-world"), ["world.json"])

    (tmp_path / "world.json").write_text('{"tampered": true}')
    with pytest.raises(ArtifactIntegrityError):
        store.verify_inputs(["world.json"])
    with pytest.raises(MissingArtifactError):
        store.verify_inputs(["absent.json"])
    with pytest.raises(ArtifactIntegrityError):
        store.write_manifest(make_manifest("other"), ["world.json"])
    with pytest.raises(MissingArtifactError):
        store.write_manifest(make_manifest("other"), ["never-written.json"])
    with pytest.raises(MissingArtifactError):
        store.load_manifest("nope")
    with pytest.raises(StageOrderError):
        store.require_stage("train-sae", "introspect.py train-sae")
    assert os.path.isdir(tmp_path / "manifests")
