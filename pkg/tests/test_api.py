import numpy as np
import pytest

from app import create_app
from conftest import SMOKE_CONFIG
from introspect import Introspector, explainer_variant, features_path
from utils import __version__
from utils.codec_helpers import read_jsonl
from utils.config import load_config
from utils.sae import FeatureDirection, save_features

PATCH_VARIANT = explainer_variant("patch", "A", "A", "random-init", 1.0, (), 0)


@pytest.fixture(scope="module")
def introspector(tmp_path_factory):
    root = tmp_path_factory.mktemp("api")
    intro = Introspector(load_config(SMOKE_CONFIG, {"output_root": str(root)}))
    intro.build_world()
    intro.train_target("A")
    intro.gen_patch("A")
    intro.train_explainer("patch", "A", "A", mode="random")
    d = intro.config.d_model
    save_features(intro.store.path(features_path("A", "ACT")),
                  [FeatureDirection(f"L{l:02d}-A0000", l, np.eye(d)[l], "ACT") for l in range(intro.config.n_layers)])
    return intro


@pytest.fixture
def client(introspector):
    app = create_app(introspector)
    app.config["TESTING"] = True
    return app.test_client()


def test_health(client):
    response = client.get("/api/health")
    assert response.status_code == 200
    assert response.get_json() == {"status": "healthy", "version": __version__}


def test_list_features(client, introspector):
    response = client.get("/api/features?source=ACT&layer=1")
    assert response.status_code == 200
    data = response.get_json()
    assert data["count"] == 1
    assert data["features"][0]["id"] == "L01-A0000"
    assert data["features"][0]["label"] is None

    assert client.get("/api/features?source=BOGUS").status_code == 400
    assert client.get("/api/features").status_code == 404


def test_describe_validation(client):
    assert client.post("/api/describe", json={}).status_code == 400
    assert client.post("/api/describe", json={"variant": "x"}).status_code == 400
    assert client.post("/api/describe", json={"variant": "x", "feature_id": "L00-A0000",
                                              "template_id": 99}).status_code == 400
    response = client.post("/api/describe", json={"variant": "never-trained", "vector": [0.0] * 16, "layer": 0})
    assert response.status_code == 404
    assert client.post("/api/describe", json={"variant": "x", "feature_id": "L09-F9999"}).status_code == 404


def test_explain_patch(client, introspector):
    sample_id = read_jsonl(introspector.store.path("datasets/A/patch.jsonl"))[0]["sample_id"]
    response = client.post("/api/patch", json={"variant": PATCH_VARIANT, "sample_id": sample_id})
    assert response.status_code == 200
    data = response.get_json()
    assert data["sample_id"] == sample_id
    assert data["gold"].split(" ")[-1] == "."
    assert data["parsed"] is None or set(data["parsed"]) == {"has_changed", "content"}

    assert client.post("/api/patch", json={"sample_id": sample_id}).status_code == 400
    missing = client.post("/api/patch", json={"variant": PATCH_VARIANT, "sample_id": "nope"})
    assert missing.status_code == 404
    untrained = client.post("/api/patch", json={"variant": "never-trained", "sample_id": sample_id})
    assert untrained.status_code == 404


def test_explain_ablation_without_data(client, introspector):
    response = client.post("/api/ablate", json={"variant": PATCH_VARIANT, "sample_id": "q0000-hA-s0"})
    assert response.status_code == 404


def test_reports_and_manifests(client):
    names = client.get("/api/reports").get_json()["reports"]
    assert "census_patch_A.csv" in names
    census = client.get("/api/reports/census_patch_A.csv").get_json()
    assert census["columns"] == ["token_type", "chunk", "has_changed", "available", "kept"]
    assert census["rows"]
    assert client.get("/api/reports/notes.txt").status_code == 400
    assert client.get("/api/reports/absent.json").status_code == 404

    world = client.get("/api/manifests/world")
    assert world.status_code == 200
    assert world.get_json()["stage"] == "world"
    assert client.get("/api/manifests/nope").status_code == 404
