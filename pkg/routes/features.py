import logging
import os

import numpy as np
from flask import Blueprint, jsonify, request

from introspect import features_path
from routes import get_introspector
from utils.codec_helpers import read_jsonl
from utils.feature_desc import LAYER_MODES, TEMPLATES, describe
from utils.manifest import MissingArtifactError, StageOrderError
from utils.sae import SOURCES, load_features

logger = logging.getLogger(__name__)

features_bp = Blueprint("features", __name__, url_prefix="/api")


def _load_labels(introspector, target):
    path = introspector.store.path(f"features/{target}/labels.jsonl")
    if not os.path.exists(path):
        return {}
    return {row["feature_id"]: row for row in read_jsonl(path)}


def _find_feature(introspector, target, feature_id):
    for source in SOURCES:
        path = introspector.store.path(features_path(target, source))
        if not os.path.exists(path):
            continue
        for feature in load_features(path):
            if feature.id == feature_id:
                return feature
    return None


@features_bp.route("/features", methods=["GET"])
def list_features():
    """List feature directions of a target, optionally filtered by source and layer"""
    try:
        introspector = get_introspector()
        target = request.args.get("target", "A")
        source = request.args.get("source")
        layer = request.args.get("layer", type=int)
        if source is not None and source not in SOURCES:
            return jsonify({"error": f"Unknown source {source!r}; expected one of {list(SOURCES)}"}), 400

        labels = _load_labels(introspector, target)
        found = []
        for name in SOURCES if source is None else (source,):
            path = introspector.store.path(features_path(target, name))
            if not os.path.exists(path):
                return jsonify({"error": f"No {name} features for target {target}; run `train-sae` first"}), 404
            for feature in load_features(path):
                if layer is not None and feature.layer != layer:
                    continue
                label = labels.get(feature.id, {})
                found.append({"id": feature.id, "layer": feature.layer, "source": feature.source,
                              "label": label.get("label"), "score": label.get("score")})
        return jsonify({"target": target, "count": len(found), "features": found})
    except Exception as e:
        logger.error(f"Error listing features: {e}")
        return jsonify({"error": str(e)}), 500


@features_bp.route("/describe", methods=["POST"])
def describe_feature():
    """Decode a label for a feature with a trained feature explainer"""
    try:
        data = request.json or {}
        if "variant" not in data:
            return jsonify({"error": "Missing required field: variant"}), 400
        if "feature_id" not in data and ("vector" not in data or "layer" not in data):
            return jsonify({"error": "Provide feature_id, or vector and layer"}), 400
        template_id = int(data.get("template_id", 0))
        layer_mode = data.get("layer_mode", "true")
        if not 0 <= template_id < len(TEMPLATES) or layer_mode not in LAYER_MODES:
            return jsonify({"error": "Unknown template_id or layer_mode"}), 400

        introspector = get_introspector()
        if "feature_id" in data:
            feature = _find_feature(introspector, data.get("target", "A"), data["feature_id"])
            if feature is None:
                return jsonify({"error": f"Feature {data['feature_id']} not found"}), 404
            vector, layer = feature.vector, feature.layer
        else:
            vector, layer = np.asarray(data["vector"], dtype=np.float64), int(data["layer"])

        explainer, projections = introspector.load_explainer(data["variant"])
        if projections is None:
            return jsonify({"error": f"{data['variant']} is not a feature explainer"}), 400
        if vector.shape != (projections.d_in,):
            return jsonify({"error": f"Vector must have {projections.d_in} entries"}), 400
        tokens = describe(explainer, projections, vector, layer, template_id, introspector.world.vocab,
                          introspector.config.n_layers, layer_mode)
        return jsonify({"variant": data["variant"], "layer": layer, "description": " ".join(tokens)})
    except (StageOrderError, MissingArtifactError) as e:
        return jsonify({"error": str(e)}), 404
    except Exception as e:
        logger.error(f"Error describing feature: {e}")
        return jsonify({"error": str(e)}), 500
