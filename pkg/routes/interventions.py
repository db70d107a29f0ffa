import logging
import os

from flask import Blueprint, jsonify, request

from routes import get_introspector
from utils.act_patch import PatchSample, predict_branch, render_patch_record
from utils.codec_helpers import read_jsonl
from utils.input_ablate import HintedSample, render_ablate_record
from utils.manifest import MissingArtifactError, StageOrderError, manifest_name
from utils.metrics import parse_branch, render_branch

logger = logging.getLogger(__name__)

interventions_bp = Blueprint("interventions", __name__, url_prefix="/api")


def _find_sample(introspector, target, kind, sample_id):
    path = introspector.store.path(f"datasets/{target}/{kind}.jsonl")
    if not os.path.exists(path):
        raise StageOrderError(f"No {kind} data for target {target}; run `gen-{kind}` first")
    for row in read_jsonl(path):
        if row["sample_id"] == sample_id:
            return row
    return None


def _answer(variant, sample_id, predicted, has_changed, content):
    parsed = parse_branch(predicted)
    return {
        "variant": variant,
        "sample_id": sample_id,
        "predicted": " ".join(predicted),
        "parsed": None if parsed is None else {"has_changed": parsed[0], "content": parsed[1]},
        "gold": " ".join(render_branch(has_changed, content)),
    }


def _check_request(data):
    for field in ("variant", "sample_id"):
        if field not in data:
            return jsonify({"error": f"Missing required field: {field}"}), 400
    return None


@interventions_bp.route("/patch", methods=["POST"])
def explain_patch():
    """Explain the effect of a stored activation patch with a patch explainer"""
    try:
        data = request.json or {}
        error = _check_request(data)
        if error:
            return error
        introspector = get_introspector()
        row = _find_sample(introspector, data.get("target", "A"), "patch", data["sample_id"])
        if row is None:
            return jsonify({"error": f"Patch sample {data['sample_id']} not found"}), 404
        sample = PatchSample.from_record(row)

        manifest = introspector.store.load_manifest(manifest_name("train-explainer", data["variant"]))
        explainer, projections = introspector.load_explainer(data["variant"])
        vocab = introspector.world.vocab
        record = render_patch_record(sample, vocab, 0, manifest.extra.get("flags", ()))
        predicted = predict_branch(explainer, projections, record.prompt_ids, record.slot_index, record.vector,
                                   record.projection_layer, vocab)
        return jsonify(_answer(data["variant"], sample.sample_id, predicted, sample.has_changed, sample.content))
    except (StageOrderError, MissingArtifactError) as e:
        return jsonify({"error": str(e)}), 404
    except Exception as e:
        logger.error(f"Error explaining patch: {e}")
        return jsonify({"error": str(e)}), 500


@interventions_bp.route("/ablate", methods=["POST"])
def explain_ablation():
    """Explain what removing the hint from a stored hinted question would do"""
    try:
        data = request.json or {}
        error = _check_request(data)
        if error:
            return error
        introspector = get_introspector()
        row = _find_sample(introspector, data.get("target", "A"), "ablate", data["sample_id"])
        if row is None:
            return jsonify({"error": f"Hinted sample {data['sample_id']} not found"}), 404
        sample = HintedSample.from_record(row)

        questions = {q.question_id: q for q in introspector.world.questions}
        explainer, _ = introspector.load_explainer(data["variant"])
        vocab = introspector.world.vocab
        record = render_ablate_record(sample, questions[sample.question_id], vocab)
        predicted = predict_branch(explainer, None, record.prompt_ids, None, None, 0, vocab)
        return jsonify(_answer(data["variant"], sample.sample_id, predicted, sample.has_changed, sample.content))
    except (StageOrderError, MissingArtifactError) as e:
        return jsonify({"error": str(e)}), 404
    except Exception as e:
        logger.error(f"Error explaining ablation: {e}")
        return jsonify({"error": str(e)}), 500
