import logging
import os
from dataclasses import asdict

import pandas as pd
from flask import Blueprint, jsonify

from routes import get_introspector
from utils.codec_helpers import read_json
from utils.manifest import MissingArtifactError

logger = logging.getLogger(__name__)

reports_bp = Blueprint("reports", __name__, url_prefix="/api")


@reports_bp.route("/reports", methods=["GET"])
def list_reports():
    """List report files under the output root"""
    try:
        folder = get_introspector().store.path("reports")
        names = sorted(os.listdir(folder)) if os.path.isdir(folder) else []
        return jsonify({"reports": names})
    except Exception as e:
        return jsonify({"error": str(e)}), 500


@reports_bp.route("/reports/<name>", methods=["GET"])
def get_report(name):
    """Return a JSON report as-is, or a CSV report as a list of rows"""
    try:
        if os.path.basename(name) != name or not name.endswith((".json", ".csv")):
            return jsonify({"error": "Report names are plain .json or .csv file names"}), 400
        path = get_introspector().store.path(f"reports/{name}")
        if not os.path.exists(path):
            return jsonify({"error": f"Report {name} not found"}), 404
        if name.endswith(".json"):
            return jsonify(read_json(path))
        frame = pd.read_csv(path)
        return jsonify({"columns": list(frame.columns),
                        "rows": frame.astype(object).where(frame.notna(), None).to_dict(orient="records")})
    except Exception as e:
        logger.error(f"Error reading report {name}: {e}")
        return jsonify({"error": str(e)}), 500


@reports_bp.route("/manifests/<name>", methods=["GET"])
def get_manifest(name):
    """Return one stage manifest"""
    try:
        return jsonify(asdict(get_introspector().store.load_manifest(name)))
    except MissingArtifactError as e:
        return jsonify({"error": str(e)}), 404
    except Exception as e:
        return jsonify({"error": str(e)}), 500
