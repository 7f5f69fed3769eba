import json
import math
from typing import Any, Dict

from flask import Blueprint, abort, jsonify, request

from database import db
from entanglement import correlation, joint_pmf
from models import SettingResult, SimulationRun
from particles import plane_vector
from registry import recent_runs, run_payload

api_bp = Blueprint("api", __name__, url_prefix="/api")

MAX_LIMIT = 200


def _loads(raw: str) -> Any:
    try:
        return json.loads(raw or "{}")
    except json.JSONDecodeError:
        return raw


def _run_or_404(run_id: int) -> SimulationRun:
    run = db.session.get(SimulationRun, run_id)
    if not run:
        abort(404, description="Unknown run")
    return run


@api_bp.route("/runs", methods=["GET"])
def list_runs():
    try:
        limit = int(request.args.get("limit", 20))
    except ValueError:
        abort(400, description="limit must be an integer")
    limit = max(1, min(limit, MAX_LIMIT))
    runs = recent_runs(limit, request.args.get("kind"))
    return jsonify([run_payload(run) for run in runs])


@api_bp.route("/runs/<int:run_id>", methods=["GET"])
def get_run(run_id: int):
    run = _run_or_404(run_id)
    payload = run_payload(run)
    payload["summary"] = _loads(run.summary_json)
    return jsonify(payload)


@api_bp.route("/runs/<int:run_id>/settings", methods=["GET"])
def run_settings(run_id: int):
    _run_or_404(run_id)
    rows = SettingResult.query.filter_by(run_id=run_id).order_by(SettingResult.setting_index.asc()).all()
    payload = [
        {
            "setting": row.setting_index,
            "label": row.label,
            "angle": row.angle,
            "n_particles": row.n_particles,
            "metrics": _loads(row.metrics_json),
        }
        for row in rows
    ]
    return jsonify(payload)


@api_bp.route("/reference/joint", methods=["GET"])
def reference_joint():
    raw = request.args.get("angle")
    if raw is None:
        abort(400, description="angle query param required (radians)")
    try:
        angle = float(raw)
    except ValueError:
        abort(400, description="angle must be a number")
    if not math.isfinite(angle):
        abort(400, description="angle must be finite")
    pmf = joint_pmf(plane_vector(angle), plane_vector(0.0))
    payload: Dict[str, Any] = {
        "angle": angle,
        "rho_pp": pmf[(1, 1)],
        "rho_mm": pmf[(-1, -1)],
        "rho_pm": pmf[(1, -1)],
        "rho_mp": pmf[(-1, 1)],
        "correlation": correlation(pmf),
    }
    return jsonify(payload)
