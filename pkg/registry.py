import logging
import math
from typing import Any, Dict, List, Optional

from database import db
from experiments import RunReport
from models import SettingResult, SimulationRun
from utils.tables import canonical_json

logger = logging.getLogger(__name__)

# Columns that identify a setting; everything else in the row is a metric
SETTING_KEYS = ("setting", "label", "angle", "n", "pairs")


def _optional_float(value: Any) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def record_run(report: RunReport, out_dir: Optional[str] = None) -> SimulationRun:
    """Store a finished run and its per-setting rows. Needs an app context."""
    run = SimulationRun(
        kind=report.kind,
        mode=report.mode,
        seed=int(report.provenance["seed"]),
        config_hash=report.provenance["config_hash"],
        code_version=report.provenance["code_version"],
        n_particles=int(report.config.get("n_p", 0)),
        accepted_fraction=_optional_float(report.summary.get("accepted_fraction")),
        chsh=_optional_float(report.summary.get("chsh")),
        passed=report.passed if report.checks else None,
        out_dir=out_dir,
        summary_json=canonical_json(report.document()),
    )
    db.session.add(run)
    for record in report.settings.to_dict(orient="records"):
        metrics = {key: value for key, value in record.items() if key not in SETTING_KEYS}
        run.settings.append(
            SettingResult(
                setting_index=int(record.get("setting", 0)),
                label=str(record.get("label", report.kind)),
                angle=_optional_float(record.get("angle")),
                n_particles=int(record.get("pairs", record.get("n", 0))),
                metrics_json=canonical_json(metrics),
            )
        )
    db.session.commit()
    logger.info("Recorded %s run %d (%d settings)", report.kind, run.id, len(run.settings))
    return run


def run_payload(run: SimulationRun) -> Dict[str, Any]:
    return {
        "id": run.id,
        "kind": run.kind,
        "mode": run.mode,
        "seed": run.seed,
        "config_hash": run.config_hash,
        "code_version": run.code_version,
        "n_particles": run.n_particles,
        "accepted_fraction": run.accepted_fraction,
        "chsh": run.chsh,
        "passed": run.passed,
        "out_dir": run.out_dir,
        "created_at": run.created_at.isoformat() if run.created_at else None,
    }


def recent_runs(limit: int = 20, kind: Optional[str] = None) -> List[SimulationRun]:
    query = SimulationRun.query
    if kind:
        query = query.filter_by(kind=kind)
    return query.order_by(SimulationRun.id.desc()).limit(limit).all()
