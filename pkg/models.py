from datetime import datetime

from database import db


class SimulationRun(db.Model):
    __tablename__ = "simulation_runs"

    id = db.Column(db.Integer, primary_key=True)
    kind = db.Column(db.String(32), nullable=False, index=True)
    mode = db.Column(db.String(32), nullable=False)
    seed = db.Column(db.BigInteger, nullable=False)
    config_hash = db.Column(db.String(64), nullable=False, index=True)
    code_version = db.Column(db.String(32), nullable=False)
    n_particles = db.Column(db.Integer, nullable=False)
    accepted_fraction = db.Column(db.Float, nullable=True)
    chsh = db.Column(db.Float, nullable=True)
    passed = db.Column(db.Boolean, nullable=True)
    out_dir = db.Column(db.String(512), nullable=True)
    summary_json = db.Column(db.Text, nullable=True)
    created_at = db.Column(db.DateTime, nullable=False, default=datetime.utcnow)

    settings = db.relationship(
        "SettingResult", backref="run", lazy=True, order_by="SettingResult.setting_index", cascade="all, delete-orphan"
    )


class SettingResult(db.Model):
    __tablename__ = "setting_results"

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey("simulation_runs.id"), index=True, nullable=False)
    setting_index = db.Column(db.Integer, nullable=False)
    label = db.Column(db.String(32), nullable=True)
    angle = db.Column(db.Float, nullable=True)
    n_particles = db.Column(db.Integer, nullable=True)
    metrics_json = db.Column(db.Text, nullable=True)
    __table_args__ = (db.Index("idx_setting_results_run_setting", "run_id", "setting_index"),)
