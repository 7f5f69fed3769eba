import logging
import os
import sys
from typing import Optional

from flask import Flask

from config import Config
from database import db
from routes.api import api_bp

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


def configure_logging(log_dir: Optional[str] = None, level: str = "INFO", stream: bool = True) -> logging.Logger:
    """Route every module logger to ``<log_dir>/lrm.log`` and, for the CLI, to stderr."""
    root = logging.getLogger()
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_path = os.path.abspath(os.path.join(log_dir, "lrm.log"))
        if not any(getattr(h, "baseFilename", None) == log_path for h in root.handlers):
            handler = logging.FileHandler(log_path)
            handler.setFormatter(formatter)
            root.addHandler(handler)

    if stream and not any(getattr(h, "_lrm_stderr", False) for h in root.handlers):
        stderr = logging.StreamHandler(sys.stderr)
        stderr.setFormatter(formatter)
        stderr._lrm_stderr = True
        root.addHandler(stderr)
    return root


def create_app(config_class=Config) -> Flask:
    app = Flask(__name__)
    app.config.from_object(config_class)

    if not app.config.get("TESTING"):
        configure_logging(app.config.get("LOG_DIR"), app.config.get("LOG_LEVEL", "INFO"), stream=False)

    db.init_app(app)

    with app.app_context():
        db.create_all()

    app.register_blueprint(api_bp)
    return app


if __name__ == "__main__":
    create_app().run(host="0.0.0.0", port=5000, debug=False, use_reloader=False)
