import os


class Config:
    SQLALCHEMY_DATABASE_URI = os.environ.get(
        "DATABASE_URL", f"sqlite:///{os.path.join(os.path.dirname(__file__), 'runs.db')}"
    )
    SQLALCHEMY_TRACK_MODIFICATIONS = False
    JSON_SORT_KEYS = False

    # Run registry writes can be switched off for throwaway runs
    DATABASE_DISABLED = os.environ.get("LRM_DATABASE_DISABLED", "false").lower() == "true"

    OUTPUT_DIR = os.environ.get("LRM_OUT", os.path.join(os.getcwd(), "out"))
    LOG_DIR = os.environ.get("LRM_LOG_DIR", os.path.join(os.getcwd(), "logs"))
    LOG_LEVEL = os.environ.get("LRM_LOG_LEVEL", "INFO").upper()
    THREADS = int(os.environ.get("LRM_THREADS", 1))

    # Expected-motion tuning
    FILTER_TIME_CONSTANT = float(os.environ.get("LRM_FILTER_TAU", 8.0))


class TestConfig(Config):
    SQLALCHEMY_DATABASE_URI = "sqlite://"
    TESTING = True
