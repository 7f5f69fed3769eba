import pytest

from app import create_app
from config import TestConfig
from database import db
from particles import PolarizationSpec, Source, SourceEnsemble, single_source


@pytest.fixture()
def app():
    app = create_app(TestConfig)
    yield app
    with app.app_context():
        db.session.remove()
        db.drop_all()


@pytest.fixture()
def client(app):
    return app.test_client()


@pytest.fixture()
def cli_config(tmp_path):
    """Config class with a file-backed registry so separate CLI calls share it."""
    return type(
        "CliTestConfig",
        (TestConfig,),
        {
            "SQLALCHEMY_DATABASE_URI": f"sqlite:///{tmp_path / 'runs.db'}",
            "LOG_DIR": str(tmp_path / "logs"),
            "DATABASE_DISABLED": False,
        },
    )


@pytest.fixture()
def two_slit() -> SourceEnsemble:
    sources = (Source(position=(-2, 0, 0), probability=0.5), Source(position=(2, 0, 0), probability=0.5))
    return SourceEnsemble(sources=sources, active_dims=(0,), rho=(1.0, 0.0, 0.0))


@pytest.fixture()
def point_source() -> SourceEnsemble:
    return single_source(active_dims=(0,), polarization=PolarizationSpec(mode="fixed", direction=(0.0, 0.0, 1.0)))
