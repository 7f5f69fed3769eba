import math

import pytest

from experiments import load_scenario, run_scenario
from registry import record_run


@pytest.fixture()
def recorded(app):
    cfg = load_scenario({"kind": "homogeneous", "seed": 3, "n_p": 200, "angles": [0.0, math.pi / 2.0]})
    report = run_scenario(cfg, check=True)
    with app.app_context():
        return record_run(report, "out/homogeneous").id


def test_list_runs(client, recorded):
    response = client.get("/api/runs")
    assert response.status_code == 200
    runs = response.get_json()
    assert [run["id"] for run in runs] == [recorded]
    assert runs[0]["kind"] == "homogeneous"
    assert runs[0]["seed"] == 3
    assert runs[0]["n_particles"] == 200

    assert client.get("/api/runs?kind=bell").get_json() == []
    assert client.get("/api/runs?limit=many").status_code == 400


def test_run_detail_includes_summary(client, recorded):
    payload = client.get(f"/api/runs/{recorded}").get_json()
    assert payload["out_dir"] == "out/homogeneous"
    assert payload["summary"]["kind"] == "homogeneous"
    assert [check["name"] for check in payload["summary"]["checks"]] == ["spin_law"]


def test_run_settings(client, recorded):
    rows = client.get(f"/api/runs/{recorded}/settings").get_json()
    assert [row["setting"] for row in rows] == [0, 1]
    assert rows[1]["angle"] == pytest.approx(math.pi / 2.0)
    assert rows[0]["n_particles"] == 200
    assert rows[0]["metrics"]["ref_up"] == pytest.approx(1.0)


def test_unknown_run(client):
    assert client.get("/api/runs/999").status_code == 404
    assert client.get("/api/runs/999/settings").status_code == 404


def test_joint_reference(client):
    payload = client.get("/api/reference/joint?angle=0").get_json()
    assert payload["rho_pp"] == pytest.approx(0.0)
    assert payload["rho_pm"] == pytest.approx(0.5)
    assert payload["correlation"] == pytest.approx(-1.0)

    payload = client.get(f"/api/reference/joint?angle={math.pi / 2.0}").get_json()
    assert payload["correlation"] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("query", ["", "?angle=", "?angle=north", "?angle=nan"])
def test_joint_reference_needs_a_numeric_angle(client, query):
    assert client.get(f"/api/reference/joint{query}").status_code == 400
