import json
import math

import pytest

from cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_OK, build_parser, main, resolve_out_dir
from experiments import default_scenario


def _scenario(tmp_path, **data):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_parser_accepts_overrides():
    args = build_parser().parse_args(["run", "bell", "--seed", "4", "--n-p", "100", "--threads", "2"])
    assert (args.command, args.config, args.seed, args.n_p, args.threads) == ("run", "bell", 4, 100, 2)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "bell", "--mode", "quantum"])


def test_run_writes_artifacts(tmp_path, cli_config, capsys):
    out = tmp_path / "out"
    code = main(["run", "homogeneous", "--n-p", "300", "--seed", "5", "--out", str(out)], cli_config)
    assert code == EXIT_OK
    for name in ("config.json", "summary.json", "settings.csv", "spin_pmf.csv"):
        assert (out / name).exists()
    assert json.loads((out / "config.json").read_text(encoding="utf-8"))["seed"] == 5
    assert "recorded as run 1" in capsys.readouterr().out


def test_check_passes_on_aligned_field(tmp_path, cli_config):
    path = _scenario(tmp_path, kind="homogeneous", seed=1, n_p=500, angles=[0.0])
    assert main(["check", path, "--out", str(tmp_path / "out")], cli_config) == EXIT_OK


def test_check_failure_exit_code(tmp_path, cli_config, capsys):
    # Seven particles can never give P(+1) = 1/2
    path = _scenario(tmp_path, kind="homogeneous", seed=1, n_p=7, angles=[math.pi / 2.0])
    assert main(["check", path, "--out", str(tmp_path / "out")], cli_config) == EXIT_CHECK_FAILED
    assert "[FAIL] spin_law" in capsys.readouterr().out


def test_invalid_scenario_exit_code(tmp_path, cli_config, capsys):
    path = _scenario(
        tmp_path, kind="homogeneous", ensemble={"sources": [{"position": [0, 0, 0], "probability": 0.4}]}
    )
    assert main(["run", path, "--out", str(tmp_path / "out")], cli_config) == EXIT_CONFIG
    assert "configuration error: ensemble.sources" in capsys.readouterr().err


def test_missing_scenario_exit_code(tmp_path, cli_config, capsys):
    missing = str(tmp_path / "missing.json")
    assert main(["run", missing], cli_config) == EXIT_IO
    assert missing in capsys.readouterr().err


def test_oracle_writes_reference_tables(tmp_path, cli_config):
    out = tmp_path / "oracle"
    assert main(["oracle", "homogeneous", "--out", str(out)], cli_config) == EXIT_OK
    assert (out / "spin_pmf.csv").exists()
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["summary"] == {"reference_only": True}


def test_history_lists_recorded_runs(tmp_path, cli_config, capsys):
    main(["history"], cli_config)
    assert "no recorded runs" in capsys.readouterr().out

    main(["run", "homogeneous", "--n-p", "100", "--out", str(tmp_path / "out")], cli_config)
    capsys.readouterr()
    assert main(["history", "--kind", "homogeneous"], cli_config) == EXIT_OK
    assert "homogeneous" in capsys.readouterr().out


def test_output_directory_precedence(tmp_path, monkeypatch):
    cfg = default_scenario("homogeneous")
    monkeypatch.setenv("LRM_OUT", str(tmp_path / "env"))
    assert resolve_out_dir(str(tmp_path / "cli"), cfg) == str(tmp_path / "cli")
    assert resolve_out_dir(None, cfg) == str(tmp_path / "env")
    monkeypatch.delenv("LRM_OUT")
    assert resolve_out_dir(None, cfg) != str(tmp_path / "env")
