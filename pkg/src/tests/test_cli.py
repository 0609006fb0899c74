"""End-to-end tests of the command-line entry point."""

import json

import pytest

from src.cli import EXIT_CONFIG, EXIT_OK, build_parser, load_config, main

MODEL = {"a1": 2, "a2": 2, "b1": 3, "b2": 3, "gamma": 4}


def _write_config(tmp_path, **payload):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _summary(out_dir):
    return json.loads((out_dir / "summary.json").read_text(encoding="utf-8"))


def test_parser_requires_config():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_seed_flag_overrides_config(tmp_path):
    path = _write_config(tmp_path, model=MODEL, seed=5)
    assert load_config(path).seed == 5
    assert load_config(path, seed=9).seed == 9


def test_validate_admissible_model(tmp_path):
    out = tmp_path / "validate"
    path = _write_config(tmp_path, model=MODEL, experiment="validate")
    assert main(["--config", path, "--out", str(out), "--quiet"]) == EXIT_OK
    summary = _summary(out)
    conditions = summary["results"]["admissibility"]["conditions"]
    assert len(conditions) == 3
    assert all(c["passed"] for c in conditions)
    assert summary["passed"] is True
    assert (out / "baselines.json").exists()


def test_validate_summary_is_deterministic(tmp_path):
    path = _write_config(tmp_path, model=MODEL, experiment="validate", seed=11)
    main(["--config", path, "--out", str(tmp_path / "first"), "--quiet"])
    main(["--config", path, "--out", str(tmp_path / "second"), "--quiet"])
    first = (tmp_path / "first" / "summary.json").read_bytes()
    second = (tmp_path / "second" / "summary.json").read_bytes()
    assert first == second


def test_inadmissible_model_is_a_configuration_error(tmp_path, capsys):
    out = tmp_path / "steady"
    path = _write_config(tmp_path, model={**MODEL, "a1": 1.5}, experiment="steady")
    assert main(["--config", path, "--out", str(out), "--quiet"]) == EXIT_CONFIG
    assert "ConfigurationError" in capsys.readouterr().err
    assert _summary(out)["success"] is False


def test_invalid_schema_is_rejected(tmp_path):
    path = _write_config(tmp_path, model=MODEL, grid={"n": 4})
    assert main(["--config", path, "--out", str(tmp_path / "bad"), "--quiet"]) == EXIT_CONFIG
    assert not (tmp_path / "bad").exists()


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.json"), "--quiet"]) == EXIT_CONFIG


def test_steady_experiment_checks_the_analytic_profile(tmp_path):
    out = tmp_path / "steady"
    path = _write_config(
        tmp_path, model=MODEL, experiment="steady", grid={"n": 512}, steady={"multistart": False}
    )
    assert main(["--config", path, "--out", str(out), "--quiet"]) == EXIT_OK
    summary = _summary(out)
    assert summary["checks"]["barenblatt_oracle"] is True
    assert summary["results"]["barenblatt"]["max_relative_error"] <= 1e-3
    assert (out / "snapshot_steady.csv").exists()


def test_short_jko_experiment(tmp_path):
    out = tmp_path / "jko"
    path = _write_config(
        tmp_path,
        model=MODEL,
        experiment="jko",
        grid={"n": 128},
        jko={"config": {"m": 64, "tau": 1e-2}, "nsteps": 3, "random_starts": 5},
    )
    assert main(["--config", path, "--out", str(out), "--quiet"]) == EXIT_OK
    for name in ("trace.csv", "steps.csv", "h1.csv", "random_steps.csv", "snapshot_initial.csv", "summary.json"):
        assert (out / name).exists()
    checks = _summary(out)["checks"]
    assert checks["step_inequality"] is True
    assert checks["step_inequality_random"] is True
    assert checks["h1_estimate"] is True


def test_lower_bound_gate_uses_the_audited_eps0(tmp_path):
    out = tmp_path / "probes"
    path = _write_config(
        tmp_path,
        model={**MODEL, "eps": 0.05},
        experiment="probes",
        grid={"n": 128},
        steady={"multistart": False},
        probes={"n_pairs": 3, "quantiles": 64},
    )
    main(["--config", path, "--out", str(out), "--quiet"])
    summary = _summary(out)
    assert summary["success"] is True
    eps0 = summary["results"]["eps0_estimate"]
    assert isinstance(eps0, float)
    assert ("energy_lower_bounds" in summary["checks"]) == (0.05 <= eps0)
    assert "interaction_bounds_moments" in summary["checks"]
    assert (out / "probes.csv").exists()
