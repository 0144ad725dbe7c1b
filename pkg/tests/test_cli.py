"""Config handling, exit codes, and artifact contracts of the harness."""

import json
import os
import re

import pytest

from bdex import cli, pde


# -- configuration ------------------------------------------------------------


def test_defaults_fill_in():
    cfg = cli.load_config(None, [], experiment="hydrostatics")
    assert cfg["experiment"] == "hydrostatics"
    assert cfg["geometry"] == {"d": 2, "N": 8}
    assert cfg["run"]["T"] == 10.0 and cfg["run"]["burn_in"] == 1.0


def test_transient_experiments_start_measuring_at_once():
    cfg = cli.load_config(None, [], experiment="hydrodynamics")
    assert cfg["run"]["T"] == 0.5 and cfg["run"]["burn_in"] == 0.0


def test_set_overrides_coerce_yaml_types():
    cfg = cli.load_config(None, ["params.a=0.5", "geometry.N=[4, 8]",
                                 "run.replicas=3", "initial.type=step"],
                          experiment="hydrostatics")
    assert cfg["params"]["a"] == 0.5 and isinstance(cfg["params"]["a"], float)
    assert cfg["geometry"]["N"] == [4, 8]
    assert cfg["run"]["replicas"] == 3
    assert cfg["initial"]["type"] == "step"


def test_config_file_and_override_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("params:\n  a: 0.25\nrun:\n  seed: 9\n")
    cfg = cli.load_config(str(p), ["run.seed=11"], experiment="local-eq")
    assert cfg["params"]["a"] == 0.25
    assert cfg["run"]["seed"] == 11


def test_unknown_keys_rejected():
    with pytest.raises(cli.ConfigError, match="unknown config key 'params.bogus'"):
        cli.load_config(None, ["params.bogus=1"], experiment="local-eq")
    with pytest.raises(cli.ConfigError, match="unknown config key 'typo'"):
        cli.load_config(None, ["typo=2"], experiment="local-eq")


def test_experiment_conflict_and_inheritance(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("experiment: tilted\n")
    with pytest.raises(cli.ConfigError, match="subcommand"):
        cli.load_config(str(p), [], experiment="hydrostatics")
    cfg = cli.load_config(str(p), [], experiment="tilted")
    assert cfg["experiment"] == "tilted"


@pytest.mark.parametrize("override", [
    "params.a=-0.6",
    "geometry.N=1",
    "geometry.d=0",
    "run.burn_in=20",     # default T is 10
    "run.replicas=0",
    "smoothing.eps=-0.1",
    "probes=[99.0]",
])
def test_validation_rejects(override):
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, [override], experiment="hydrostatics")


def test_malformed_set_item():
    with pytest.raises(cli.ConfigError, match="key=value"):
        cli.load_config(None, ["params.a"], experiment="local-eq")


def test_config_hash_tracks_content():
    c1 = cli.load_config(None, [], experiment="local-eq")
    c2 = cli.load_config(None, [], experiment="local-eq")
    assert cli.config_hash(c1) == cli.config_hash(c2)
    c3 = cli.load_config(None, ["run.seed=2"], experiment="local-eq")
    assert cli.config_hash(c1) != cli.config_hash(c3)


def test_auto_eps_default_is_half_integer():
    assert cli._auto_eps(None, 8) == pytest.approx(1.5 / 8)
    assert cli._auto_eps(None, 8) * 8 == pytest.approx(1.5)
    assert cli._auto_eps(0.2, 8) == 0.2


def test_main_returns_2_on_bad_input(tmp_path):
    assert cli.main(["hydrostatics", "--config", "/does/not/exist.yaml"]) == 2
    assert cli.main(["local-eq", "--set", "params.a=-2",
                     "--out", str(tmp_path)]) == 2


# -- summary schema ------------------------------------------------------------


def _validate_summary(doc: dict):
    """Check a summary against the shipped schema, feature by feature."""
    with open(cli.summary_schema_path()) as fh:
        schema = json.load(fh)
    props = schema["properties"]
    assert set(schema["required"]) <= set(doc)
    assert set(doc) <= set(props)
    assert doc["experiment"] in props["experiment"]["enum"]
    assert isinstance(doc["passed"], bool)
    assert re.fullmatch(props["config_sha256"]["pattern"], doc["config_sha256"])
    assert all(isinstance(a, str) for a in doc["artifacts"])
    item = props["checks"]["items"]
    for c in doc["checks"]:
        assert set(item["required"]) <= set(c) <= set(item["properties"])
        assert isinstance(c["name"], str)
        assert isinstance(c["pass"], bool)
        assert isinstance(c["tol"], (int, float)) and not isinstance(c["tol"], bool)
        assert c["target"] is None or isinstance(c["target"], (int, float))
        ok_num = isinstance(c["value"], (int, float)) and not isinstance(c["value"], bool)
        ok_arr = isinstance(c["value"], list) and all(
            isinstance(v, (int, float)) for v in c["value"])
        assert ok_num or ok_arr


# -- end-to-end runs -----------------------------------------------------------


_ORACLE_ARGS = ["geometry.d=1", "geometry.N=3", "params.a=0.5", "run.T=80",
                "run.replicas=4", "run.seed=5", "run.burn_in=5"]


def test_oracle_check_end_to_end(tmp_path):
    out = tmp_path / "run"
    cfg = cli.load_config(None, _ORACLE_ARGS, experiment="oracle-check")
    assert cli.run_experiment(cfg, str(out)) == 0

    doc = json.loads((out / "summary.json").read_text())
    _validate_summary(doc)
    assert doc["passed"] is True
    assert doc["config_sha256"] == cli.config_hash(cfg)
    assert "oracle_z.csv" in doc["artifacts"]
    for name in doc["artifacts"]:
        assert (out / name).exists()

    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1
    entry = json.loads(lines[0])
    assert entry["config_sha256"] == cli.config_hash(cfg)
    assert entry["experiment"] == "oracle-check"
    assert entry["seed"] == 5
    assert {"bdex", "numpy"} <= set(entry["versions"])
    assert "timestamp" in entry


def test_reruns_are_byte_stable(tmp_path):
    cfg = cli.load_config(None, _ORACLE_ARGS, experiment="oracle-check")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run_experiment(cfg, str(a)) == 0
    assert cli.run_experiment(cfg, str(b)) == 0
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b))
    for name in names:
        if name == "manifest.jsonl":
            continue  # the one timestamped file
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_oracle_check_needs_replicas(tmp_path):
    cfg = cli.load_config(None, ["geometry.d=1", "geometry.N=3",
                                 "run.replicas=1"], experiment="oracle-check")
    assert cli.run_experiment(cfg, str(tmp_path)) == 2
    assert not (tmp_path / "summary.json").exists()


def test_oracle_check_state_space_guard_writes_error(tmp_path):
    # 27 sites cannot be enumerated; the failure lands in error.txt
    cfg = cli.load_config(None, ["geometry.d=1", "geometry.N=14"],
                          experiment="oracle-check")
    assert cli.run_experiment(cfg, str(tmp_path)) == 3
    assert (tmp_path / "error.txt").exists()
    assert not (tmp_path / "summary.json").exists()


def test_ficks_law_writes_runtime_target(tmp_path):
    cfg = cli.load_config(None, ["geometry.d=1", "geometry.N=4", "params.a=0",
                                 "run.T=2000", "run.replicas=2", "run.seed=3",
                                 "run.burn_in=20"], experiment="ficks-law")
    assert cli.run_experiment(cfg, str(tmp_path)) == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    _validate_summary(doc)
    lines = (tmp_path / "target.csv").read_text().splitlines()
    want = pde.phi(0.8, 0.0) - pde.phi(0.2, 0.0)
    assert lines[0] == "target" and float(lines[1]) == pytest.approx(want)
    assert all(c["target"] == pytest.approx(want) for c in doc["checks"])


def test_ficks_law_rejects_modulated_boundary(tmp_path):
    cfg = cli.load_config(
        None, ["params.b_minus={base: 0.8, modes: [[[1], 0.1, 0.0]]}"],
        experiment="ficks-law")
    assert cli.run_experiment(cfg, str(tmp_path)) == 2


def test_failed_numerical_check_exits_3(tmp_path):
    # one replica for an instant cannot track the parabolic profile
    cfg = cli.load_config(None, ["geometry.d=1", "geometry.N=4", "run.T=0.05",
                                 "run.replicas=1", "run.seed=2", "params.a=0.5"],
                          experiment="hydrodynamics")
    assert cli.run_experiment(cfg, str(tmp_path)) == 3
    doc = json.loads((tmp_path / "summary.json").read_text())
    _validate_summary(doc)
    assert doc["passed"] is False
    assert any(not c["pass"] for c in doc["checks"])


def test_rate_eval_parabolic_path(tmp_path):
    cfg = cli.load_config(None, ["geometry.d=1", "geometry.N=4", "run.T=0.2",
                                 "field.amp=0", "params.a=0.5"],
                          experiment="rate-eval")
    assert cli.run_experiment(cfg, str(tmp_path)) == 0
    report = json.loads((tmp_path / "rate_report.json").read_text())
    assert report["reason"] is None
    assert report["I_T"] < 1e-12


def test_local_eq_end_to_end(tmp_path):
    cfg = cli.load_config(None, ["geometry.d=1", "geometry.N=6", "run.T=4",
                                 "run.burn_in=1", "run.seed=7"],
                          experiment="local-eq")
    assert cli.run_experiment(cfg, str(tmp_path)) == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    _validate_summary(doc)
    body = (tmp_path / "residuals.csv").read_text().splitlines()
    assert body[0] == "N,psi,i,eps,residual"
    assert len(body) == 1 + len(cfg["psi"])


def test_console_entry_point_via_main(tmp_path):
    rc = cli.main(["oracle-check", "--out", str(tmp_path / "o")]
                  + [f"--set={s}" for s in _ORACLE_ARGS])
    assert rc == 0
    assert (tmp_path / "o" / "summary.json").exists()
