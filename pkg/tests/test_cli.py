import csv
import hashlib
import json

import pytest
import yaml

from dpxfin import cli, runs
from dpxfin.config import ConfigError, load_spec, spec_from_dict
from dpxfin.data import CSV_HEADER

SMALL = {
    "seed": 3,
    "output_dir": "run",
    "data": {"n_rows": 1500, "positive_fraction": 0.05},
    "federation": {"n_clients": 3, "rounds": 2},
    "training": {"hidden_dims": [8]},
}


def _config(tmp_path, **overrides):
    blob = json.loads(json.dumps(SMALL))
    for section, values in overrides.items():
        if isinstance(values, dict):
            blob.setdefault(section, {}).update(values)
        else:
            blob[section] = values
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(blob))
    return path


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("DPXFIN_OUTPUT_ROOT", str(tmp_path / "out"))
    return tmp_path / "out"


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ----------------------------------------------------------------------------- config


@pytest.mark.parametrize("section, key, value, field", [
    ("dp", "sigma", -0.1, "dp.sigma"),
    ("dp", "clip_norm", 0.0, "dp.clip_norm"),
    ("federation", "participation_fraction", 0.0, "federation.participation_fraction"),
    ("federation", "participation_fraction", 1.2, "federation.participation_fraction"),
    ("federation", "alpha", 0.0, "federation.alpha"),
])
def test_validation_names_field(section, key, value, field):
    with pytest.raises(ConfigError, match=field):
        spec_from_dict({section: {key: value}})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        spec_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="federation.*clients"):
        spec_from_dict({"federation": {"clients": 5}})


def test_yaml_and_json_load_the_same_spec(tmp_path):
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(SMALL))
    (tmp_path / "a.json").write_text(json.dumps(SMALL))
    assert load_spec(tmp_path / "a.yaml").to_dict() == load_spec(tmp_path / "a.json").to_dict()


def test_output_root_env_override(output_root):
    assert spec_from_dict({"output_dir": "x"}).resolved_output_dir() == output_root / "x"


# ----------------------------------------------------------------------------- synth


def test_synth_header_rows_and_determinism(tmp_path, output_root):
    cfg = _config(tmp_path)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    path = output_root / "run" / "transactions.csv"
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == CSV_HEADER
    assert len(lines) == 1 + 1500
    first = _sha(path)
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    assert _sha(path) == first


def test_synth_unwritable_path_is_runtime_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = _config(tmp_path, output_dir=str(blocker / "sub"))
    assert cli.main(["synth", "--config", str(cfg)]) == cli.EXIT_RUNTIME


# ----------------------------------------------------------------------------- train


@pytest.fixture
def trained(tmp_path, output_root):
    cfg = _config(tmp_path, federation={"store_updates": True, "probe_batch_size": 4})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return cfg, output_root / "run"


def test_train_writes_one_directory_per_method(trained):
    _, root = trained
    assert sorted(p.name for p in root.iterdir() if p.is_dir()) == ["DP-FedAvg", "DPxFin", "FedAvg"]
    for method in ("FedAvg", "DP-FedAvg", "DPxFin"):
        rows = runs.read_rounds(root / method)
        assert [int(r["round"]) for r in rows] == [1, 2]
        final = json.loads((root / method / runs.FINAL_FILE).read_text())
        assert {"accuracy", "f1", "precision", "recall"} <= set(final)
        assert final["method"] == method
    ledger = runs.read_ledger(root / "DPxFin")
    assert len(ledger) == 2 * 3 and {r["round"] for r in ledger} == {1, 2}
    assert not (root / "FedAvg" / runs.LEDGER_FILE).exists()
    assert len(runs.load_probes(root / "DPxFin")) == 6


def test_train_is_byte_identical_on_rerun(trained, output_root):
    cfg, root = trained
    before = {m: _sha(root / m / runs.ROUNDS_FILE) for m in ("FedAvg", "DPxFin")}
    ledger = _sha(root / "DPxFin" / runs.LEDGER_FILE)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert {m: _sha(root / m / runs.ROUNDS_FILE) for m in ("FedAvg", "DPxFin")} == before
    assert _sha(root / "DPxFin" / runs.LEDGER_FILE) == ledger


def test_seed_override_changes_results(trained, tmp_path, output_root):
    cfg, root = trained
    assert cli.main(["train", "--config", str(cfg), "--seed", "4", "--out", "other"]) == 0
    assert _sha(output_root / "other" / "DPxFin" / runs.ROUNDS_FILE) != _sha(root / "DPxFin" / runs.ROUNDS_FILE)


def test_invalid_config_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path, dp={"sigma": -1})
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert "dp.sigma" in capsys.readouterr().err


def test_midrun_failure_leaves_error_record(tmp_path, output_root, monkeypatch):
    import dpxfin.federation as fed

    def boom(*a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(fed, "run_round", boom)
    cfg = _config(tmp_path, federation={"methods": ["FedAvg"]})
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_RUNTIME
    err = json.loads((output_root / "run" / "FedAvg" / runs.ERROR_FILE).read_text())
    assert "injected" in err["error"]
    assert (output_root / "run" / "FedAvg" / runs.CONFIG_FILE).exists()


def test_locked_run_directory_is_refused(tmp_path, output_root):
    from filelock import FileLock

    cfg = _config(tmp_path)
    (output_root / "run").mkdir(parents=True)
    with FileLock(str(output_root / "run" / cli.LOCK_FILE)):
        assert cli.main(["synth", "--config", str(cfg)]) == cli.EXIT_RUNTIME


# ----------------------------------------------------------------------------- attack


def test_attack_without_updates_names_the_flag(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert cli.main(["attack", "--config", str(cfg)]) == cli.EXIT_RUNTIME
    assert "federation.store_updates" in capsys.readouterr().err


def test_attack_summary(tmp_path, output_root):
    cfg = _config(tmp_path, federation={"methods": ["FedAvg", "DPxFin"], "rounds": 1, "store_updates": True,
                                        "probe_batch_size": 4},
                  attack={"batch_size": 4, "n_victims": 2, "steps": 30, "n_ensemble": 2})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert cli.main(["attack", "--config", str(cfg)]) == 0
    summary = json.loads((output_root / "run" / "attack_summary.json").read_text())
    assert [r["method"] for r in summary] == ["FedAvg", "DPxFin"]
    spec = load_spec(cfg)
    assert all(r["config_hash"] == spec.attack_config().digest() for r in summary)
    assert all(r["batch_size"] == 4 and r["n_victims"] == 2 for r in summary)
    assert "surrogate" in (output_root / "run" / "attack_summary.txt").read_text()


# ----------------------------------------------------------------------------- report


def test_report_round_trips_final_metrics(trained, tmp_path, capsys):
    _, root = trained
    assert cli.main(["report", str(root / "DPxFin"), "--out", str(tmp_path / "rep")]) == 0
    with open(tmp_path / "rep" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    final = json.loads((root / "DPxFin" / runs.FINAL_FILE).read_text())
    for key in ("accuracy", "f1", "precision", "recall"):
        assert float(rows[0][key]) == final[key]
    assert "DPxFin" in (tmp_path / "rep" / "report.txt").read_text()


def test_report_sorted_and_skips_malformed(trained, tmp_path, caplog):
    _, root = trained
    bad = tmp_path / "bad" / "FedAvg"
    bad.mkdir(parents=True)
    (bad / runs.CONFIG_FILE).write_text("{not json")
    rows = cli.cmd_report([root, tmp_path / "bad", tmp_path / "nothing"], tmp_path / "rep")
    assert [r["method"] for r in rows] == ["FedAvg", "DP-FedAvg", "DPxFin"]
    keys = [(r["setting"], r["clients"]) for r in rows]
    assert keys == sorted(keys)
    assert "skipping" in caplog.text


def test_report_with_nothing_readable_fails(tmp_path):
    assert cli.main(["report", str(tmp_path / "nope"), "--out", str(tmp_path)]) == cli.EXIT_RUNTIME
