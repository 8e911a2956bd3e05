import csv
import json
import logging

import pytest

from modelswap.cli import main
from modelswap.core import config_sha256, config_from_dict, default_scenario


def run_cli(*argv):
    return main([str(a) for a in argv])


def only_dir(root):
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_run_happy_path(tmp_path):
    cfg = tmp_path / "table1.json"
    cfg.write_text(json.dumps({"requests_per_app": 30}))
    assert run_cli("run", "--config", cfg, "--policy", "iws-bfe", "--seed", 42, "--out", tmp_path / "res") == 0
    d = only_dir(tmp_path / "res")
    assert d.name.startswith("run_iws-bfe_s42_")
    names = {p.name for p in d.iterdir()}
    assert names == {"runlog.jsonl", "events.jsonl", "summary.csv", "report.json", "manifest.json"}
    manifest = json.loads((d / "manifest.json").read_text())
    sha = manifest["config_sha256"]
    assert manifest["seed"] == 42 and d.name.endswith(sha[:12])
    for name in ("runlog.jsonl", "events.jsonl", "summary.csv", "report.json"):
        text = (d / name).read_text()
        assert sha in text and "42" in text
    assert json.loads((d / "report.json").read_text())["meta"]["config_sha256"] == sha


def test_run_is_byte_identical_and_manifest_reruns(tmp_path):
    args = ("run", "--seed", 3, "--deviation", 0.5, "--policy", "ws-bfe")
    assert run_cli(*args, "--out", tmp_path / "a") == 0
    assert run_cli(*args, "--out", tmp_path / "b") == 0
    a, b = only_dir(tmp_path / "a"), only_dir(tmp_path / "b")
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()
    # a manifest is itself a valid config
    assert run_cli("run", "--config", a / "manifest.json", "--out", tmp_path / "c") == 0
    c = only_dir(tmp_path / "c")
    assert c.name == a.name
    assert (c / "runlog.jsonl").read_bytes() == (a / "runlog.jsonl").read_bytes()


def test_run_csv_format_and_failures_exit_zero(tmp_path):
    # a tight budget forces inference failures; the run still succeeds
    assert run_cli("run", "--policy", "none", "--budget-mb", 300, "--format", "csv", "--out", tmp_path) == 0
    d = only_dir(tmp_path)
    rows = read_csv(d / "report.csv")
    fail = [r for r in rows if r["metric"] == "failure_pct"]
    assert float(fail[0]["value"]) > 0


def test_malformed_json_exits_2_with_byte_offset(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,, }')
    assert run_cli("run", "--config", bad, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "byte offset 11" in err and "line 1, column 12" in err


def test_invalid_field_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"deviation": 3}))
    assert run_cli("run", "--config", cfg, "--out", tmp_path) == 2
    assert "deviation" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path):
    assert run_cli("run", "--config", tmp_path / "nope.json", "--out", tmp_path) == 1


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("EDGE_MULTIAI_OUT", str(tmp_path / "env"))
    monkeypatch.chdir(tmp_path)
    assert run_cli("run", "--seed", 1) == 0
    assert only_dir(tmp_path / "env").name.startswith("run_iws-bfe_s1_")
    assert run_cli("run", "--seed", 1, "--out", tmp_path / "flag") == 0
    assert (tmp_path / "flag").is_dir()


def test_flags_override_file_override_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "deviation": 0.6, "policy": "bfe"}))
    assert run_cli("run", "--config", cfg, "--seed", 9, "--out", tmp_path / "o") == 0
    manifest = json.loads((only_dir(tmp_path / "o") / "manifest.json").read_text())
    got = manifest["config"]
    assert (got["seed"], got["deviation"], got["policy"]) == (9, 0.6, "bfe")
    assert got["memory_budget_mb"] == 1024.0  # built-in default
    expected = config_from_dict({"seed": 9, "deviation": 0.6, "policy": "bfe"}, base=default_scenario())
    assert manifest["config_sha256"] == config_sha256(expected)


def write_sweep(tmp_path, **kw):
    spec = {"axis": "deviation", "values": [0.0, 0.3, 0.6, 0.9], "repetitions": 10, "base": {"requests_per_app": 10}}
    spec.update(kw)
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(spec))
    return path


def test_deviation_sweep_row_counts(tmp_path):
    assert run_cli("sweep", write_sweep(tmp_path), "--out", tmp_path / "s", "--jobs", 1) == 0
    out = tmp_path / "s"
    assert len(list((out / "reports").iterdir())) == 200
    agg = read_csv(out / "aggregate.csv")
    assert len(agg) == 4 * 5 * 6
    assert all(r["n"] == "10" and r["ci95_low"] and r["ci95_high"] for r in agg if r["metric"] != "mean_accuracy_pct")
    row = next(r for r in agg if r["metric"] == "satisfaction_rate_pct")
    assert float(row["ci95_low"]) <= float(row["mean"]) <= float(row["ci95_high"])
    assert len(row["seeds"].split(";")) == 10
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["runs"]) == 200 and manifest["sweep"]["axis"] == "deviation"
    runs = read_csv(out / "runs.csv")
    assert len(runs) == 200 * (6 + 3 * 5)


def test_sweep_single_repetition_leaves_ci_empty(tmp_path):
    path = write_sweep(tmp_path, axis="alpha", values=[0, 1, 2], policies=["lfe", "iws-bfe"], repetitions=1)
    assert run_cli("sweep", path, "--out", tmp_path / "s") == 0
    agg = read_csv(tmp_path / "s" / "aggregate.csv")
    assert len(agg) == 3 * 2 * 6
    assert all(r["ci95_low"] == "" and r["ci95_high"] == "" and r["n"] == "1" for r in agg)


def test_sweep_jobs_do_not_change_results(tmp_path):
    path = write_sweep(tmp_path, values=[0.3], policies=["bfe", "iws-bfe"], repetitions=2)
    assert run_cli("sweep", path, "--out", tmp_path / "a", "--jobs", 1) == 0
    assert run_cli("sweep", path, "--out", tmp_path / "b", "--jobs", 2) == 0
    for name in ("aggregate.csv", "runs.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("change", [
    {"axis": "budget"}, {"values": []}, {"values": [0.5, 0.1]}, {"repetitions": 0}, {"policies": ["lru"]},
    {"values": [2.0]}, {"extra": 1},
])
def test_sweep_spec_errors_exit_2(tmp_path, change):
    assert run_cli("sweep", write_sweep(tmp_path, **change), "--out", tmp_path / "s") == 2


def test_report_writes_six_tables(tmp_path):
    path = write_sweep(tmp_path, values=[0.0, 0.6], repetitions=2)
    assert run_cli("sweep", path, "--out", tmp_path / "s", "--jobs", 1) == 0
    assert run_cli("report", tmp_path / "s") == 0
    tables = tmp_path / "s" / "tables"
    assert sorted(p.name for p in tables.iterdir()) == sorted([
        "fig2_satisfaction.csv", "fig3_cold_start.csv", "fig4_accuracy.csv",
        "fig5_pareto.csv", "fig6_robustness.csv", "fig7_8_per_app.csv",
    ])
    pareto = read_csv(tables / "fig5_pareto.csv")
    assert pareto and "none" not in {r["policy"] for r in pareto}
    assert any(r["on_front"] == "1" or r["on_front"].lower() == "true" for r in pareto)


def test_report_skips_runs_without_policy(tmp_path, caplog):
    path = write_sweep(tmp_path, values=[0.3], policies=["lfe"], repetitions=2)
    assert run_cli("sweep", path, "--out", tmp_path / "s") == 0
    victim = sorted((tmp_path / "s" / "reports").iterdir())[0]
    data = json.loads(victim.read_text())
    del data["meta"]["policy"]
    victim.write_text(json.dumps(data))
    with caplog.at_level(logging.WARNING):
        assert run_cli("report", tmp_path / "s", "--out", tmp_path / "t") == 0
    assert any("skipping" in r.getMessage() and victim.name in r.getMessage() for r in caplog.records)


def test_report_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run_cli("report", tmp_path / "empty") == 1
    assert run_cli("report", tmp_path / "missing") == 1
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "r.json").write_text("{not json")
    assert run_cli("report", tmp_path / "bad") == 1
