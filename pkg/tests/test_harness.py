from __future__ import annotations

import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from memosched import cli, harness
from memosched.schedule import ScheduleParams, eval_schedule

MINIMAL = {"dataset": {"n_per_class": 30, "dim": 4}, "train": {"epochs": 2, "hidden": [8]},
           "search": {"M": 1, "K": 2}, "seed": 3}


def write_config(tmp_path, doc=MINIMAL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run_cli(*args):
    return cli.main([str(a) for a in args])


def test_minimal_run_writes_all_artifacts(tmp_path):
    out = tmp_path / "run"
    assert run_cli("search", "--config", write_config(tmp_path), "--out", out) == 0
    for name in harness.ARTIFACTS:
        assert (out / name).is_file()
    rows = list(csv.DictReader(io.StringIO((out / "search_trace.csv").read_text())))
    assert len(rows) == 1 and rows[0]["calls"] == "2"
    best = json.loads((out / "best_schedule.json").read_text())
    ScheduleParams.from_dict(best["schedule"])
    curve = (out / "best_schedule_curve.csv").read_text().splitlines()
    assert curve[0] == "t,R" and len(curve) == 4
    report = (out / "final_report.csv").read_text().splitlines()
    assert report[0] == "epoch,train_acc,val_acc,test_acc,label_precision" and len(report) == 3
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seed"] == 3 and set(manifest["resolved_seeds"]) == {"data", "noise", "train", "search"}


def test_manifest_replay_is_byte_identical(tmp_path):
    cfg = dict(MINIMAL, search={"M": 2, "K": 3})
    assert run_cli("search", "--config", write_config(tmp_path, cfg), "--out", tmp_path / "a") == 0
    assert run_cli("search", "--config", tmp_path / "a" / "run_manifest.json", "--out", tmp_path / "b") == 0
    for name in ("search_trace.csv", "best_schedule.json", "best_schedule_curve.csv", "final_report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_worker_count_does_not_change_the_trace(tmp_path):
    cfg = dict(MINIMAL, search={"M": 2, "K": 4})
    path = write_config(tmp_path, cfg)
    assert run_cli("search", "--config", path, "--out", tmp_path / "w1", "--workers", 1) == 0
    assert run_cli("search", "--config", path, "--out", tmp_path / "w3", "--workers", 3) == 0
    assert (tmp_path / "w1" / "search_trace.csv").read_bytes() == (tmp_path / "w3" / "search_trace.csv").read_bytes()


def test_budget_cap_is_respected(tmp_path):
    cfg = dict(MINIMAL, search={"M": 5, "K": 4})
    assert run_cli("search", "--config", write_config(tmp_path, cfg), "--budget", 7, "--out", tmp_path / "r") == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "r" / "search_trace.csv").read_text())))
    assert int(rows[-1]["calls"]) <= 7


def test_seed_flag_overrides_config(tmp_path):
    path = write_config(tmp_path)
    run_cli("search", "--config", path, "--seed", 11, "--out", tmp_path / "r")
    assert json.loads((tmp_path / "r" / "run_manifest.json").read_text())["seed"] == 11


def test_workers_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.WORKERS_ENV, "2")
    assert harness.default_workers() == 2
    monkeypatch.setenv(harness.WORKERS_ENV, "zero")
    with pytest.raises(harness.HarnessError):
        harness.default_workers()


@pytest.mark.parametrize("doc,needle", [
    ({"bogus": 1}, "unknown config keys"),
    ({"search": {"K": 1}}, "invalid config"),
    ({"noise": {"type": "gaussian"}}, "noise type"),
    ({"workers": 0}, "workers"),
])
def test_invalid_config_is_one_line_nonzero(tmp_path, capsys, doc, needle):
    code = run_cli("search", "--config", write_config(tmp_path, doc), "--out", tmp_path / "r")
    err = capsys.readouterr().err
    assert code != 0 and needle in err and err.count("\n") == 1


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = run_cli("search", "--config", write_config(tmp_path), "--out", blocker / "sub")
    err = capsys.readouterr().err
    assert code != 0 and "not writable" in err and err.count("\n") == 1


def test_compare_surrogate_equal_calls(tmp_path):
    cfg = harness.ExperimentConfig.from_dict({"search": {"M": 4, "K": 5}, "seed": 2})
    text = harness.compare_search_algorithms(cfg, ["newton", "gd", "ng", "random"], surrogate=True)
    rows = list(csv.DictReader(io.StringIO(text)))
    final = {r["rule"]: int(r["calls"]) for r in rows if r["iteration"] == "3"}
    assert final == {"newton": 20, "gd": 20, "ng": 20, "random": 20}
    single = list(csv.DictReader(io.StringIO(harness.compare_search_algorithms(cfg, ["gd"], surrogate=True))))
    assert {r["rule"] for r in single} == {"gd"} and len(single) == 4
    with pytest.raises(harness.HarnessError):
        harness.compare_search_algorithms(cfg, ["adam"], surrogate=True)


def test_compare_with_trainer(tmp_path):
    out = tmp_path / "cmp"
    assert run_cli("compare", "--config", write_config(tmp_path), "--rules", "newton,random", "--out", out) == 0
    rows = list(csv.DictReader(io.StringIO((out / "compare.csv").read_text())))
    assert [r["rule"] for r in rows] == ["newton", "random"]


def test_emit_plot_data():
    rng = np.random.default_rng(0)
    alpha = rng.random(4)
    x = ScheduleParams(alpha / alpha.sum(), rng.random((4, 4)))
    rows = list(csv.reader(io.StringIO(harness.emit_schedule_plot_data(x, 200))))[1:]
    assert len(rows) == 201 and float(rows[0][1]) == 1.0
    for t, r in rows:
        assert 0 <= float(r) <= 1
        assert float(r) == eval_schedule(x, int(t), 200)


def test_emit_plot_cli(tmp_path, capsys):
    assert run_cli("emit-plot", "--T", 5) == 0
    assert capsys.readouterr().out.splitlines()[:2] == ["t,R", "0,1.0"]


def test_train_once_and_weights(tmp_path):
    out = tmp_path / "t"
    assert run_cli("train-once", "--config", write_config(tmp_path), "--out", out, "--dump-weights") == 0
    assert (out / "train_report.csv").is_file() and (out / "weights.bin.json").is_file()


def test_fit_coteaching_cli(tmp_path):
    assert run_cli("fit-coteaching", "--T", 20, "--restarts", 1, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "coteaching_fit.json").read_text())
    assert doc["max_residual"] < 0.2 and doc["T"] == 20


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "memosched", "emit-plot", "--T", "2"],
                          capture_output=True, text=True, check=True)
    assert proc.stdout == "t,R\n0,1.0\n1,1.0\n2,1.0\n"
