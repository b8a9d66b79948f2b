import csv
import json

import pytest

from parkflow.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from parkflow.data import SynthConfig, expected_row_count
from parkflow.model import ModelConfig, ModelParams, load_checkpoint

SMALL = {
    "seed": 3,
    "model": {"dim_h_short": 2, "M": 1},
    "train": {"max_iter": 1, "batch_size": 16},
    "pricing": {"max_cases": 3},
    "data": {"path": "records.csv", "synth": {"N": 2, "days": 84}},
}


def write_config(d, doc=SMALL, **overrides):
    doc = json.loads(json.dumps(doc))
    for dotted, v in overrides.items():
        section, key = dotted.split("__")
        doc[section][key] = v
    path = d / ("config.json" if not overrides else "config_" + "_".join(overrides) + ".json")
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d)
    assert run("synth", "--config", cfg, "--out", d) == EXIT_OK
    assert run("train", "--config", cfg, "--out", d) == EXIT_OK
    return d, cfg


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_row_count_and_determinism(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == EXIT_OK
    printed = capsys.readouterr().out
    n = expected_row_count(SynthConfig(N=2, days=84, seed=3))
    assert f"wrote {n} rows = 2 blocks x 8 metered hours x" in printed
    assert len(rows(tmp_path / "a" / "records.csv")) == n
    assert run("synth", "--config", cfg, "--out", tmp_path / "b") == EXIT_OK
    for name in ("records.csv", "ground_truth.csv", "profiles.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_config_key_writes_nothing(tmp_path):
    cfg = write_config(tmp_path, model__hidden=4)
    out = tmp_path / "out"
    assert run("synth", "--config", cfg, "--out", out) == EXIT_USAGE
    assert not out.exists()
    (tmp_path / "extra.json").write_text(json.dumps(dict(SMALL, extra=1)))
    assert run("synth", "--config", tmp_path / "extra.json", "--out", out) == EXIT_USAGE
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert run("synth", "--out", tmp_path) == EXIT_USAGE
    assert run("bogus") == EXIT_USAGE
    (tmp_path / "bad.json").write_text("{not json")
    assert run("synth", "--config", tmp_path / "bad.json", "--out", tmp_path) == EXIT_USAGE


def test_train_zero_epochs_writes_initialization(tmp_path, trained):
    d, _ = trained
    cfg = write_config(d, train__max_iter=0)
    out = tmp_path / "t0"
    assert run("train", "--config", cfg, "--out", out) == EXIT_OK
    params, _ = load_checkpoint(out / "model.ckpt")
    init = ModelParams.init(ModelConfig(N=2, K=1, dim_h_short=2, M=1), 3)
    assert params.flat.tobytes() == init.flat.tobytes()


def test_train_rerun_is_byte_identical(tmp_path, trained):
    d, cfg = trained
    assert run("train", "--config", cfg, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "model.ckpt").read_bytes() == (d / "model.ckpt").read_bytes()
    assert (tmp_path / "train_report.csv").read_bytes() == (d / "train_report.csv").read_bytes()


def test_train_numeric_failure_exits_3(tmp_path, trained):
    d, _ = trained
    # the weight-decay gradient overflows on the first step
    cfg = write_config(d, train__weight_decay=1e308)
    assert run("train", "--config", cfg, "--out", tmp_path) == EXIT_NUMERIC
    assert not (tmp_path / "model.ckpt").exists()
    assert len(rows(tmp_path / "train_report.csv")) == 1


def test_predict_and_evaluate(tmp_path, trained):
    d, cfg = trained
    ck = d / "model.ckpt"
    assert run("predict", "--config", cfg, "--checkpoint", ck, "--out", tmp_path) == EXIT_OK
    assert run("evaluate", "--config", cfg, "--checkpoint", ck, "--out", tmp_path) == EXIT_OK
    assert [r["predictor"] for r in rows(tmp_path / "metrics.csv")] == ["model", "persistence", "historical_mean"]
    assert len(rows(tmp_path / "predictions.csv")) > 0


def test_optimize_all_and_report(tmp_path, trained):
    d, cfg = trained
    ck = d / "model.ckpt"
    assert run("optimize", "--config", cfg, "--checkpoint", ck, "--out", tmp_path) == EXIT_OK
    res = rows(tmp_path / "results.csv")
    by_method = {}
    for r in res:
        by_method.setdefault(r["method"], []).append(r)
    assert set(by_method) == {"oneshot", "greedy", "gradient"}
    ids = {m: [r["case_id"] for r in v] for m, v in by_method.items()}
    assert ids["oneshot"] == ids["greedy"] == ids["gradient"]
    assert len(set(ids["oneshot"])) == 3
    assert {r["queries"] for r in by_method["oneshot"]} == {"3"}
    for r in rows(tmp_path / "failure.csv"):
        ratios = [float(r[k]) for k in ("fail_tau_0.70", "fail_tau_0.75", "fail_tau_0.80")]
        assert ratios == sorted(ratios, reverse=True)

    assert run("report", "--out", tmp_path / "rep", "--results", tmp_path / "results.csv") == EXIT_OK
    summary = (tmp_path / "rep" / "summary.md").read_text()
    assert all(m in summary for m in ("oneshot", "greedy", "gradient"))
    svgs = sorted(p.name for p in (tmp_path / "rep").glob("*.svg"))
    assert "before_after.svg" in svgs and "price_occupancy_oneshot.svg" in svgs
    assert run("report", "--out", tmp_path / "rep2", "--results", tmp_path / "results.csv") == EXIT_OK
    for name in svgs + ["summary.md"]:
        assert (tmp_path / "rep" / name).read_bytes() == (tmp_path / "rep2" / name).read_bytes()


def test_optimize_unknown_method(tmp_path, trained):
    d, cfg = trained
    assert run("optimize", "--config", cfg, "--checkpoint", d / "model.ckpt", "--method", "anneal", "--out", tmp_path) == EXIT_USAGE
    assert not (tmp_path / "results.csv").exists()


def test_report_single_row_and_empty(tmp_path):
    header = "case_id,block_id,method,p_star,y_pred,clamped,inelastic,queries,p_obs,y_obs,wall_time_s\n"
    one = tmp_path / "one.csv"
    one.write_text(header + "0,B0,oneshot,1.5,0.7,0,0,3,1.0,0.8,0.001\n")
    assert run("report", "--out", tmp_path / "r1", "--results", one) == EXIT_OK
    assert (tmp_path / "r1" / "price_occupancy_oneshot.svg").read_text().count("<circle") >= 1
    empty = tmp_path / "empty.csv"
    empty.write_text(header)
    assert run("report", "--out", tmp_path / "r2", "--results", empty) == EXIT_USAGE
    assert run("report", "--out", tmp_path / "r3", "--results", tmp_path / "missing.csv") == EXIT_USAGE


def test_thread_env_validation(tmp_path, trained, monkeypatch):
    d, cfg = trained
    monkeypatch.setenv("PARKFLOW_THREADS", "zero")
    assert run("synth", "--config", cfg, "--out", tmp_path) == EXIT_USAGE
    monkeypatch.setenv("PARKFLOW_THREADS", "1")
    assert run("synth", "--config", cfg, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "records.csv").read_bytes() == (d / "records.csv").read_bytes()
