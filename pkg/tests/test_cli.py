import json
from pathlib import Path

import pytest

from eodbench.cli import ConfigValidationError, load_config, main

from oracles import ideal_eod_time

SMALL_DATA = ["--set", "dataset.count=6", "--set", "sampler.horizon_max=2000", "--set", "sampler.n_transitions_max=2"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


def test_generate_twice_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        code, res, _ = run(capsys, "generate", "--out", str(tmp_path / d), "--seed", "3", *SMALL_DATA)
        assert code == 0 and res["records"] == 6
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "dataset").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["dataset"]["count"] == 6


def test_simulate_ideal_matches_root(tmp_path, capsys):
    code, res, _ = run(capsys, "simulate", "--out", str(tmp_path), "--q-max", "7000", "--r0", "0.08",
                       "--const-current", "1.5", "--set", "sim.d_diff=1.0", "--set", "sim.r_lag=0.0")
    assert code == 0 and res["eod_reached"]
    assert abs(res["eod_time"] - ideal_eod_time(1.5, 7000, 0.08)) <= 2 * 2.0
    assert (tmp_path / "curve.tsv").read_text().startswith("t_s\tvoltage_V")
    code, res, _ = run(capsys, "plot", str(tmp_path / "curve.tsv"), str(tmp_path / "curve.svg"))
    assert code == 0 and (tmp_path / "curve.svg").read_text().lstrip().startswith("<?xml")


def test_eval_oracle_zero_rte(tmp_path, capsys):
    code, _, _ = run(capsys, "generate", "--out", str(tmp_path / "g"), *SMALL_DATA)
    assert code == 0
    code, res, _ = run(capsys, "eval", "--out", str(tmp_path / "e"), "--data", str(tmp_path / "g" / "dataset"),
                       "--checkpoint", "oracle", "--set", "rte.context_len=10")
    assert code == 0 and res["median_rte"] == 0.0 and res["median_rmse"] < 0.05
    code, _, _ = run(capsys, "plot", str(tmp_path / "e" / "report.json"), str(tmp_path / "e" / "rte.svg"))
    assert code == 0


def test_unknown_key_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--out", str(tmp_path), "--set", "dataset.cuont=5")
    assert code == 2
    assert err.startswith("error\tconfig\t") and "dataset.cuont" in err and err.count("\n") == 1
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"train": {"lr": 1e-3, "bogus": 1}}))
    with pytest.raises(ConfigValidationError, match="train.bogus"):
        load_config(str(bad))


def test_missing_input_is_io_error(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--out", str(tmp_path), "--data", str(tmp_path / "nope"),
                       "--checkpoint", "oracle")
    assert code == 3 and err.startswith("error\tio\t")


def test_missing_required_setting(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--out", str(tmp_path), "--checkpoint", "oracle")
    assert code == 2 and "data" in err


def test_config_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 4, "train": {"lr": 0.01}}))
    cfg, explicit = load_config(str(f), ["train.lr=0.002"], {"seed": 9, "jobs": None})
    assert cfg.seed == 9 and cfg.train.lr == 0.002
    assert {"seed", "train.lr"} <= explicit and "jobs" not in explicit


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EODBENCH_OUTPUT_ROOT", str(tmp_path / "root"))
    code, res, _ = run(capsys, "generate", *SMALL_DATA)
    assert code == 0 and Path(res["path"]).parent == tmp_path / "root" / "generate"
