import csv
import json
import logging

import numpy as np
import pytest

from ccpxva.cli import ConfigError, load_config, main, parse_config, run_scenario

SMALL = {
    "credit_scenario": "H/M",
    "trade": {"direction": "receiver", "maturity": 5},
    "mc": {"paths": 600, "dt": 0.25, "seed": 7, "batches": 4},
    "base": {"mode": "uncollateralized"},
    "tables": [
        {"name": "wwr", "rows": {"rho": [-0.3, 0.3]}, "columns": {"beta_plus": [0.0, 1.0]}, "output": "total"},
        {"name": "ba", "rows": {"rho": [0.0]}, "columns": {"beta_plus": [0.0, 1.0]}, "output": "bid_ask",
         "base": {"beta_minus": 0.0}},
        {"name": "ccp", "rows": {"q": [0.5, 0.99]}, "output": "components",
         "base": {"mode": "ccp", "delta_days": 5, "perspective": "counterparty"}},
    ],
    "exposure_profile": {"q": 0.99, "delta_days": [1, 10]},
}


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def _run(tmp_path, doc, out="out", *extra):
    cfg = _write(tmp_path, doc)
    return main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / out), *extra])


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    assert _run(tmp, SMALL) == 0
    return tmp / "out"


def test_run_writes_tables_and_summary(small_run):
    for name in ("wwr", "wwr_se", "ba", "ccp", "exposure_profile", "im_profile"):
        assert (small_run / f"{name}.csv").exists()
    wwr = _read(small_run / "wwr.csv")
    assert wwr[0] == ["rho", "beta_plus=0", "beta_plus=1"]
    assert [r[0] for r in wwr[1:]] == ["-0.3", "0.3"]
    ccp = _read(small_run / "ccp.csv")
    assert ccp[0] == ["q", "mtm", "cva", "dva", "mva", "fva", "total"]
    for row in wwr[1:] + ccp[1:]:
        for cell in row[1:]:
            assert len(cell.split(".")[1]) == 4
    assert float(ccp[1][4]) == 0.0
    summary = json.loads((small_run / "summary.json").read_text())
    assert summary["seed"] == 7 and summary["paths"] == 600
    assert list(summary) == sorted(summary)


def test_exposure_and_im_profiles(small_run):
    prof = _read(small_run / "exposure_profile.csv")
    assert prof[0] == ["t", "epe", "ene"]
    assert float(prof[1][1]) == 0.0 and float(prof[1][2]) == 0.0
    assert float(prof[-1][1]) == 0.0 and float(prof[-1][2]) == 0.0
    im = _read(small_run / "im_profile.csv")[1:]
    by = {}
    for t, d, mean, *_ in im:
        by.setdefault(t, {})[d] = float(mean)
    assert all(v["10"] >= v["1"] for v in by.values())
    assert any(v["10"] > v["1"] for v in by.values())


def test_runs_are_deterministic_across_threads(tmp_path, small_run):
    assert _run(tmp_path, SMALL, "again", "--threads", "2") == 0
    for name in ("wwr.csv", "ba.csv", "ccp.csv", "exposure_profile.csv", "im_profile.csv", "summary.json"):
        assert (tmp_path / "again" / name).read_bytes() == (small_run / name).read_bytes()


def test_seed_override_changes_results(tmp_path, small_run):
    doc = dict(SMALL, tables=SMALL["tables"][:1], exposure_profile=None)
    doc["mc"] = {k: v for k, v in SMALL["mc"].items() if k != "seed"}
    assert _run(tmp_path, doc) == 2
    assert _run(tmp_path, doc, "s8", "--seed", "8") == 0
    assert _read(tmp_path / "s8" / "wwr.csv") != _read(small_run / "wwr.csv")


@pytest.mark.parametrize("patch", [
    {"tables": [{"name": "x", "rows": {"colour": [1]}, "columns": {"rho": [0]}}]},
    {"base": {"gamma": 1}},
    {"base": {"mode": "tri-party"}},
    {"tables": [{"name": "x", "rows": {"rho": [0.9]}, "columns": {"beta_plus": [0]}}]},
    {"mc": {"paths": 600, "seed": -3}},
    {"mc": {"paths": 1, "seed": 3}},
    {"trade": {"direction": "receiver", "maturity": 2.3}},
    {"credit_scenario": "L/L"},
])
def test_invalid_configs_exit_with_code_two(tmp_path, patch):
    doc = dict(SMALL, exposure_profile=None, **patch)
    assert _run(tmp_path, doc) == 2


def test_bad_files_exit_with_code_two(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["run", "--config", str(p)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--config", str(_write(tmp_path, SMALL)), "--threads", "0"]) == 2


def test_unattainable_correlation_names_the_limit(tmp_path):
    doc = dict(SMALL, exposure_profile=None, correlation_method="equal",
               tables=[{"name": "x", "rows": {"rho": [0.4]}, "columns": {"beta_plus": [0]}}])
    cfg = parse_config(doc, tmp_path)
    with pytest.raises(ConfigError, match="max attainable"):
        run_scenario(cfg, tmp_path / "o")


def test_load_config_reports_field(tmp_path):
    with pytest.raises(ConfigError, match="tables\\[0\\].output"):
        load_config(_write(tmp_path, dict(SMALL, tables=[{"name": "x", "rows": {"rho": [0]}, "output": "pdf"}])))


@pytest.mark.slow
def test_calibration_failure_exit_code_and_run_fallback(tmp_path, caplog):
    doc = dict(SMALL, max_rmse=0.5)
    assert main(["calibrate", "--config", str(_write(tmp_path, doc)), "--out-dir", str(tmp_path / "cal")]) == 3
    doc = dict(SMALL, g2_params="calibrate", max_rmse=0.5, exposure_profile=None, tables=SMALL["tables"][:1])
    with caplog.at_level(logging.WARNING, logger="ccpxva"):
        assert _run(tmp_path, doc, "fallback") == 0
    assert any("bundled parameters" in r.message for r in caplog.records)


def test_calibrate_writes_parameter_files(tmp_path, monkeypatch):
    from ccpxva import cli
    from ccpxva.models.g2 import CalibrationResult

    def fake(surface, curve):
        p = cli.default_g2()
        return CalibrationResult(p, 1.5, True, "ok", np.zeros(1), np.zeros(1))

    monkeypatch.setattr(cli, "calibrate_g2", fake)
    with pytest.warns(RuntimeWarning, match="shift is negative"):
        code = main(["calibrate", "--config", str(_write(tmp_path, SMALL)), "--out-dir", str(tmp_path / "c")])
    assert code == 0
    g2 = json.loads((tmp_path / "c" / "g2_params.json").read_text())
    assert "a1" in json.dumps(g2)
    cir = json.loads((tmp_path / "c" / "cir_params.json").read_text())
    assert "mid" in json.dumps(cir) and "high" in json.dumps(cir)
