import json

import numpy as np
import pytest

from mopi.cli import main, parse_overrides, UsageError
from mopi.experiment import (ConfigHashMismatch, UnknownFigureKind, config_hash, cross_validate, derive_seed,
                             emit_plotdata, normalize_config, run_experiment, run_replication, set_path)

SMALL = {"sizes": {"pretrain": 200, "calibration": 200, "test": 300}, "replications": 3,
         "methods": [{"name": "SCP"}, {"name": "MOPI", "solver": {"iterations": 50},
                                       "shape": {"n_anchor": 20}}]}


def test_rows_determinism_and_hash(tmp_path):
    a = run_experiment(SMALL, tmp_path, stem="a")
    b = run_experiment(SMALL, tmp_path, stem="b")
    assert len(a.rows) == 3 * 2 * 2
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.config_hash == config_hash(SMALL) == config_hash(normalize_config(SMALL))
    assert config_hash({**SMALL, "alpha": 0.2}) != a.config_hash
    summary = json.loads((tmp_path / "a.summary.json").read_text())
    assert {c["n"] for c in summary["cells"]} == {3}


def test_replication_is_reproducible_alone():
    full = run_experiment(SMALL)
    cfg = normalize_config(SMALL)
    alone = run_replication(cfg, 2)
    want = [r for r in full.rows if r[1] == 2]
    assert [float(r[4]) for r in alone] == [float(r[7]) for r in want]
    assert derive_seed(0, 4, 1) != derive_seed(0, 4, 2)


def test_set_path_by_method_label():
    cfg = normalize_config(SMALL)
    set_path(cfg, "methods.MOPI.solver.lr", 0.5)
    assert cfg["methods"][1]["solver"]["lr"] == 0.5
    with pytest.raises(KeyError):
        set_path(cfg, "methods.Nope.x", 1)


def test_cv_single_point_and_validation():
    cfg = {**SMALL, "cv": {"method": "MOPI", "folds": 2}}
    res = cross_validate(cfg, {"shape.bandwidth": [2.0]})
    assert res.chosen == {"shape.bandwidth": 2.0} and len(res.scores) == 1
    with pytest.raises(ValueError):
        cross_validate(cfg, {"shape.bandwidth": [2.0]}, folds=1)
    with pytest.raises(ValueError):
        cross_validate(cfg, {})


@pytest.mark.slow
def test_cv_prefers_moderate_bandwidth():
    """A bandwidth near the scale of X beats a nearly constant shape."""
    wins = 0
    for s in range(20):
        cfg = {"base_seed": s, "sizes": {"pretrain": 3000, "calibration": 1500, "test": 10},
               "methods": [{"name": "MOPI", "shape": {"n_anchor": 100}}]}
        res = cross_validate(cfg, {"shape.bandwidth": [2.0, 200.0]})
        wins += res.chosen["shape.bandwidth"] == 2.0
    assert wins >= 18


def test_plotdata(tmp_path):
    cfg = {**SMALL, "replications": 2, "methods": [{"name": "SCP"}],
           "sweep": {"path": "alpha", "values": [0.05, 0.1, 0.2]}}
    res = run_experiment(cfg, tmp_path)
    text = emit_plotdata(tmp_path / "results.csv", "coverage-vs-n")
    lines = text.splitlines()
    assert lines[0] == f"# config_hash={res.config_hash}"
    assert len(lines) == 2 + 3
    with pytest.raises(ConfigHashMismatch):
        emit_plotdata(tmp_path / "results.csv", "coverage-vs-n", expected_hash="0" * 16)
    with pytest.raises(UnknownFigureKind):
        emit_plotdata(tmp_path / "results.csv", "pie")
    g = {"generator": {"kind": "Hetero1x", "groups": "Interval1D"}, "metrics": ["coverage_group"],
         "sizes": {"pretrain": 200, "calibration": 200, "test": 500}, "methods": [{"name": "SCP"}]}
    run_experiment(g, tmp_path, stem="g")
    bars = emit_plotdata(tmp_path / "g.csv", "group-bars").splitlines()
    assert len(bars) == 2 + 5


def test_cli_round_trip(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    base = ["--config", str(cfg)]
    assert main(["gen", *base, "--role", "calibration", "--out", str(tmp_path / "cal.csv")]) == 0
    assert main(["pretrain", *base, "--out", str(tmp_path / "art.json")]) == 0
    assert main(["fit", *base, "--artifacts", str(tmp_path / "art.json"), "--cal", str(tmp_path / "cal.csv"),
                 "--out", str(tmp_path / "rule.json"), "--methods.MOPI.solver.iterations", "20"]) == 0
    assert main(["eval", *base, "--rule", str(tmp_path / "rule.json"), "--metrics", "marginal",
                 "--out", str(tmp_path / "m.json")]) == 0
    assert 0.5 < json.loads((tmp_path / "m.json").read_text())["metrics"]["marginal"] <= 1.0
    assert main(["experiment", *base, "--replications", "1", "--out", str(tmp_path / "exp")]) == 0
    assert main(["plotdata", str(tmp_path / "exp" / "results.csv"), "--kind", "coverage-vs-n",
                 "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["eval", *base, "--rule", str(tmp_path / "missing.json")]) == 2
    assert main(["experiment", "--out", str(tmp_path / "x"), "--alpha"]) == 2
    assert main(["experiment", "--out", str(tmp_path / "x"), "--methods", '[{"name": "SCP"}]',
                 "--sizes.calibration", "3", "--sizes.test", "5", "--sizes.pretrain", "20"]) == 3


def test_parse_overrides():
    assert parse_overrides(["--a.b", "1", "--c=x", "--d", "[1, 2]"]) == [("a.b", 1), ("c", "x"), ("d", [1, 2])]
    with pytest.raises(UsageError):
        parse_overrides(["stray"])
