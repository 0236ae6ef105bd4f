import csv
import json
import subprocess
import sys

import pytest

from offdiag import cli
from offdiag.config import ConfigError, parse_config
from offdiag.diagnostics import InvariantViolation

SMALL = {"horizons": {"defect": [1000, 2000], "series": 20000, "levels": 200}}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data), encoding="utf-8")
    return p


def config(operator, **extra):
    d = {"operator": operator, **json.loads(json.dumps(SMALL))}
    d.update(extra)
    return d


@pytest.mark.parametrize("data,path", [
    ({}, "operator"),
    ({"operator": {"kind": "matrix"}}, "operator.kind"),
    ({"operator": {"kind": "ncpoly"}}, "operator.expr"),
    ({"operator": {"kind": "jacobi", "k": 2}}, "operator.k"),
    ({"operator": {"kind": "jacobi", "b": "n", "expr": "p"}}, "operator"),
    ({"operator": {"kind": "family", "exprs": []}}, "operator.exprs"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "horizons": {"series": 0}}, "horizons.series"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "horizons": {"defect": [100]}}, "horizons.defect"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "tolerances": {"strong_mass": 0.5}},
     "tolerances.strong_mass"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "tolerances": {"strong_mass": 1e-20}},
     "tolerances.strong_mass"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "tolerances": {"bogus": 1e-5}}, "tolerances.bogus"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "ladder": {"cutoffs": [3, 2]}}, "ladder.cutoffs"),
    ({"operator": {"kind": "ncpoly", "expr": "p"}, "extra": 1}, "$"),
])
def test_config_errors_carry_path(data, path):
    with pytest.raises(ConfigError) as err:
        parse_config(data)
    assert err.value.path == path


@pytest.mark.parametrize("op,path", [({"kind": "ncpoly", "expr": "p*q"}, "operator.expr"),
                                     ({"kind": "ncpoly", "expr": "p +"}, "operator.expr"),
                                     ({"kind": "jacobi", "b": "1/(n-2)"}, "operator.b")])
def test_build_errors_carry_path(op, path):
    with pytest.raises(ConfigError) as err:
        parse_config({"operator": op}).build_operator()
    assert err.value.path == path


def test_probe_kinds():
    cfg = parse_config({"operator": {"kind": "ncpoly", "expr": "q"},
                        "probes": ["geometric", {"name": "e3", "entries": [[[3], 1.0]]},
                                   {"name": "power", "rule": "n^-2"}]})
    probes = cfg.build_probes(50)
    assert [p.label for p in probes][1:] == ["e3", "power"]
    assert probes[2].norm() == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        parse_config({"operator": {"kind": "ncpoly", "expr": "q"}, "probes": [3]}).build_probes(5)


def test_parse_grid():
    assert cli.parse_grid("alpha=0.5:3:0.25")[1][-1] == 3.0
    assert len(cli.parse_grid("alpha=0.5:3:0.25")[1]) == 11
    for bad in ("alpha", "alpha=1:0:1", "n=0:1:0.5", "a=0:1:0"):
        with pytest.raises(ConfigError):
            cli.parse_grid(bad)


def test_jsonable_handles_non_finite():
    out = json.loads(cli.dump_json({"a": float("inf"), "b": float("nan"), "c": 1j}))
    assert out == {"a": "inf", "b": "nan", "c": [0.0, 1.0]}


def test_analyze_jacobi_writes_files(tmp_path):
    cfg = write(tmp_path, config({"kind": "jacobi", "a": "0", "b": "sqrt(n)"}))
    out = tmp_path / "out"
    assert cli.main(["analyze", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["verdict"] == "ESA"
    assert report["classification"]["provenance"] == "carleman"
    assert "classify" in json.loads((out / "timing.json").read_text())
    rows = list(csv.reader((out / "sequences_0.csv").open()))
    assert rows[0] == ["level", "b", "c", "d", "xi", "slack"] and len(rows) > 10


def test_analyze_is_deterministic_and_echo_reruns(tmp_path):
    cfg = write(tmp_path, config({"kind": "ncpoly", "expr": "p*q*p"}))
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["analyze", "--config", str(cfg), "--out", str(out), "--seed", "7"]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    report = json.loads((a / "report.json").read_text())
    assert report["verdict"] == "NotESA" and report["seed"] == 7
    echo = report["config"]
    rerun = {"operator": {k: v for k, v in echo["operator"].items() if v not in (None, [], False)},
             "horizons": {k: v for k, v in echo["horizons"].items() if v is not None},
             "tolerances": echo["tolerances"], "probes": echo["probes"], "params": echo["params"],
             "ladder": {"step": echo["ladder_step"]}}
    rerun["operator"].pop("a", None), rerun["operator"].pop("b", None)
    c = tmp_path / "c"
    assert cli.main(["analyze", "--config", str(write(tmp_path, rerun, "echo.json")),
                     "--out", str(c), "--seed", "7"]) == 0
    assert json.loads((c / "report.json").read_text())["verdict"] == "NotESA"


def test_family_analysis(tmp_path):
    cfg = write(tmp_path, {"operator": {"kind": "family", "k": 2, "exprs": ["p1", "q2"]}})
    assert cli.main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["verdict"] == "JointESA"


def test_exit_code_for_config_error(tmp_path, capsys):
    cfg = write(tmp_path, {"operator": {"kind": "ncpoly", "expr": "p*q"}})
    assert cli.main(["analyze", "--config", str(cfg)]) == 1
    assert "operator.expr" in capsys.readouterr().err
    assert cli.main(["analyze", "--config", str(tmp_path / "missing.json")]) == 1
    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    assert cli.main(["analyze", "--config", str(tmp_path / "broken.json")]) == 1


def test_exit_code_for_invariant_violation(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise InvariantViolation("d_3 exceeds its bound")
    monkeypatch.setattr(cli, "classify", boom)
    cfg = write(tmp_path, config({"kind": "ncpoly", "expr": "q"}))
    assert cli.main(["analyze", "--config", str(cfg)]) == 2


def test_sweep_order_and_failures(tmp_path):
    cfg = write(tmp_path, config({"kind": "jacobi", "a": "0", "b": "n^alpha - 2"}))
    out = tmp_path / "sweep"
    # alpha = 1 gives b_1 = -1 and b_2 = 0: fine; alpha = 0 makes every b_n = -1
    assert cli.main(["sweep", "--config", str(cfg), "--grid", "alpha=0:1:0.5", "--out", str(out),
                     "--workers", "2"]) == 0
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert [float(r["value"]) for r in rows] == [0.0, 0.5, 1.0]
    assert all(r["verdict"] in ("ESA", "Error", "Inconclusive") for r in rows)


def test_sweep_records_failing_point(tmp_path):
    cfg = write(tmp_path, config({"kind": "jacobi", "a": "0", "b": "1/(n-alpha)"}))
    rows = cli.run_sweep(json.loads(cfg.read_text()), "alpha=1:2:1", None)
    assert [r["verdict"] for r in rows] == ["Error", "Error"]
    assert "n = 1" in rows[0]["error"] and "n = 2" in rows[1]["error"]


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, config({"kind": "jacobi", "b": "1"}))
    env = {"OFFDIAG_LOG": "info", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "offdiag", "analyze", "--config", str(cfg)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["verdict"] == "ESA"
    assert "INFO" in proc.stderr
