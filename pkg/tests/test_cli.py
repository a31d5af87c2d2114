import json
import subprocess
import sys

import pytest

from nestfit.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("build-circuit", "--kind", "repetition", "--p", 0.005, "--out", d / "rep.json") == 0
    assert run("build-circuit", "--kind", "parity-square", "--p", 0.005,
               "--out", d / "sq.json") == 0
    return d


def test_full_chain(workdir):
    d = workdir
    assert run("build-nest", "--circuit", d / "rep.json", "--structure", "--out",
               d / "rep.nest.json", "--plot-data", d / "plot.json") == 0
    assert run("simulate", "--circuit", d / "rep.json", "--rounds", 30_000, "--seed", 3,
               "--shards", 2, "--out", d / "rep.mrec") == 0
    shards = sorted(d.glob("rep.*.mrec"))
    assert len(shards) == 2
    args = ["extract", "--nest", d / "rep.nest.json", "--circuit", d / "rep.json",
            "--out", d / "rep.est.json"]
    for s in shards:
        args += ["--record", s]
    assert run(*args) == 0
    assert json.loads((d / "rep.est.json").read_text())["records"] == 2
    assert run("invert", "--est", d / "rep.est.json", "--nest", d / "rep.nest.json",
               "--circuit", d / "rep.json", "--out", d / "fit.json",
               "--report", d / "fitreport.json") == 0
    fit = json.loads((d / "fit.json").read_text())
    assert fit["schema"] == "errormodel.v1" and fit["by_circuit"]["repetition-d3"]["by_gate"]
    assert run("invert", "--est", d / "rep.est.json", "--nest", d / "rep.nest.json",
               "--param", "per-kind", "--out", d / "fitk.json") == 0
    assert run("validate", "--circuit", d / "rep.json", "--models", d / "fitk.json",
               "--truth", d / "fitk.json", "--trials", 2000, "--seed", 1,
               "--out", d / "verdict.json") == 0
    assert json.loads((d / "verdict.json").read_text())["schema"] == "verdict.v1"


def test_invert_needs_circuit_for_gate_level(workdir):
    d = workdir
    run("build-nest", "--circuit", d / "rep.json", "--structure", "--out", d / "n.json")
    run("simulate", "--circuit", d / "rep.json", "--rounds", 5000, "--seed", 1,
        "--out", d / "one.mrec")
    run("extract", "--record", d / "one.mrec", "--nest", d / "n.json", "--out", d / "e.json")
    assert run("invert", "--est", d / "e.json", "--nest", d / "n.json",
               "--out", d / "f.json") == 2


def test_oracle(workdir, capsys):
    assert run("oracle", "--circuit", workdir / "rep.json", "--gate", "CZ1", "--pauli", "XZ") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["events"] == [{"measure_qubit": 1, "round": 0}]
    assert run("oracle", "--circuit", workdir / "rep.json", "--table", "--pure",
               "--out", workdir / "table.json") == 0
    assert len(json.loads((workdir / "table.json").read_text())["rows"]) == 34
    assert run("oracle", "--circuit", workdir / "rep.json", "--gate", "CZ1",
               "--pauli", "Q") == 2


def test_correlate(workdir):
    d = workdir
    assert run("simulate", "--circuit", d / "sq.json", "--rounds", 20_000, "--seed", 2,
               "--out", d / "sq.mrec") == 0
    assert run("correlate", "--record", d / "sq.mrec", "--circuit", d / "sq.json",
               "--max-lag", 2, "--out", d / "corr.json") == 0
    doc = json.loads((d / "corr.json").read_text())
    assert doc["schema"] == "correlation.v1" and "autocorrelation" in doc
    assert run("correlate", "--record", d / "sq.mrec", "--circuit", d / "rep.json") == 2


def test_seed_is_mandatory(workdir):
    assert run("simulate", "--circuit", workdir / "rep.json", "--rounds", 10,
               "--out", workdir / "x.mrec") == 2
    assert run("roundtrip", "--out-dir", workdir / "rt") == 2


def test_missing_inputs_exit_2(workdir):
    assert run("build-nest", "--circuit", workdir / "absent.json", "--out", workdir / "n") == 2
    assert run("simulate", "--circuit", workdir / "rep.json", "--seed", 1) == 2
    assert run("build-circuit", "--kind", "repetition", "--distance", 1,
               "--out", workdir / "bad.json") == 2


def test_config_file_defaults(workdir):
    cfg = workdir / "sim.json"
    cfg.write_text(json.dumps({"circuit": str(workdir / "rep.json"), "rounds": 100, "seed": 5,
                               "out": str(workdir / "cfg.mrec")}))
    assert run("simulate", "--config", cfg) == 0
    assert (workdir / "cfg.mrec").exists()
    cfg.write_text(json.dumps({"roundz": 1}))
    assert run("simulate", "--config", cfg) == 2


def test_roundtrip_small(tmp_path, capsys):
    code = run("roundtrip", "--out-dir", tmp_path, "--seed", 11, "--rounds", 60_000,
               "--trials", 5000)
    out = capsys.readouterr().out
    assert code in (0, 4)
    assert ("FAIL" in out) == (code == 4)
    assert (tmp_path / "report.json").exists()
    assert run("roundtrip", "--out-dir", tmp_path / "z", "--seed", 1, "--rounds", 0) == 2


def test_corrupt_record_exit_2(workdir, tmp_path):
    run("simulate", "--circuit", workdir / "rep.json", "--rounds", 5000, "--seed", 1,
        "--out", tmp_path / "r.mrec")
    blob = (tmp_path / "r.mrec").read_bytes()
    (tmp_path / "r.mrec").write_bytes(blob[:-100])
    run("build-nest", "--circuit", workdir / "rep.json", "--out", tmp_path / "n.json")
    assert run("extract", "--record", tmp_path / "r.mrec", "--nest", tmp_path / "n.json",
               "--out", tmp_path / "e.json") == 2


def test_compute_failure_exit_3(workdir, tmp_path, monkeypatch):
    import nestfit.cli

    def boom(*a, **k):
        raise RuntimeError("numerical trouble")

    run("simulate", "--circuit", workdir / "rep.json", "--rounds", 500, "--seed", 1,
        "--out", tmp_path / "r.mrec")
    run("build-nest", "--circuit", workdir / "rep.json", "--out", tmp_path / "n.json")
    monkeypatch.setattr(nestfit.cli, "estimate_nest", boom)
    assert run("extract", "--record", tmp_path / "r.mrec", "--nest", tmp_path / "n.json",
               "--out", tmp_path / "e.json") == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "nestfit", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("build-circuit", "build-nest", "simulate", "oracle", "extract", "invert",
                "validate", "correlate", "roundtrip"):
        assert cmd in res.stdout
