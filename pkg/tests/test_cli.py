import json
import subprocess
import sys

import numpy as np
import pytest

from patconv import PruneConfig, compile_model, load_model, read_plans, read_tensor
from patconv.cli import main
from patconv.executor import reference_network


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PCONV_THREADS", raising=False)
    assert main(["derive-patterns", "--k", "4", "--out", "p4.json"]) == 0
    assert main(["make-model", "--seed", "1", "--out", "m.pconv"]) == 0
    return tmp_path


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.mark.parametrize("k", [4, 8, 12])
def test_derive_patterns(tmp_path, k):
    out = tmp_path / "p.json"
    assert main(["derive-patterns", "--k", str(k), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["codes"]) == k
    assert doc["codes"][:4] == [184, 178, 154, 58]


def test_derive_patterns_rejects_k3(tmp_path, capsys):
    assert main(["derive-patterns", "--k", "3", "--out", str(tmp_path / "p.json")]) == 1
    err = error_of(capsys)
    assert err["error"] == "ValidationError" and err["command"] == "derive-patterns"


def test_prune_pattern_only_reports_225(workdir, capsys):
    assert main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--connectivity", "1.0",
                 "--out", "m2.pconv"]) == 0
    out = capsys.readouterr().out
    assert "pattern 2.25x, connectivity 1x, combined 2.25x" in out


def test_full_pipeline_matches_reference(workdir, monkeypatch):
    assert main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--connectivity", "0.5",
                 "--balanced", "--method", "magnitude", "--seed", "3", "--out", "m2.pconv"]) == 0
    monkeypatch.setenv("PCONV_THREADS", "3")
    assert main(["compile", "--model", "m2.pconv", "--out", "m2.pplan"]) == 0
    assert read_plans("m2.pplan")[0].threads == 3
    assert main(["make-input", "--shape", "2,1,16,16", "--seed", "5", "--out", "x.bin"]) == 0
    assert main(["run", "--plan", "m2.pplan", "--model", "m2.pconv", "--input", "x.bin",
                 "--out", "y.bin"]) == 0
    y = read_tensor("y.bin")
    want = reference_network(load_model("m2.pconv"), read_tensor("x.bin"))
    assert y.shape == (2, 10)
    assert np.linalg.norm(y - want) / np.linalg.norm(want) < 1e-4


def test_threads_flag_wins(workdir, monkeypatch):
    main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--out", "m2.pconv"])
    monkeypatch.setenv("PCONV_THREADS", "3")
    assert main(["compile", "--model", "m2.pconv", "--threads", "2", "--out", "a.pplan"]) == 0
    assert read_plans("a.pplan")[0].threads == 2


def test_emit_plan(workdir, capsys):
    main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--out", "m2.pconv"])
    capsys.readouterr()
    assert main(["compile", "--model", "m2.pconv", "--emit-plan", "--out", "a.pplan"]) == 0
    out = capsys.readouterr().out
    assert "access templates" in out and "layer conv1" in out


def test_mismatched_plan_fingerprint(workdir, capsys):
    main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--connectivity", "0.5",
          "--out", "a.pconv"])
    main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--connectivity", "0.5",
          "--unbalanced", "--out", "b.pconv"])
    main(["compile", "--model", "a.pconv", "--out", "a.pplan"])
    main(["make-input", "--shape", "1,1,16,16", "--out", "x.bin"])
    capsys.readouterr()
    code = main(["run", "--plan", "a.pplan", "--model", "b.pconv", "--input", "x.bin",
                 "--out", "y.bin"])
    assert code != 0
    err = error_of(capsys)
    assert err["error"] == "PlanMismatchError" and err["command"] == "run"
    assert "fingerprint" in err["message"]


def test_prune_is_deterministic(workdir):
    for name in ("a.pconv", "b.pconv"):
        assert main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--connectivity",
                     "0.5", "--seed", "7", "--out", name]) == 0
    assert (workdir / "a.pconv").read_bytes() == (workdir / "b.pconv").read_bytes()


def test_prune_config_file(workdir):
    PruneConfig(keep_ratio=0.25, layer_keep_ratios={"conv1": 1.0}).to_file("cfg.json")
    assert main(["prune", "--model", "m.pconv", "--patterns", "p4.json", "--config", "cfg.json",
                 "--out", "m2.pconv"]) == 0
    m = load_model("m2.pconv")
    assert m["conv2"].layer.retained.sum(axis=1).tolist() == [4] * 32
    assert m["conv1"].layer.retained.sum(axis=1).tolist() == [1] * 16
    assert all(p is not None for p in compile_model(m))


def test_missing_file_is_structured_error(tmp_path, capsys):
    assert main(["compile", "--model", str(tmp_path / "nope.pconv"), "--out", "x"]) == 1
    assert error_of(capsys)["error"] == "FileNotFoundError"


def test_corrupt_model_is_format_error(workdir, capsys):
    data = (workdir / "m.pconv").read_bytes()
    (workdir / "bad.pconv").write_bytes(data[:-10])
    assert main(["compile", "--model", "bad.pconv", "--out", "x.pplan"]) == 1
    assert error_of(capsys)["error"] == "FormatError"


@pytest.mark.parametrize("args", [["--suite", "alexnet"], ["--suite", "toy", "--reps", "0"]])
def test_bench_errors(args, capsys):
    assert main(["bench", *args]) == 1
    assert error_of(capsys)["command"] == "bench"


def test_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--suite", "toy", "--threads", "1", "--reps", "10", "--csv", str(out)]) == 0
    header = out.read_text().splitlines()[0]
    assert header == ("suite,layer,H,W,C,F,k,keep_ratio,variant,threads,reps,median_ms,min_ms,"
                      "gflops")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "patconv", "derive-patterns", "--k", "3",
                           "--out", str(tmp_path / "p.json")], capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["error"] == "ValidationError"
