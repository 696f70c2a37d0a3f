import json
import subprocess
import sys

import numpy as np
import pytest

from pnrtomo.cli import main
from pnrtomo.io import read_traces, trace_file_size

MINIMAL = {"alpha_sq": [0.0, 1.0], "trials_per_probe": 10, "samples_per_trace": 64, "seed": 1}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def small_traces(tmp_path_factory):
    d = tmp_path_factory.mktemp("traces")
    cfg = {"alpha_sq": list(np.linspace(0, 5, 12)), "trials_per_probe": 600, "samples_per_trace": 32, "seed": 5}
    write_json(d / "sim.json", cfg)
    assert main(["simulate", "--config", str(d / "sim.json"), "--out", str(d / "t.pnr")]) == 0
    return d / "t.pnr"


PIPE_CFG = {"n_max": 8, "grid_points": 512, "max_iterations": 300}


def run_pipeline(tmp_path, traces, out="arch", extra=()):
    cfg = write_json(tmp_path / "pipe.json", PIPE_CFG)
    return main(["pipeline", "--config", str(cfg), "--traces", str(traces), "--out", str(tmp_path / out), *extra])


# -- simulate --


def test_minimal_simulation_size(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    out = tmp_path / "t.pnr"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert out.stat().st_size == trace_file_size(20, 64, 2)
    meta = json.loads((tmp_path / "t.pnr.json").read_text())
    assert meta["seed"] == 1
    assert meta["probe_amplitudes"] == [0.0, 1.0]
    assert meta["truth"]["efficiency"] == 0.9
    tf = read_traces(out)
    np.testing.assert_array_equal(tf.alpha_sq, [0.0, 1.0])


def test_simulation_deterministic(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "2"]) == 0
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_int16_simulation(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL | {"sample_format": "int16"})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t").stat().st_size == trace_file_size(20, 64, 2, "int16")


@pytest.mark.parametrize("text", ["{not json", "[1, 2]", json.dumps({"trials_per_probe": 3}),
                                  json.dumps(MINIMAL | {"trials_per_probe": 0}),
                                  json.dumps(MINIMAL | {"colour": "red"}),
                                  json.dumps(MINIMAL | {"alpha_sq": [0.0, 40.0]})])
def test_corrupt_config_leaves_no_output(tmp_path, capsys, text):
    cfg = tmp_path / "c.json"
    cfg.write_text(text)
    out = tmp_path / "t.pnr"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists() and not (tmp_path / "t.pnr.json").exists()
    assert list(tmp_path.iterdir()) == [cfg]
    assert "pnrtomo:" in capsys.readouterr().err


def test_unwritable_path(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    code = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "missing" / "t.pnr")])
    assert code == 3
    assert "cannot write" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    res = subprocess.run([sys.executable, "-m", "pnrtomo.cli", "simulate", "--config", str(cfg),
                          "--out", str(tmp_path / "t")], capture_output=True)
    assert res.returncode == 0


# -- pipeline --

ALL_OUTPUTS = {"basis.npz", "scores.csv", "probes.json", "densities.npz", "model.json", "model_raw.json",
               "em_log.json", "marginalized.npz", "efficiency.json", "efficiency_curve.csv", "confidence.csv",
               "confidence_thermal.csv", "confidence.json", "manifest.json"}


def test_full_pipeline(tmp_path, small_traces):
    assert run_pipeline(tmp_path, small_traces) == 0
    arch = tmp_path / "arch"
    assert {p.name for p in arch.iterdir()} == ALL_OUTPUTS
    man = json.loads((arch / "manifest.json").read_text())
    assert man["status"] == "OK"
    assert set(man["timings_s"]) == {"pca", "density", "em", "marginalize", "efficiency", "confidence"}
    assert set(man["outputs"]) == ALL_OUTPUTS - {"manifest.json"}
    assert str(small_traces) in man["inputs"]
    assert man["config"]["n_max"] == 8 and man["config"]["calib_sigma"] == 0.01
    eff = json.loads((arch / "efficiency.json").read_text())
    assert eff["efficiency"] == pytest.approx(0.9, abs=0.05)
    header = (arch / "confidence.csv").read_text().splitlines()[0]
    assert header.startswith("n,C_n")


def test_rerun_hashes_identical(tmp_path, small_traces):
    assert run_pipeline(tmp_path, small_traces, "a") == 0
    assert run_pipeline(tmp_path, small_traces, "b", ["--threads", "3"]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"]
    assert ma["config_hash"] == mb["config_hash"]


def test_refuses_existing_archive(tmp_path, small_traces, capsys):
    assert run_pipeline(tmp_path, small_traces, extra=["--stages", "pca"]) == 0
    assert run_pipeline(tmp_path, small_traces, extra=["--stages", "pca"]) == 5
    assert "--force" in capsys.readouterr().err
    assert run_pipeline(tmp_path, small_traces, extra=["--stages", "pca", "--force"]) == 0


def test_stage_subset(tmp_path, small_traces):
    assert run_pipeline(tmp_path, small_traces, extra=["--stages", "pca,density"]) == 0
    names = {p.name for p in (tmp_path / "arch").iterdir()}
    assert names == {"basis.npz", "scores.csv", "probes.json", "densities.npz", "manifest.json"}
    # later stages resume from the archive
    assert run_pipeline(tmp_path, small_traces, extra=["--stages", "em,efficiency", "--force"]) == 0
    man = json.loads((tmp_path / "arch" / "manifest.json").read_text())
    assert man["stages_completed"] == ["em", "efficiency"]
    assert any(k.endswith("densities.npz") for k in man["inputs"])


def test_flags_override_config(tmp_path, small_traces):
    assert run_pipeline(tmp_path, small_traces, extra=["--stages", "pca,density", "--grid-points", "300",
                                                       "--prior", "thermal:0.2", "--calib-sigma", "0.02"]) == 0
    man = json.loads((tmp_path / "arch" / "manifest.json").read_text())
    assert man["config"]["grid_points"] == 300
    assert man["config"]["prior"] == "thermal:0.2"
    assert man["config"]["calib_sigma"] == 0.02


def test_stage_failure_marks_manifest(tmp_path, capsys):
    cfg = write_json(tmp_path / "sim.json", {"alpha_sq": [1.0], "trials_per_probe": 200, "samples_per_trace": 16})
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "one.pnr")]) == 0
    assert run_pipeline(tmp_path, tmp_path / "one.pnr") == 4
    assert "'em'" in capsys.readouterr().err
    man = json.loads((tmp_path / "arch" / "manifest.json").read_text())
    assert man["status"] == "FAILED" and man["failed_stage"] == "em"
    assert (tmp_path / "arch" / "densities.npz").exists()


@pytest.mark.parametrize("extra,code", [
    (["--stages", "pca,fit"], 2),
    (["--prior", "gaussian"], 2),
    (["--grid-points", "4"], 2),
    (["--threads", "0"], 2),
])
def test_pipeline_config_errors(tmp_path, small_traces, extra, code):
    assert run_pipeline(tmp_path, small_traces, extra=extra) == code
    assert not (tmp_path / "arch").exists()


def test_pipeline_io_errors(tmp_path, small_traces):
    assert run_pipeline(tmp_path, tmp_path / "nope.pnr") == 3
    bad = tmp_path / "bad.pnr"
    bad.write_bytes(b"garbage")
    assert run_pipeline(tmp_path, bad) == 3
    assert main(["pipeline", "--config", str(tmp_path / "none.json"), "--traces", str(small_traces),
                 "--out", str(tmp_path / "x")]) == 3
    (tmp_path / "broken.json").write_text("{")
    assert main(["pipeline", "--config", str(tmp_path / "broken.json"), "--traces", str(small_traces),
                 "--out", str(tmp_path / "x")]) == 2
