import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from octquant import __version__
from octquant.cli import run
from octquant.io import read_octb, write_octb
from octquant.phantom import perturb_mask

import e2e
from conftest import small_spec


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    spec = d / "spec.json"
    spec.write_text(json.dumps(small_spec().to_json()))
    assert run(["phantom", "--spec", str(spec), "--out-volume", str(d / "v.octb"),
                "--out-mask", str(d / "m.octb"), "--out-truth", str(d / "truth.json")]) == 0
    return d


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_evaluate_self_comparison(files, tmp_path):
    out = tmp_path / "s.csv"
    assert run(["evaluate", "--gt", str(files / "m.octb"), "--pred", str(files / "m.octb"), "--out", str(out)]) == 0
    rows = _csv(out)
    assert len(rows) == 12
    present = [r for r in rows if r["gt_present"] == "true"]
    assert present and all(float(r["dice"]) == 1.0 and float(r["nsd"]) == 1.0 for r in present)


def test_missing_input_exits_1_naming_path(tmp_path, capsys):
    missing = tmp_path / "nope.octb"
    assert run(["evaluate", "--gt", str(missing), "--pred", str(missing), "--out", str(tmp_path / "s.csv")]) == 1
    err = _err(capsys)
    assert err["exit_code"] == 1 and str(missing) in err["message"]
    assert not (tmp_path / "s.csv").exists()


def test_bad_arguments_exit_1(capsys):
    assert run(["evaluate", "--gt"]) == 1
    assert _err(capsys)["error"] == "ValidationError"
    assert run(["no-such-command"]) == 1


def test_wrong_file_kind_exits_1(files, tmp_path, capsys):
    code = run(["evaluate", "--gt", str(files / "v.octb"), "--pred", str(files / "m.octb"),
                "--out", str(tmp_path / "s.csv")])
    assert code == 1


def test_processing_error_exits_2(tmp_path, capsys):
    # a constant volume cannot be axially centred
    from octquant.core import Volume3D, VoxelSpacing
    write_octb(Volume3D(np.full((3, 32, 32), 0.5, np.float32), VoxelSpacing(3.9, 10.0, 50.0)), tmp_path / "c.octb")
    assert run(["preprocess", "--in", str(tmp_path / "c.octb"), "--out", str(tmp_path / "o.octb")]) == 2
    assert _err(capsys)["error"] == "DegenerateBScan"


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_console_script_runs():
    exe = shutil.which("oct-quant")
    cmd = [exe] if exe else [sys.executable, "-m", "octquant.cli"]
    proc = subprocess.run(cmd + ["evaluate", "--gt", "/nonexistent.octb", "--pred", "/x", "--out", "/tmp/x.csv"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["error"] == "ValidationError"


def test_preprocess_writes_sidecar(files, tmp_path):
    out = tmp_path / "pp.octb"
    assert run(["preprocess", "--in", str(files / "v.octb"), "--out", str(out), "--bv-iters", "5"]) == 0
    side = json.loads(Path(f"{out}.motion.json").read_text())
    assert set(side) == {"axial_center_offsets", "bv", "motion"}
    assert len(side["motion"]["axial_shift_px"]) == 6
    assert read_octb(out).dims == read_octb(files / "v.octb").dims


def test_preprocess_skip_all_is_identity(files, tmp_path):
    out = tmp_path / "pp.octb"
    assert run(["preprocess", "--in", str(files / "v.octb"), "--out", str(out), "--skip-center", "--skip-bv",
                "--skip-motion", "--motion-json", str(tmp_path / "m.json")]) == 0
    assert read_octb(out) == read_octb(files / "v.octb")
    assert json.loads((tmp_path / "m.json").read_text()) == {"axial_center_offsets": None, "bv": None, "motion": None}


def test_thickness_and_etdrs_round_trip(files, tmp_path):
    maps, et, svg = tmp_path / "maps.octb", tmp_path / "e.json", tmp_path / "g.svg"
    assert run(["thickness", "--mask", str(files / "m.octb"), "--layer", "all", "--out", str(maps),
                "--etdrs", str(et), "--svg", str(svg)]) == 0
    summ = json.loads(et.read_text())
    assert len(summ) == 10 and summ[0]["layer"] == "RNFL" and summ[0]["subject_id"] == "m"
    assert (tmp_path / "g.GCL_IPL.svg").exists() and (tmp_path / "g.Fluid.svg").exists()
    et2 = tmp_path / "e2.json"
    assert run(["etdrs", "--map", str(maps), "--etdrs", str(et2), "--subject-id", "m"]) == 0
    assert json.loads(et2.read_text()) == summ


def test_thickness_single_layer(files, tmp_path):
    et = tmp_path / "e.json"
    assert run(["thickness", "--mask", str(files / "m.octb"), "--layer", "OPL", "--etdrs", str(et),
                "--center-mm", "3.0,3.0"]) == 0
    d = json.loads(et.read_text())
    assert d["layer"] == "OPL" and d["aggregation"] == "mean" and d["cs_excluded"] is True


def test_thickness_center_outside_field_exits_1(files, tmp_path):
    assert run(["thickness", "--mask", str(files / "m.octb"), "--layer", "OPL", "--etdrs",
                str(tmp_path / "e.json"), "--center-mm", "9,9"]) == 1


def test_losses_command(files, tmp_path, capsys):
    out = tmp_path / "l.json"
    assert run(["losses", "--y", str(files / "m.octb"), "--yhat", str(files / "m.octb"), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert set(d) == {"dice", "ce", "texture", "total"}
    assert d["texture"] == 0.0 and d["dice"] < 1e-5
    assert run(["losses", "--y", str(files / "m.octb"), "--yhat", str(files / "m.octb"), "--alpha", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == pytest.approx(d["ce"] + d["texture"], abs=1e-12)


def test_phantom_seed_override_is_deterministic(tmp_path):
    args = ["phantom", "--seed", "3", "--out-volume", str(tmp_path / "a.octb"), "--out-mask", str(tmp_path / "b.octb")]
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(small_spec().to_json()))
    assert run(args[:3] + ["--spec", str(spec)] + args[3:]) == 0
    first = (tmp_path / "a.octb").read_bytes()
    assert run(args[:3] + ["--spec", str(spec)] + args[3:]) == 0
    assert (tmp_path / "a.octb").read_bytes() == first


def _batch_dir(files, root, n=3, corrupt=None):
    root.mkdir()
    gt = read_octb(files / "m.octb")
    for i in range(n):
        write_octb(gt, root / f"v{i}.gt.octb")
        write_octb(perturb_mask(gt, "shift_boundary", i), root / f"v{i}.pred.octb")
    if corrupt is not None:
        (root / f"v{corrupt}.pred.octb").write_bytes(b"OCTB garbage")
    return root


def test_batch_happy_path(files, tmp_path):
    d = _batch_dir(files, tmp_path / "in")
    out = tmp_path / "out"
    assert run(["batch", "--dir", str(d), "--out-dir", str(out)]) == 0
    agg = _csv(out / "aggregate.csv")
    assert len(agg) == 3 * 12
    single = []
    for i in range(3):
        single += _csv(out / f"v{i}.scores.csv")
    assert agg == single
    assert json.loads((out / "failures.json").read_text())["n_failed"] == 0


def test_batch_matches_single_runs(files, tmp_path):
    d = _batch_dir(files, tmp_path / "in")
    out = tmp_path / "out"
    assert run(["batch", "--dir", str(d), "--out-dir", str(out), "--tau", "4"]) == 0
    one = tmp_path / "one.csv"
    assert run(["evaluate", "--gt", str(d / "v1.gt.octb"), "--pred", str(d / "v1.pred.octb"), "--tau", "4",
                "--out", str(one)]) == 0
    rows = _csv(one)
    for r in rows:
        r["volume_id"] = "v1"
    assert rows == _csv(out / "v1.scores.csv")


def test_batch_isolates_corrupt_pair(files, tmp_path, caplog):
    d = _batch_dir(files, tmp_path / "in", corrupt=1)
    out = tmp_path / "out"
    assert run(["batch", "--dir", str(d), "--out-dir", str(out)]) == 0
    assert len(_csv(out / "aggregate.csv")) == 2 * 12
    man = json.loads((out / "failures.json").read_text())
    assert man["n_failed"] == 1 and man["failures"][0]["volume_id"] == "v1"
    assert not (out / "v1.scores.csv").exists()


def test_batch_empty_dir_exits_1(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(["batch", "--dir", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "o")]) == 1
    assert _err(capsys)["error"] == "EmptyBatch"


def test_config_file_and_flag_precedence(files, tmp_path):
    d = _batch_dir(files, tmp_path / "in", n=1)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"evaluate": {"tau": 1.0}}))
    gt, pred = str(d / "v0.gt.octb"), str(d / "v0.pred.octb")
    base = ["evaluate", "--gt", gt, "--pred", pred]
    assert run(["--config", str(cfg)] + base + ["--out", str(tmp_path / "cfg.csv")]) == 0
    assert run(base + ["--tau", "1", "--out", str(tmp_path / "flag1.csv")]) == 0
    assert run(["--config", str(cfg)] + base + ["--tau", "10", "--out", str(tmp_path / "win.csv")]) == 0
    assert run(base + ["--out", str(tmp_path / "default.csv")]) == 0
    read = lambda n: (tmp_path / n).read_bytes()
    assert read("cfg.csv") == read("flag1.csv")
    assert read("win.csv") == read("default.csv")


def test_threads_env_and_validation(files, tmp_path, monkeypatch):
    monkeypatch.setenv("OCT_QUANT_THREADS", "zero")
    assert run(["evaluate", "--gt", str(files / "m.octb"), "--pred", str(files / "m.octb"),
                "--out", str(tmp_path / "s.csv")]) == 1
    monkeypatch.setenv("OCT_QUANT_THREADS", "2")
    assert run(["evaluate", "--gt", str(files / "m.octb"), "--pred", str(files / "m.octb"),
                "--out", str(tmp_path / "s.csv")]) == 0
    assert run(["--threads", "0", "evaluate", "--gt", str(files / "m.octb"), "--pred", str(files / "m.octb"),
                "--out", str(tmp_path / "s.csv")]) == 1


def test_stats_va_and_bad_cohort(tmp_path):
    root = e2e.run_pipeline(tmp_path / "p")
    out = tmp_path / "va.json"
    assert run(["stats", "va", "--cohort", str(root / "cohort.csv"), "--summaries", str(root / "etdrs"),
                "--group", "1", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["study"] == "va" and rep["n_subjects"] == 4
    group = json.loads((root / "stats" / "group.json").read_text())
    inl = [c for c in group["cells"] if c["layer"] == "INL"]
    assert len(inl) == 8 and all(c["effect"] > 0 for c in inl)
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,group\np00,1\n")
    assert run(["stats", "group", "--cohort", str(bad), "--summaries", str(root / "etdrs"),
                "--out", str(out)]) == 1


def test_end_to_end_deterministic_across_threads(tmp_path):
    a = e2e.digest(e2e.run_pipeline(tmp_path / "a", threads=1))
    b = e2e.digest(e2e.run_pipeline(tmp_path / "b", threads=3))
    assert a == b
    assert any(k.endswith(".svg") for k in a) and any(k.endswith(".csv") for k in a)
