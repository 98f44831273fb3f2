"""End-to-end command-line runs on the linear-quadratic fixture."""
import json
import subprocess
import sys

import numpy as np
import pytest

from gtddp import io
from gtddp.cli import main
from gtddp.config import lq_fixture_config


@pytest.fixture
def cfg_path(tmp_path):
    d = lq_fixture_config(dt=1e-2).to_dict()
    d["gp"]["n_max"] = 50
    d["output_dir"] = str(tmp_path / "run")
    p = tmp_path / "lq.json"
    p.write_text(json.dumps(d))
    return p


def _pipeline(cfg_path, out):
    assert main(["collect", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["solve", "--config", str(cfg_path), "--out", str(out), "--model", str(out / "model.json")]) == 0
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out)]) == 0


def test_full_pipeline_and_determinism(cfg_path, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(cfg_path, a)
    _pipeline(cfg_path, b)
    names = ["dataset.csv", "policy.json", "iterations.csv", "ensemble/summary.csv", "ensemble/run_0.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # model files point at their own dataset, so compare the hyperparameters
    ha = json.loads((a / "model.json").read_text())["hyperparameters"]
    hb = json.loads((b / "model.json").read_text())["hyperparameters"]
    assert ha == hb

    header, rows = io.read_table(a / "dataset.csv")
    assert header == ["t", "x0", "x1", "u0", "dx0", "dx1"]
    assert 0 < len(rows) <= 50

    log = io.read_iteration_log(a / "iterations.csv")
    assert np.all(np.diff(log["cost"]) < 0)

    header, summary = io.read_table(a / "ensemble/summary.csv")
    assert header == ["t", "mean_x0", "mean_x1", "std_x0", "std_x1", "goal_x0", "goal_x1"]
    manifest = json.loads((a / "ensemble/manifest.json").read_text())
    assert manifest["n_runs"] == 10 and manifest["n_failed"] == 0
    assert manifest["config_sha256"] and len(manifest["run_seeds"]) == 10
    runs = np.stack([io.read_table(a / "ensemble" / f)[1][:, 1:3] for f in manifest["run_files"]])
    np.testing.assert_allclose(summary[:, 1:3], runs.mean(0), rtol=1e-12, atol=1e-15)

    lml = [float(line.split()[-1]) for line in capsys.readouterr().out.splitlines() if "log marginal" in line]
    assert len(lml) == 4  # two training runs, two output dimensions


def test_single_run_summary_equals_run(cfg_path, tmp_path):
    d = json.loads(cfg_path.read_text())
    d["sim"]["n_runs"] = 1
    cfg_path.write_text(json.dumps(d))
    out = tmp_path / "one"
    assert main(["solve", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out)]) == 0
    _, summary = io.read_table(out / "ensemble/summary.csv")
    _, run = io.read_table(out / "ensemble/run_0.csv")
    np.testing.assert_array_equal(summary[:, 1:3], run[:, 1:3])
    np.testing.assert_array_equal(summary[:, 3:5], 0.0)


def test_seed_override_changes_data(cfg_path, tmp_path):
    main(["collect", "--config", str(cfg_path), "--out", str(tmp_path / "s0")])
    main(["collect", "--config", str(cfg_path), "--out", str(tmp_path / "s1"), "--seed", "1"])
    assert (tmp_path / "s0/dataset.csv").read_bytes() != (tmp_path / "s1/dataset.csv").read_bytes()


def test_missing_model_is_usage_error(cfg_path, tmp_path, capsys):
    rc = main(["solve", "--config", str(cfg_path), "--out", str(tmp_path), "--model", str(tmp_path / "none.json")])
    assert rc == 1
    assert "none.json" in capsys.readouterr().err


def test_malformed_dataset_reports_line(cfg_path, tmp_path, capsys):
    out = tmp_path / "m"
    main(["collect", "--config", str(cfg_path), "--out", str(out)])
    lines = (out / "dataset.csv").read_text().splitlines()
    lines[4] = lines[4].replace(",", ",x", 1)
    (out / "dataset.csv").write_text("\n".join(lines) + "\n")
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 1
    assert "dataset.csv:5:" in capsys.readouterr().err


def test_unwritable_output_leaves_no_file(cfg_path, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["collect", "--config", str(cfg_path), "--out", str(blocker / "sub")]) == 1
    assert blocker.read_text() == ""


def test_usage_errors(cfg_path, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["collect"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["collect", "--config", str(cfg_path), "--seed", "-3"])
    assert exc.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"solver": {"bogus": 1}}))
    assert main(["collect", "--config", str(bad)]) == 1


def test_dimension_mismatch_policy(cfg_path, tmp_path):
    out = tmp_path / "p"
    assert main(["solve", "--config", str(cfg_path), "--out", str(out)]) == 0
    quad = tmp_path / "quad.json"
    quad.write_text(json.dumps({"sim": {"n_runs": 1}}))
    assert main(["simulate", "--config", str(quad), "--out", str(out)]) == 1


def test_verify_subset_and_fault(capsys):
    assert main(["verify", "--only", "1,7"]) == 0
    out = capsys.readouterr().out
    assert "criterion 1 PASS" in out and "criterion 7 PASS" in out
    assert main(["verify", "--only", "3", "--inject-fault", "gain_sign"]) == 3
    assert "criterion 3 FAIL" in capsys.readouterr().out
    assert main(["verify", "--only", "9"]) == 1


def test_module_entry_point(cfg_path, tmp_path):
    r = subprocess.run([sys.executable, "-m", "gtddp", "collect", "--config", str(cfg_path), "--out", str(tmp_path / "e")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "e/dataset.csv").exists()
