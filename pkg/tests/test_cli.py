import json

import numpy as np
import pytest

from lcbyol.assess import REFERENCE_COUNTS
from lcbyol.cli import build_parser, main
from tests.pipeline import TINY, digest_tree, run_pipeline, sets

COMMANDS = ["synth", "sample", "pretrain", "probe", "finetune", "infer", "assess"]


@pytest.mark.parametrize("cmd", [None] + COMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main(([cmd] if cmd else []) + ["--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_parser_knows_every_command():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(COMMANDS)


def test_assess_reference_matrix_matrix(tmp_path, capsys):
    (tmp_path / "reference.json").write_text(json.dumps(REFERENCE_COUNTS.tolist()))
    assert main(["assess", "--matrix", str(tmp_path / "reference.json"), "--out", str(tmp_path / "out")]) == 0
    m = json.loads((tmp_path / "out" / "assessment.json").read_text())["metrics"]
    assert round(m["overall_accuracy"] * 100, 2) == 87.14
    assert round(m["macro_f1"] * 100, 2) == 75.58
    assert "87.14%" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path), "--set", "byol.nonsense=3"])
    assert code == 2
    assert "byol.nonsense" in capsys.readouterr().err
    (tmp_path / "bad.yaml").write_text("dataset:\n  n_strata: -2\n")
    assert main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "bad.yaml")]) == 2
    assert main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "nope.yaml")]) == 2


def test_missing_inputs_exit_code(tmp_path, capsys):
    assert main(["sample", "--world", str(tmp_path / "none"), "--out", str(tmp_path / "s")]) == 3
    assert "run `lcbyol synth` first" in capsys.readouterr().err
    assert main(["pretrain", "--data", str(tmp_path), "--out", str(tmp_path / "b")]) == 3
    assert main(["infer", "--image", str(tmp_path / "none"), "--out", str(tmp_path / "m")]) == 3
    assert main(["assess", "--out", str(tmp_path / "a")]) == 3


@pytest.fixture(scope="module")
def desk_sample(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    opts = sets(["dataset.world_size=1024", "dataset.n_strata=10"])
    assert main(["synth", "--out", str(root / "world")] + opts) == 0
    assert main(["sample", "--world", str(root / "world"), "--out", str(root / "a"), "--verify"] + opts) == 0
    assert main(["sample", "--world", str(root / "world"), "--out", str(root / "b")] + opts) == 0
    return root


def test_desk_sample_gives_four_folds_of_ten(desk_sample):
    plan = json.loads((desk_sample / "a" / "splitplan.json").read_text())
    assert [len(f) for f in plan["folds"]] == [10] * 4
    assert all(sorted(s) == sorted(plan["fold_strata"][0]) for s in plan["fold_strata"])
    assert plan["pca"]["standardization"] == "zero mean, no variance scaling"
    assert len(plan["config_hash"]) == 16
    assert [r["train_folds"] for r in plan["cv_runs"]] == [[1], [2], [3], [0]]
    index = json.loads((desk_sample / "a" / "patches" / "index.json").read_text())
    assert sum(p["role"] == "labeled" for p in index["patches"]) == 40


def test_sample_rerun_is_byte_identical(desk_sample):
    a = (desk_sample / "a" / "splitplan.json").read_bytes()
    assert a == (desk_sample / "b" / "splitplan.json").read_bytes()
    assert digest_tree(desk_sample / "a" / "patches") == digest_tree(desk_sample / "b" / "patches")


def test_tiny_pipeline(tmp_path):
    root = run_pipeline(tmp_path, TINY)
    report = json.loads((root / "ft" / "cv_report.json").read_text())
    assert len(report["runs"]) == 4 and report["config"]["encoder"].endswith("encoder_best")
    classes = np.fromfile(root / "map" / "data.bin", dtype=np.uint8)
    assert classes.size == 512 * 512 and set(np.unique(classes)) <= set(range(1, 9))
    probs = np.fromfile(root / "probs" / "data.bin", dtype="<f4").reshape(8, -1)
    np.testing.assert_allclose(probs.sum(0), 1.0, atol=1e-5)
    doc = json.loads((root / "assess" / "assessment.json").read_text())
    assert doc["metrics"]["total"] == 40 and doc["source"] == "points"
    header = json.loads((root / "map" / "header.json").read_text())
    assert header["extra"]["config_hash"] == doc["config_hash"]


def test_probe_command(tmp_path):
    opts = sets(TINY)
    assert main(["synth", "--out", str(tmp_path / "w")] + opts) == 0
    assert main(["sample", "--world", str(tmp_path / "w"), "--out", str(tmp_path / "s")] + opts) == 0
    assert main(["pretrain", "--data", str(tmp_path / "s" / "patches"), "--out", str(tmp_path / "b")] + opts) == 0
    assert main(["probe", "--data", str(tmp_path / "s" / "patches"), "--encoder",
                 str(tmp_path / "b" / "encoder_final"), "--out", str(tmp_path / "p")] + opts) == 0
    report = json.loads((tmp_path / "p" / "cv_report.json").read_text())
    assert report["config"]["kind"] == "PROBE" and len(report["runs"]) == 4
