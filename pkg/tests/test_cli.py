import json
from pathlib import Path

import numpy as np
import pytest

from vertsynth.cli import (
    EXIT_DATA,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_USAGE,
    load_config,
    main,
)

TINY_TOML = """
[phantom]
n_cases = 3
volume_shape = [96, 72, 72]
spacing = [2.0, 1.0, 1.0]
noise_sigma_hu = 8.0
balanced = true
seed = 11

[preprocess]
patch_size = 64

[hgam]
epochs = 4

[train]
batch_size = 8
total_epochs = 8
decay_start = 4
base_width = 8
d_base_width = 8
checkpoint_every = 8

[synthesis]
mode = "one_step"

[grading]
folds = 3
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


@pytest.fixture(scope="module")
def cases_dir(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("cases")
    assert main(["phantom", "--config", str(tiny_config), "--out", str(out)]) == EXIT_OK
    return out


# -- usage / config errors ---------------------------------------------------------

def test_unknown_subcommand_exit_2():
    assert main(["frobnicate"]) == EXIT_USAGE


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[phantom]\nn_casez = 3\n")
    rc = main(["phantom", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == EXIT_USAGE


def test_unknown_config_section_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[phantoms]\nn_cases = 3\n")
    assert main(["phantom", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    rc = main(["phantom", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_MISSING


def test_defaults_load():
    config = load_config(None)
    assert config["preprocess"]["h_max_mm"] == 40.0


# -- phantom stage -------------------------------------------------------------------

def test_phantom_writes_cases(cases_dir):
    dirs = sorted(cases_dir.iterdir())
    assert len(dirs) == 3
    for d in dirs:
        assert (d / "ct.nii.gz").exists()
        assert (d / "seg.nii.gz").exists()
        assert (d / "seg_healthy.nii.gz").exists()
        meta = json.loads((d / "meta.json").read_text())
        assert len(meta["vertebrae"]) == 5


def test_phantom_rerun_identical_json(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["phantom", "--config", str(tiny_config), "--out", str(a)]) == EXIT_OK
    assert main(["phantom", "--config", str(tiny_config), "--out", str(b)]) == EXIT_OK
    ja = (a / "case_0000" / "meta.json").read_bytes()
    jb = (b / "case_0000" / "meta.json").read_bytes()
    assert ja == jb
    assert (a / "case_0000" / "ct.nii.gz").read_bytes() == (b / "case_0000" / "ct.nii.gz").read_bytes()


# -- preprocess stage ----------------------------------------------------------------

def test_preprocess_stage(tiny_config, cases_dir, tmp_path):
    out = tmp_path / "prep"
    rc = main([
        "preprocess", "--config", str(tiny_config),
        "--case", str(cases_dir / "case_0000"), "--out", str(out),
    ])
    assert rc == EXIT_OK
    index = json.loads((out / "index.json").read_text())
    assert len(index) == 5
    npz = np.load(out / index[0]["file"])
    assert npz["masked"].shape[1:] == (64, 64)


def test_preprocess_missing_case(tiny_config, tmp_path):
    rc = main([
        "preprocess", "--config", str(tiny_config),
        "--case", str(tmp_path / "nocase"), "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_MISSING


# -- synthesize guards ------------------------------------------------------------------

def test_synthesize_missing_checkpoint(tiny_config, cases_dir, tmp_path, capsys):
    rc = main([
        "synthesize", "--config", str(tiny_config),
        "--case", str(cases_dir / "case_0000"),
        "--ckpt", str(tmp_path / "none.pt"), "--clf", str(tmp_path / "none.ckpt"),
        "--target", "3", "--out", str(tmp_path / "gen"),
    ])
    assert rc == EXIT_MISSING
    assert "missing upstream artifact: checkpoint" in capsys.readouterr().err


def test_grade_missing_rhlv(tmp_path, cases_dir):
    rc = main([
        "grade", "train-svm", "--rhlv", str(tmp_path / "none.csv"),
        "--labels", str(cases_dir), "--out", str(tmp_path / "svm.json"),
    ])
    assert rc == EXIT_MISSING


# -- end-to-end pipeline -------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    rc = main(["pipeline", "--config", str(tiny_config), "--out", str(out)])
    return rc, out


def test_pipeline_completes(pipeline_run):
    rc, out = pipeline_run
    assert rc == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_cases"] == 3
    assert summary["classification_eval"]["n"] == 15
    assert (out / "rhlv.csv").exists()
    assert (out / "svm.json").exists()
    assert (out / "preds.csv").exists()
    assert (out / "ckpt" / "checkpoint_last.pt").exists()


def test_pipeline_artifacts_consistent(pipeline_run):
    rc, out = pipeline_run
    assert rc == EXIT_OK
    rows = (out / "rhlv.csv").read_text().strip().splitlines()
    assert rows[0].startswith("case_id,vertebra,mode")
    assert len(rows) - 1 == 15  # every vertebra quantified
    preds = (out / "preds.csv").read_text().strip().splitlines()
    assert len(preds) - 1 == 15


def test_quantify_rerun_byte_identical(pipeline_run, tmp_path):
    rc, out = pipeline_run
    assert rc == EXIT_OK
    case = out / "cases" / "case_0000"
    gen = out / "gen" / "case_0000"
    c1, c2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    assert main(["quantify", "--case", str(case), "--gen", str(gen), "--out", str(c1)]) == EXIT_OK
    assert main(["quantify", "--case", str(case), "--gen", str(gen), "--out", str(c2)]) == EXIT_OK
    assert c1.read_bytes() == c2.read_bytes()


def test_hgam_train_stage(tiny_config, cases_dir, tmp_path):
    out = tmp_path / "clf.ckpt"
    rc = main([
        "hgam-train", "--config", str(tiny_config),
        "--data", str(cases_dir), "--out", str(out),
    ])
    assert rc == EXIT_OK
    from vertsynth.attention import load_classifier

    bundle = load_classifier(out)
    assert 0.0 <= bundle.holdout_accuracy <= 1.0


def test_synthesize_stage_cli(pipeline_run, tiny_config, tmp_path):
    rc, out = pipeline_run
    assert rc == EXIT_OK
    gen_out = tmp_path / "gen3"
    rc2 = main([
        "synthesize", "--config", str(tiny_config),
        "--case", str(out / "cases" / "case_0001"),
        "--ckpt", str(out / "ckpt" / "checkpoint_last.pt"),
        "--clf", str(out / "clf.ckpt"),
        "--target", "3", "--mode", "two_step", "--out", str(gen_out),
    ])
    assert rc2 == EXIT_OK
    prov = json.loads((gen_out / "provenance.json").read_text())
    assert prov["mode"] == "two_step"
    assert prov["neighbors"] == [2, 4]
    assert (gen_out / "gen.nii.gz").exists()


def test_quantify_heatmaps(pipeline_run, tmp_path):
    rc, out = pipeline_run
    assert rc == EXIT_OK
    case = out / "cases" / "case_0000"
    gen = out / "gen" / "case_0000" / "vert_03"
    rc2 = main([
        "quantify", "--case", str(case), "--gen", str(gen),
        "--out", str(tmp_path / "r.csv"), "--heatmaps",
    ])
    assert rc2 == EXIT_OK
    assert (gen / "vert_03_heatmap.png").exists()
    assert (gen / "vert_03_curve.csv").exists()


def test_eval_stage(pipeline_run, tmp_path):
    rc, out = pipeline_run
    assert rc == EXIT_OK
    report_path = tmp_path / "report.json"
    rc2 = main([
        "eval", "--pred", str(out / "preds.csv"), "--gt", str(out / "cases"),
        "--out", str(report_path),
    ])
    assert rc2 == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["n"] == 15
    assert 0.0 <= report["macro_f1"] <= 1.0
