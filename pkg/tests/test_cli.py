"""Command-line interface: exit codes, run directories, and artifacts."""

import json
import os
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from dissim.cli import RUN_ROOT_ENV, main
from dissim.datasets import load_dataset, tree_hash
from dissim.evaluation import REPORT_FILE_SCHEMA
from dissim.models import load_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset_dir(work):
    out = work / "data"
    assert run("synth", "--out", out, "--n", "10", "--seed", "3", "--size", "64",
               "--patch-size", "32", "--ood-rate", "0.4", "--corrupt-rate", "0.3") == 0
    return out


@pytest.fixture(scope="module")
def detector_run(work, dataset_dir):
    out = work / "det"
    assert run("train", "--stage", "detector", "--out", out,
               "--dataset", dataset_dir, "--head", "fc", "--patch-size", "32",
               "--base-filters", "2", "--conv-stacks", "1,1,0",
               "--epochs", "1", "--batch-size", "16", "--seed", "0") == 0
    return out


# ------------------------------------------------------------------- synth

def test_synth_layout_and_determinism(work):
    a, b = work / "ds-a", work / "ds-b"
    for out in (a, b):
        assert run("synth", "--out", out, "--n", "4", "--seed", "11",
                   "--size", "64", "--patch-size", "32") == 0
    assert tree_hash(a) == tree_hash(b)
    ds = load_dataset(a)
    assert len(ds) == 4
    assert (a / "manifest").is_file()
    # refuses to clobber, unless forced
    assert run("synth", "--out", a, "--n", "4", "--seed", "11",
               "--size", "64", "--patch-size", "32") == 2
    assert run("synth", "--out", a, "--n", "4", "--seed", "12",
               "--size", "64", "--patch-size", "32", "--force") == 0
    assert tree_hash(a) != tree_hash(b)


def test_synth_ood_rate_zero_means_no_ood(work):
    out = work / "ds-clean"
    assert run("synth", "--out", out, "--n", "3", "--seed", "2", "--size", "64",
               "--patch-size", "32", "--ood-rate", "0") == 0
    ds = load_dataset(out)
    assert not any(im.ood_mask.any() for im in ds.images)


def test_synth_rejects_bad_rate(work):
    assert run("synth", "--out", work / "x", "--n", "2", "--seed", "0",
               "--size", "64", "--ood-rate", "1.5") == 2


# ------------------------------------------------------------------- train

def test_detector_run_artifacts(detector_run, dataset_dir):
    meta = json.loads((detector_run / "run.json").read_text())
    assert meta["stage"] == "detector"
    assert meta["dataset"] == str(dataset_dir)
    assert meta["dataset_hash"] == tree_hash(dataset_dir)
    assert meta["command"] == "train"
    ckpt = load_checkpoint(detector_run / "detector.ckpt")
    assert ckpt.kind == "detector"
    assert ckpt.config["head"] == "fc"
    config_txt = (detector_run / "config.txt").read_text()
    assert "head=fc" in config_txt
    assert "epochs=1" in config_txt


def test_train_flag_beats_config_file(work, dataset_dir):
    cfg_file = work / "base.cfg"
    cfg_file.write_text("epochs=5\nhead=fc\npatch_size=32\nbase_filters=2\n"
                        "conv_stacks=1,1,0\nbatch_size=16\n")
    out = work / "det-override"
    assert run("train", "--stage", "detector", "--out", out, "--config", cfg_file,
               "--dataset", dataset_dir, "--epochs", "1") == 0
    assert "epochs=1" in (out / "config.txt").read_text()
    meta = json.loads((out / "run.json").read_text())
    assert meta["stage"] == "detector"


def test_train_missing_dataset_exits_2(work):
    assert run("train", "--stage", "detector", "--out", work / "nope",
               "--dataset", work / "does-not-exist") == 2


def test_train_transfer_without_gan_run_exits_2(work, dataset_dir):
    assert run("train", "--stage", "detector", "--out", work / "tr",
               "--dataset", dataset_dir, "--head", "transfer",
               "--patch-size", "32") == 2


def test_failed_gate_exits_3(work, dataset_dir):
    # one epoch at a hopeless learning rate cannot reach the L1 gate
    assert run("train", "--stage", "gan", "--out", work / "gan-fail",
               "--dataset", dataset_dir, "--gan-epochs", "1",
               "--gan-lr", "1e-7") == 3


def test_unparseable_flag_exits_2(work, dataset_dir):
    assert run("train", "--stage", "detector", "--out", work / "bad",
               "--dataset", dataset_dir, "--learning-rate", "0") == 2


def test_jobs_must_be_positive(work):
    assert run("synth", "--out", work / "jobs0", "--n", "1", "--seed", "0",
               "--size", "64", "--jobs", "0") == 2


# -------------------------------------------------------------------- eval

def test_eval_writes_schema_valid_report(work, detector_run, dataset_dir):
    report_path = work / "report.json"
    assert run("eval", "--run", detector_run, "--dataset", dataset_dir,
               "--mask", "union", "--report", report_path) == 0
    data = json.loads(report_path.read_text())
    jsonschema.validate(data, REPORT_FILE_SCHEMA)
    names = {row["name"] for row in data["rows"]}
    assert "detector-fc" in names
    assert "entropy-baseline" in names
    assert data["mask_kind"] == "union"
    assert data["dataset_hash"] == tree_hash(dataset_dir)


def test_eval_union_is_or_of_singles(work, detector_run, dataset_dir):
    # same detector scores, three mask choices; union counts must match OR
    reports = {}
    for mask in ("ood", "mis", "union"):
        path = work / f"r-{mask}.json"
        assert run("eval", "--run", detector_run, "--dataset", dataset_dir,
                   "--mask", mask, "--report", path) == 0
        data = json.loads(path.read_text())
        row = next(r for r in data["rows"] if r["name"] == "detector-fc")
        reports[mask] = row["counts"]
    ds = load_dataset(dataset_dir)
    expected_union = sum(
        int((im.ood_mask | ((im.pred_labels != im.labels) & ~im.ood_mask)).sum())
        for im in ds.images
    )
    assert reports["union"]["positives"] == expected_union
    assert reports["union"]["pixels"] == reports["ood"]["pixels"]


def test_eval_missing_run_exits_2(work, dataset_dir):
    assert run("eval", "--run", work / "absent", "--dataset", dataset_dir,
               "--report", work / "absent-report.json") == 2


# ------------------------------------------------------------------ render

def test_render_writes_panels(work, detector_run, dataset_dir):
    out = work / "panels"
    assert run("render", "--run", detector_run, "--dataset", dataset_dir,
               "--out", out, "--n", "3") == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 3
    from PIL import Image
    with Image.open(pngs[0]) as im:
        width, height = im.size
    assert height == 64 and width == 4 * 64 + 3 * 4


# ------------------------------------------------------------------- sweep

def test_sweep_writes_rows(work, dataset_dir):
    out = work / "sweep"
    assert run("sweep", "--param", "lambda_d", "--values", "0.5,1.0",
               "--out", out, "--dataset", dataset_dir, "--head", "fc",
               "--patch-size", "32", "--base-filters", "2",
               "--conv-stacks", "1,1,0", "--epochs", "1",
               "--batch-size", "16", "--seed", "0") == 0
    csv_lines = (out / "lambda_sweep.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 3  # header + one row per value
    meta = json.loads((out / "run.json").read_text())
    assert [row["lambda_d"] for row in meta["rows"]] == [0.5, 1.0]


def test_sweep_rejects_other_params(work, dataset_dir):
    assert run("sweep", "--param", "epochs", "--out", work / "s2",
               "--dataset", dataset_dir) == 2


# ------------------------------------------------- environment and parsing

def test_run_root_env_resolves_relative_paths(work, monkeypatch):
    monkeypatch.setenv(RUN_ROOT_ENV, str(work / "rooted"))
    assert run("synth", "--out", "ds", "--n", "2", "--seed", "1",
               "--size", "64", "--patch-size", "32") == 0
    assert (work / "rooted" / "ds" / "manifest").is_file()


def test_version_flag():
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2
