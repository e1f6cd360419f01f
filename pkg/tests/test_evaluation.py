"""Metrics, map assembly, masks, and evaluation reports."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from dissim.datasets import Dataset
from dissim.errors import InputError, UndefinedMetricError
from dissim.evaluation import (
    REPORT_FILE_SCHEMA,
    ConstantDetector,
    EvalReport,
    assemble_map,
    build_masks,
    evaluate_detector,
    evaluate_entropy_baseline,
    f1_at,
    f1_sweep,
    image_dissimilarity,
    oracle_generator,
    roc_auc,
    save_report,
    save_report_file,
    select_mask,
    softmax_entropy_map,
)
from dissim.patches import extract_patches, plan_layout
from dissim.seeding import rng
from dissim.toyworld import LabeledImage, default_class_set


def pairwise_auc(scores, labels):
    """Brute-force P(score_pos > score_neg) + half credit on ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


# ------------------------------------------------------------------ metrics

def test_roc_auc_hand_case():
    scores = [0.9, 0.8, 0.7, 0.6]
    labels = [1, 0, 1, 0]
    roc, auc = roc_auc(scores, labels)
    assert auc == 0.75
    assert roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0)


def test_roc_auc_equals_pairwise_oracle_with_ties():
    r = rng(31)
    worst = 0.0
    for _ in range(200):
        n = int(r.integers(10, 200))
        # coarse grid forces plenty of exact ties
        scores = r.integers(0, 7, size=n) / 6.0
        labels = r.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        _, auc = roc_auc(scores, labels)
        worst = max(worst, abs(auc - pairwise_auc(scores, labels)))
    assert worst <= 1e-12


def test_roc_auc_all_tied_is_half():
    _, auc = roc_auc([0.5] * 10, [1, 0] * 5)
    assert auc == 0.5


def test_roc_auc_invariant_under_monotone_transform():
    r = rng(32)
    scores = r.random(500)
    labels = r.integers(0, 2, size=500)
    labels[0], labels[1] = 0, 1
    _, a = roc_auc(scores, labels)
    _, b = roc_auc(scores ** 3, labels)
    assert a == b


def test_roc_auc_rejects_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.9], [1, 1])


def test_f1_hand_cases():
    scores = [0.9, 0.8, 0.3, 0.1]
    labels = [1, 0, 1, 0]
    # threshold 0.5: tp=1 fp=1 fn=1 -> f1 = 2/4
    assert f1_at(scores, labels, 0.5) == 0.5
    assert f1_at(scores, labels, 0.25) == pytest.approx(2 * 2 / (2 * 2 + 1 + 0))
    assert f1_at([0.9, 0.1], [1, 0], 0.5) == 1.0
    assert f1_at([0.1, 0.2], [1, 0], 0.9) == 0.0  # nothing predicted


def test_f1_sweep_matches_f1_at_and_prefers_first_max():
    r = rng(33)
    scores = r.random(300)
    labels = r.integers(0, 2, size=300)
    curve, best = f1_sweep(scores, labels, n_thresholds=19)
    assert len(curve) == 19
    for threshold, value in curve[:5]:
        assert value == pytest.approx(f1_at(scores, labels, threshold), abs=1e-12)
    # constant scores tie every threshold below; the first one must win
    curve, best = f1_sweep([0.6] * 8, [1, 0, 1, 0, 1, 0, 1, 0], n_thresholds=99)
    assert best[0] == pytest.approx(0.01)


def test_softmax_entropy_map_known_values():
    probs = np.zeros((1, 2, 2), dtype=np.float64)
    probs[0, 0] = [0.5, 0.5]
    probs[0, 1] = [1.0, 0.0]
    ent = softmax_entropy_map(probs)
    assert ent.shape == (1, 2)
    assert ent[0, 0] == pytest.approx(math.log(2.0))
    assert ent[0, 1] == pytest.approx(0.0, abs=1e-9)


# -------------------------------------------------------------------- masks

def _mask_image():
    cs = default_class_set()
    in_a, in_b = cs.prob_channel_ids[0], cs.prob_channel_ids[1]
    ood_id = cs.ood_ids[0]
    labels = np.full((4, 4), in_a, dtype=np.uint8)
    labels[0, :] = ood_id
    pred = np.full((4, 4), in_a, dtype=np.uint8)
    pred[0, :] = in_b      # structural disagreement on OoD pixels
    pred[1, 0] = in_b      # one genuine misclassification
    image = LabeledImage(
        rgb=np.zeros((4, 4, 3), dtype=np.uint8),
        labels=labels,
        ood_mask=cs.ood_mask(labels),
        misclass_mask=pred != labels,
        id="m",
        pred_labels=pred,
    )
    return cs, image


def test_build_masks_excludes_ood_from_misclass():
    cs, image = _mask_image()
    ood, misclass, union = build_masks(image, cs)
    assert ood.sum() == 4 and ood[0].all()
    assert misclass.sum() == 1 and misclass[1, 0]
    np.testing.assert_array_equal(union, ood | misclass)
    np.testing.assert_array_equal(select_mask(image, cs, "union"), union)


def test_select_mask_errors():
    cs, image = _mask_image()
    with pytest.raises(InputError):
        select_mask(image, cs, "bogus")
    image.pred_labels = None
    with pytest.raises(InputError):
        select_mask(image, cs, "ood")


# ----------------------------------------------------------------- assembly

@pytest.mark.parametrize("shape", [(64, 64, 32), (128, 128, 64), (96, 128, 32)])
def test_assemble_inverts_extract(shape):
    h, w, p = shape
    values = np.round(rng(40, p).random((h, w)), 6)
    patches, layout = extract_patches(values, p)
    dmap = assemble_map(patches, layout)
    assert dmap.kind == "per_pixel"
    assert dmap.scored.all()
    np.testing.assert_array_equal(dmap.values, values)


def test_assemble_broadcasts_scalars_and_flags_cropped_bands():
    layout = plan_layout(100, 130, 32)
    scores = [i / 12 for i in range(layout.n_patches)]
    dmap = assemble_map(scores, layout)
    assert dmap.kind == "scalar"
    assert dmap.values[0, 0] == 0.0 and dmap.values[33, 33] == pytest.approx(5 / 12)
    assert not dmap.scored[96:, :].any() and not dmap.scored[:, 128:].any()
    assert dmap.scored[:96, :128].all()


def test_assemble_rejects_bad_scores():
    layout = plan_layout(64, 64, 32)
    with pytest.raises(InputError):
        assemble_map([0.5] * 3, layout)
    with pytest.raises(InputError):
        assemble_map([0.5, 1.5, 0.5, 0.5], layout)
    with pytest.raises(InputError):
        assemble_map([0.5, np.zeros((32, 32)), 0.5, 0.5], layout)  # mixed kinds
    with pytest.raises(InputError):
        assemble_map([np.zeros((16, 16))] * 4, layout)


# --------------------------------------------------------------- evaluation

def test_constant_detector_validation():
    with pytest.raises(InputError):
        ConstantDetector(value=1.5)


def test_image_dissimilarity_constant_map(tiny_dataset):
    image = tiny_dataset.images[0]
    gen = oracle_generator(tiny_dataset.class_set)
    synthetic = gen(image.pred_labels, 0)
    dmap = image_dissimilarity(ConstantDetector(patch_size=32), image, synthetic,
                               tiny_dataset.class_set, 32)
    assert dmap.kind == "scalar"
    assert (dmap.values[dmap.scored] == 0.5).all()
    with pytest.raises(InputError):
        image_dissimilarity(ConstantDetector(patch_size=32), image,
                            synthetic[:32], tiny_dataset.class_set, 32)


def test_evaluate_constant_detector_is_exactly_half(tiny_dataset):
    gen = oracle_generator(tiny_dataset.class_set)
    report = evaluate_detector(ConstantDetector(patch_size=32), tiny_dataset, gen,
                               mask_kind="union", patch_size=32, seed=0)
    assert report.auc == 0.5
    n_pixels = sum(im.height * im.width for im in tiny_dataset.images)
    assert report.counts["pixels"] == n_pixels  # 64 % 32 == 0: nothing cropped
    assert report.counts["positives"] + report.counts["negatives"] == n_pixels
    assert report.meta["detector"] == "ConstantDetector"
    assert report.meta["score_kind"] == "scalar"
    assert report.meta["dataset_hash"]


def test_evaluate_detector_rejects_bad_inputs(tiny_dataset):
    gen = oracle_generator(tiny_dataset.class_set)
    det = ConstantDetector(patch_size=32)
    with pytest.raises(InputError):
        evaluate_detector(det, tiny_dataset, gen, mask_kind="nope", patch_size=32)
    with pytest.raises(InputError):
        evaluate_detector(det, tiny_dataset, gen, patch_size=64)  # size mismatch
    stripped = Dataset(
        images=[_strip_prediction(im) for im in tiny_dataset.images],
        class_set=tiny_dataset.class_set,
        manifest=dict(tiny_dataset.manifest),
    )
    with pytest.raises(InputError):
        evaluate_detector(det, stripped, gen, patch_size=32)


def _strip_prediction(im):
    return LabeledImage(
        rgb=im.rgb, labels=im.labels, ood_mask=im.ood_mask,
        misclass_mask=np.zeros_like(im.misclass_mask), id=im.id,
    )


def test_entropy_baseline_report(tiny_dataset):
    report = evaluate_entropy_baseline(tiny_dataset, mask_kind="misclass")
    report.check()
    assert 0.0 <= report.auc <= 1.0
    assert report.meta["detector"] == "softmax-entropy"
    stripped = Dataset(
        images=[_strip_prediction(im) for im in tiny_dataset.images],
        class_set=tiny_dataset.class_set,
        manifest=dict(tiny_dataset.manifest),
    )
    with pytest.raises(InputError):
        evaluate_entropy_baseline(stripped)


# ------------------------------------------------------------------ reports

def _sample_report(mask_kind="union"):
    scores = [0.9, 0.8, 0.3, 0.1]
    labels = [1, 0, 1, 0]
    roc, auc = roc_auc(scores, labels)
    f1_curve, best = f1_sweep(scores, labels)
    return EvalReport(mask_kind=mask_kind, roc=roc, auc=auc,
                      f1_curve=f1_curve, best_f1=best,
                      counts={"pixels": 4, "positives": 2, "negatives": 2, "unscored": 0},
                      meta={"detector": "x"})


def test_report_check_catches_violations():
    report = _sample_report()
    report.check()
    bad = _sample_report()
    bad.auc = bad.auc + 0.2
    with pytest.raises(InputError):
        bad.check()
    bad = _sample_report()
    bad.roc = bad.roc[:-1]
    with pytest.raises(InputError):
        bad.check()


def test_save_report_round_trip(tmp_path):
    report = _sample_report()
    path = save_report(report, tmp_path / "r.json")
    data = json.loads(path.read_text())
    assert data["auc"] == report.auc
    assert data["mask_kind"] == "union"


def test_save_report_file_validates_schema(tmp_path):
    import jsonschema

    rows = {"detector-fc": _sample_report(), "entropy-baseline": _sample_report()}
    path = save_report_file(
        tmp_path / "report.json", "union", rows,
        dataset="/data/test", dataset_hash="a" * 16, version="0.1.0",
        config={"head": "fc"},
    )
    data = json.loads(path.read_text())
    jsonschema.validate(data, REPORT_FILE_SCHEMA)
    assert {r["name"] for r in data["rows"]} == set(rows)
    assert data["dataset_hash"] == "a" * 16

    with pytest.raises(InputError):
        save_report_file(tmp_path / "bad.json", "ood", rows, dataset="d",
                         dataset_hash="a" * 16, version="0.1.0")


def test_report_file_schema_rejects_bad_hash(tmp_path):
    import jsonschema

    rows = {"detector-fc": _sample_report()}
    path = save_report_file(tmp_path / "report.json", "union", rows,
                            dataset="d", dataset_hash="b" * 16, version="0.1.0")
    data = json.loads(path.read_text())
    data["dataset_hash"] = "not-hex!"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(data, REPORT_FILE_SCHEMA)
