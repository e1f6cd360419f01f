"""Loss arithmetic, the training loop, and the lambda sweep."""

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from dissim.errors import InputError
from dissim.evaluation import oracle_generator
from dissim.models import (
    DetectorConfig,
    PatchDiscriminator,
    TransferDetector,
    build_detector,
    module_arrays,
)
from dissim.seeding import derive_seed
from dissim.training import (
    DEFAULT_EPSILON,
    TrainConfig,
    detector_loss,
    detector_loss_terms,
    lambda_sweep,
    train_detector,
    triplets_from_dataset,
)

TINY_DET = DetectorConfig(head="fc", patch_size=32, base_filters=2, conv_stacks=(1, 1, 0))


@pytest.fixture(scope="module")
def tiny_triplets(tiny_dataset):
    gen = oracle_generator(tiny_dataset.class_set)
    triplets, _ = triplets_from_dataset(tiny_dataset, gen, 32, 0.5, seed=0)
    assert len(triplets) >= 30
    return triplets


# ------------------------------------------------------------------- loss

def test_loss_hand_values():
    # lambda 1, pos [0.5], neg [0.5]: both terms are -ln(0.5)
    val = detector_loss([0.5], [0.5], 1.0).item()
    assert abs(val - 1.386294) < 1e-6
    # perfect detector: only the epsilon clamp keeps the value off zero
    val = detector_loss([0.0], [1.0], 1.0).item()
    assert abs(val) < 1e-6
    # lambda 2 doubles the positive term; clamped neg contributes ~epsilon
    val = detector_loss([0.5], [1.0], 2.0).item()
    assert abs(val - (-2.0 * math.log(0.5))) < 1e-5
    assert abs(val - 1.386294) < 1e-5


def test_loss_mean_reduces_each_side():
    pos, neg = [0.2, 0.4], [0.9, 0.7]
    expected = -(math.log(0.8) + math.log(0.6)) / 2 - (math.log(0.9) + math.log(0.7)) / 2
    assert abs(detector_loss(pos, neg, 1.0).item() - expected) < 1e-9


def test_loss_permutation_invariant():
    pos = [0.1, 0.5, 0.9, 0.33]
    neg = [0.6, 0.2, 0.8]
    a = detector_loss(pos, neg, 1.7).item()
    b = detector_loss(pos[::-1], neg[::-1], 1.7).item()
    assert a == b


def test_loss_monotonicity():
    base = detector_loss([0.5], [0.5], 1.0).item()
    assert detector_loss([0.6], [0.5], 1.0).item() > base
    assert detector_loss([0.5], [0.6], 1.0).item() < base


def test_loss_empty_sides():
    neg_only = detector_loss([], [0.5], 3.0).item()
    assert abs(neg_only - (-math.log(0.5))) < 1e-9
    pos_only = detector_loss([0.5], None, 3.0).item()
    assert abs(pos_only - (-3.0 * math.log(0.5))) < 1e-9
    assert detector_loss([], [], 1.0).item() == 0.0


def test_loss_linearity_in_lambda_by_finite_differences():
    pos, neg = [0.3, 0.7, 0.51], [0.2, 0.9]
    pos_term, _ = detector_loss_terms(pos, neg)
    h = 1e-3
    fd = (detector_loss(pos, neg, 1.0 + h) - detector_loss(pos, neg, 1.0 - h)) / (2 * h)
    assert abs(fd.item() - pos_term.item()) < 1e-8


def test_loss_gradients_flow_through_tensors():
    pos = torch.tensor([0.3, 0.6], dtype=torch.float64, requires_grad=True)
    neg = torch.tensor([0.8], dtype=torch.float64, requires_grad=True)
    detector_loss(pos, neg, 2.0).backward()
    # d/dpos of -2*mean(log(1-p)) is 2 / (2*(1-p))
    np.testing.assert_allclose(pos.grad.numpy(), [1.0 / 0.7, 1.0 / 0.4], rtol=1e-12)
    np.testing.assert_allclose(neg.grad.numpy(), [-1.0 / 0.8], rtol=1e-12)


def test_loss_rejects_out_of_range_scores():
    with pytest.raises(InputError):
        detector_loss([1.2], [0.5], 1.0)
    with pytest.raises(InputError):
        detector_loss([0.5], [-0.1], 1.0)
    with pytest.raises(InputError):
        detector_loss([0.5], [0.5], 0.0)
    with pytest.raises(InputError):
        detector_loss_terms([0.5], [0.5], epsilon=0.5)


def test_loss_clamp_keeps_extremes_finite():
    val = detector_loss([1.0], [0.0], 1.0).item()
    expected = -2.0 * math.log(DEFAULT_EPSILON)
    assert math.isfinite(val)
    assert abs(val - expected) < 1e-5


# ---------------------------------------------------------------- training

def test_train_detector_loss_decreases_majority_of_seeds(tiny_triplets):
    # near the constant-score saddle progress can stall for one unlucky
    # init, so this is asserted as a majority over seeds
    decreased = 0
    for seed in (0, 1, 2):
        cfg = TrainConfig(learning_rate=2e-3, batch_size=8, epochs=4, seed=seed)
        _, curve = train_detector(tiny_triplets, build_detector(TINY_DET), cfg)
        assert len(curve) == cfg.epochs
        decreased += curve[-1].mean_loss < curve[0].mean_loss
    assert decreased >= 2


def test_train_detector_reproduces_bitwise(tiny_triplets, tmp_path):
    # construction draws parameters from the ambient stream, so a rerun
    # seeds it the same way the CLI stage and lambda_sweep do
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=2, seed=5)
    torch.manual_seed(derive_seed(cfg.seed, 40))
    det, curve = train_detector(tiny_triplets, build_detector(TINY_DET), cfg,
                                run_dir=tmp_path / "runA")
    torch.manual_seed(derive_seed(cfg.seed, 40))
    det2, curve2 = train_detector(tiny_triplets, build_detector(TINY_DET), cfg,
                                  run_dir=tmp_path / "runB")
    assert [s.mean_loss for s in curve2] == [s.mean_loss for s in curve]
    for key, arr in module_arrays(det).items():
        np.testing.assert_array_equal(arr, module_arrays(det2)[key])
    a = (tmp_path / "runA" / "checkpoints" / "epoch_001.ckpt").read_bytes()
    b = (tmp_path / "runB" / "checkpoints" / "epoch_001.ckpt").read_bytes()
    assert a == b


def test_train_detector_run_dir_artifacts(tiny_triplets, tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=2, seed=1)
    run = tmp_path / "run"
    train_detector(tiny_triplets, build_detector(TINY_DET), cfg, run_dir=run)
    config = json.loads((run / "config.json").read_text())
    assert config["train"]["epochs"] == 2
    assert config["detector"]["head"] == "fc"
    assert config["resolved_lambda_d"] == TINY_DET.lambda_d
    assert config["n_triplets"] == len(tiny_triplets)
    ckpts = sorted(p.name for p in (run / "checkpoints").iterdir())
    assert ckpts == ["epoch_000.ckpt", "epoch_001.ckpt"]
    with open(run / "loss_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_loss", "pos_term", "neg_term"]
    assert len(rows) == 1 + cfg.epochs


def test_train_detector_rejects_empty_and_mismatched(tiny_triplets):
    cfg = TrainConfig(epochs=1)
    with pytest.raises(InputError):
        train_detector([], build_detector(TINY_DET), cfg)
    wrong = DetectorConfig(head="fc", patch_size=16, base_filters=2, conv_stacks=(1, 1, 0))
    with pytest.raises(InputError):
        train_detector(tiny_triplets, build_detector(wrong), cfg)


def test_train_config_lambda_overrides_detector(tiny_triplets, tmp_path):
    cfg = TrainConfig(lambda_d=2.5, epochs=1, seed=2)
    run = tmp_path / "run"
    train_detector(tiny_triplets[:16], build_detector(TINY_DET), cfg, run_dir=run)
    config = json.loads((run / "config.json").read_text())
    assert config["resolved_lambda_d"] == 2.5


def test_train_transfer_detector_only_touches_decision_stack(tiny_dataset, tiny_triplets):
    cs = tiny_dataset.class_set
    n_ch = len(cs.prob_channel_ids)
    det = TransferDetector(PatchDiscriminator(n_ch, base=4), 32, n_ch)
    frozen_before = {k: v.copy() for k, v in module_arrays(det.frozen).items()}
    decision_before = {k: v.copy() for k, v in module_arrays(det.decision).items()}
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=1, seed=3)
    det, curve = train_detector(tiny_triplets[:32], det, cfg, class_set=cs)
    assert len(curve) == 1
    for key, arr in module_arrays(det.frozen).items():
        np.testing.assert_array_equal(arr, frozen_before[key])
    assert any(
        not np.array_equal(arr, decision_before[key])
        for key, arr in module_arrays(det.decision).items()
    )


def test_train_transfer_detector_needs_class_set(tiny_triplets):
    det = TransferDetector(PatchDiscriminator(8, base=4), 32, 8)
    with pytest.raises(InputError):
        train_detector(tiny_triplets[:8], det, TrainConfig(epochs=1))


# ---------------------------------------------------------------- triplets

def test_triplets_from_dataset_limit_and_errors(tiny_dataset):
    gen = oracle_generator(tiny_dataset.class_set)
    limited, _ = triplets_from_dataset(tiny_dataset, gen, 32, 0.5, seed=0, limit_images=3)
    ids = {t.anchor.origin.image_id for t in limited}
    assert ids <= {im.id for im in tiny_dataset.images[:3]}
    with pytest.raises(InputError):
        triplets_from_dataset(tiny_dataset, gen, 32, 0.5, seed=0, limit_images=1)


def test_triplets_from_dataset_is_seed_deterministic(tiny_dataset):
    gen = oracle_generator(tiny_dataset.class_set)
    a, skipped_a = triplets_from_dataset(tiny_dataset, gen, 32, 0.5, seed=9)
    b, skipped_b = triplets_from_dataset(tiny_dataset, gen, 32, 0.5, seed=9)
    assert skipped_a == skipped_b
    assert [t.negative.origin for t in a] == [t.negative.origin for t in b]
    np.testing.assert_array_equal(a[0].positive.rgb, b[0].positive.rgb)


# ------------------------------------------------------------------- sweep

def test_lambda_sweep_rows_and_csv(tiny_triplets, tiny_dataset, tmp_path):
    gen = oracle_generator(tiny_dataset.class_set)

    def eval_fn(model):
        from dissim.evaluation import evaluate_detector
        report = evaluate_detector(model, tiny_dataset, gen, mask_kind="union",
                                   patch_size=32, seed=0)
        return report.best_f1[1]

    cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=1, seed=4)
    values = (0.5, 1.0)
    rows = lambda_sweep(tiny_triplets[:48], TINY_DET, values, eval_fn, cfg,
                        run_dir=tmp_path / "sweep")
    assert [r["lambda_d"] for r in rows] == list(values)
    assert all(r["error"] is None and 0.0 <= r["f1"] <= 1.0 for r in rows)
    with open(tmp_path / "sweep" / "lambda_sweep.csv") as fh:
        csv_rows = list(csv.reader(fh))
    assert len(csv_rows) == 1 + len(values)
    for row, expected in zip(csv_rows[1:], rows):
        assert float(row[1]) == pytest.approx(expected["f1"], abs=1e-6)

    again = lambda_sweep(tiny_triplets[:48], TINY_DET, values, eval_fn, cfg)
    assert [r["f1"] for r in again] == [r["f1"] for r in rows]


def test_lambda_sweep_rejects_empty_values(tiny_triplets):
    with pytest.raises(InputError):
        lambda_sweep(tiny_triplets[:8], TINY_DET, (), lambda m: 0.0, TrainConfig(epochs=1))
