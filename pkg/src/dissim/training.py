"""Detector objective and training loop.

The objective drives positive pairs (real patch with its aligned synthetic
render) toward dissimilarity 0 and negative pairs (real patch with a
semantically different synthetic patch) toward 1, as a bounded
cross-entropy:

    L = -( lambda_d * mean(log(1 - clamp(pos))) + mean(log(clamp(neg))) )

with scores clamped into [eps, 1-eps]. This keeps the optima of the
unbounded log-likelihood form (pos -> 0, neg -> 1) while staying finite at
saturated scores. L is linear in lambda_d: dL/dlambda_d =
-mean(log(1 - clamp(pos))) exactly.

Per-pixel heads reduce each patch's score map to its mean before the scores
enter the loss; scalar heads contribute their scalar directly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datasets import Dataset
from .errors import InputError, TrainingFailure
from .models import DissimilarityDetector, TransferDetector, build_detector, one_hot_labels, save_model
from .models.detector import DetectorConfig
from .patches import SyntheticImage, Triplet, build_triplets
from .seeding import derive_seed, rng
from .toyworld import ClassSet

__all__ = [
    "TrainConfig",
    "detector_loss",
    "detector_loss_terms",
    "triplets_from_dataset",
    "train_detector",
    "lambda_sweep",
    "DEFAULT_EPSILON",
    "DEFAULT_LAMBDA_VALUES",
]

DEFAULT_EPSILON = 1e-7
DEFAULT_LAMBDA_VALUES = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. lambda_d of None defers to the detector
    config's value; the optimizer is Adam with its standard defaults."""

    lambda_d: Optional[float] = None
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.lambda_d is not None and self.lambda_d <= 0:
            raise InputError(f"lambda_d must be positive, got {self.lambda_d}")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise InputError("batch_size and epochs must be at least 1")
        if not (0.0 < self.epsilon <= 1e-3):
            raise InputError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")

    def to_dict(self) -> dict:
        return {
            "lambda_d": self.lambda_d,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "epsilon": self.epsilon,
        }


def _as_score_tensor(scores, name: str) -> Optional[torch.Tensor]:
    if scores is None:
        return None
    if isinstance(scores, torch.Tensor):
        t = scores.reshape(-1)
    else:
        t = torch.as_tensor(list(scores), dtype=torch.float64).reshape(-1)
    if t.numel() == 0:
        return None
    with torch.no_grad():
        lo, hi = float(t.min()), float(t.max())
    if lo < 0.0 or hi > 1.0:
        raise InputError(f"{name} scores outside [0,1]: range [{lo}, {hi}]")
    return t


def detector_loss_terms(
    pos_scores,
    neg_scores,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(pos_term, neg_term) where pos_term = -mean(log(1-clamp(pos))) and
    neg_term = -mean(log(clamp(neg))); an absent side contributes 0."""
    if not (0.0 < epsilon <= 1e-3):
        raise InputError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    pos = _as_score_tensor(pos_scores, "positive")
    neg = _as_score_tensor(neg_scores, "negative")
    zero = torch.zeros((), dtype=pos.dtype if pos is not None else (neg.dtype if neg is not None else torch.float64))
    pos_term = -torch.log1p(-pos.clamp(epsilon, 1.0 - epsilon)).mean() if pos is not None else zero
    neg_term = -torch.log(neg.clamp(epsilon, 1.0 - epsilon)).mean() if neg is not None else zero
    return pos_term, neg_term


def detector_loss(
    pos_scores,
    neg_scores,
    lambda_d: float,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Bounded pair objective; see module docstring. Accepts plain
    sequences or tensors (gradients flow through tensor inputs)."""
    if lambda_d <= 0:
        raise InputError(f"lambda_d must be positive, got {lambda_d}")
    pos_term, neg_term = detector_loss_terms(pos_scores, neg_scores, epsilon)
    return lambda_d * pos_term + neg_term


# --------------------------------------------------------------------------
# Training data from a stored dataset
# --------------------------------------------------------------------------

def triplets_from_dataset(
    dataset: Dataset,
    generator: Callable[[np.ndarray, int], np.ndarray],
    patch_size: int,
    tau: float,
    seed: int,
    limit_images: int = 0,
) -> tuple[list[Triplet], int]:
    """Render each image's predicted labels through the generator and build
    the triplet set from the (real, synthetic) pairs.

    Images without predictions fall back to their ground-truth labels. The
    per-image render seed is derived from (seed, image index); negative
    sampling inside build_triplets uses its own (seed, image, patch)
    streams, so the two never collide.
    """
    images = list(dataset.images)
    if limit_images:
        images = images[:limit_images]
    if len(images) < 2:
        raise InputError(f"triplet building needs at least 2 images, got {len(images)}")
    synthetic = []
    for index, image in enumerate(images):
        labels = image.pred_labels if image.pred_labels is not None else image.labels
        rgb = generator(labels, derive_seed(seed, index))
        synthetic.append(SyntheticImage(rgb=rgb, labels=labels, id=image.id))
    return build_triplets(images, synthetic, patch_size, tau, seed)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _patch_tensor(patches: Sequence, indices: np.ndarray, attr: str) -> torch.Tensor:
    arrs = [getattr(patches[i], attr).rgb.transpose(2, 0, 1) for i in indices]
    return torch.from_numpy(np.stack(arrs))


def _condition_tensor(
    patches: Sequence, indices: np.ndarray, attr: str, class_set: ClassSet
) -> torch.Tensor:
    return torch.stack([one_hot_labels(getattr(patches[i], attr).labels, class_set) for i in indices])


def _reduce_scores(model: DissimilarityDetector, scores: torch.Tensor) -> torch.Tensor:
    if model.per_pixel:
        return scores.mean(dim=(-1, -2))
    return scores


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    pos_term: float
    neg_term: float


def train_detector(
    triplets: list[Triplet],
    detector,
    cfg: TrainConfig,
    run_dir: Optional[Path] = None,
    class_set: Optional[ClassSet] = None,
):
    """Mini-batch descent on the pair objective over triplets.

    Each triplet contributes its (anchor, positive) pair to the positive
    side and its (anchor, negative) pair to the negative side of every
    batch. Deterministic given cfg.seed. When run_dir is given it receives
    the resolved config, one checkpoint per epoch, and the loss curve CSV
    (epoch, mean_loss, pos_term, neg_term).

    Accepts a DissimilarityDetector or a TransferDetector; the latter needs
    class_set to one-hot its label conditions. Both pair sides are
    conditioned on label maps from the synthetic pool (the aligned
    prediction for the real side), never on ground truth, which can contain
    ids outside the condition channels.
    """
    if not triplets:
        raise InputError("cannot train on an empty triplet list")
    conditioned = isinstance(detector, TransferDetector)
    if conditioned and class_set is None:
        raise InputError("transfer detector training needs class_set for label conditioning")
    p = detector.config.patch_size if isinstance(detector, DissimilarityDetector) else detector.patch_size
    for t in triplets:
        t.validate(tau=0.0)
        if t.anchor.size != p:
            raise InputError(f"triplet patch size {t.anchor.size} != detector patch size {p}")
    if cfg.lambda_d is not None:
        lambda_d = cfg.lambda_d
    elif isinstance(detector, DissimilarityDetector):
        lambda_d = detector.config.lambda_d
    else:
        lambda_d = 1.0

    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        detector_cfg = detector.config.to_dict() if isinstance(detector, DissimilarityDetector) else detector.config_dict()
        (run_dir / "config.json").write_text(
            json.dumps(
                {"detector": detector_cfg, "train": cfg.to_dict(),
                 "resolved_lambda_d": lambda_d, "n_triplets": len(triplets)},
                indent=2, sort_keys=True,
            )
            + "\n"
        )

    torch.manual_seed(derive_seed(cfg.seed, 40))
    trainable = [q for q in detector.parameters() if q.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    order_rng = rng(cfg.seed, 41)
    detector.train()

    curve: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(triplets))
        loss_sum = pos_sum = neg_sum = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            anchors = _patch_tensor(triplets, idx, "anchor")
            positives = _patch_tensor(triplets, idx, "positive")
            negatives = _patch_tensor(triplets, idx, "negative")
            if conditioned:
                cond_aligned = _condition_tensor(triplets, idx, "positive", class_set)
                cond_negative = _condition_tensor(triplets, idx, "negative", class_set)
                pos_scores = detector(anchors, positives, cond_aligned, cond_aligned)
                neg_scores = detector(anchors, negatives, cond_aligned, cond_negative)
            else:
                pos_scores = _reduce_scores(detector, detector(anchors, positives))
                neg_scores = _reduce_scores(detector, detector(anchors, negatives))
            pos_term, neg_term = detector_loss_terms(pos_scores, neg_scores, cfg.epsilon)
            loss = lambda_d * pos_term + neg_term
            if not torch.isfinite(loss):
                raise TrainingFailure(
                    f"detector loss went non-finite at epoch {epoch}, batch {n_batches}",
                    summary={"epoch": epoch, "batch": n_batches,
                             "pos_term": pos_term.detach().item(), "neg_term": neg_term.detach().item()},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += loss.detach().item()
            pos_sum += pos_term.detach().item()
            neg_sum += neg_term.detach().item()
            n_batches += 1
        stats = EpochStats(
            epoch=epoch,
            mean_loss=loss_sum / n_batches,
            pos_term=pos_sum / n_batches,
            neg_term=neg_sum / n_batches,
        )
        curve.append(stats)
        if run_dir is not None:
            save_model(run_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt", detector)

    if run_dir is not None:
        with open(run_dir / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "pos_term", "neg_term"])
            for s in curve:
                writer.writerow([s.epoch, f"{s.mean_loss:.8f}", f"{s.pos_term:.8f}", f"{s.neg_term:.8f}"])
    detector.eval()
    return detector, curve


# --------------------------------------------------------------------------
# Lambda sweep
# --------------------------------------------------------------------------

def lambda_sweep(
    triplets: list[Triplet],
    detector_config: DetectorConfig,
    values: Sequence[float],
    eval_fn: Callable[[DissimilarityDetector], float],
    train_config: TrainConfig,
    run_dir: Optional[Path] = None,
) -> list[dict]:
    """Train one fresh detector per lambda value and evaluate each.

    Returns rows {lambda_d, f1, error}; training failures are recorded in
    the row and the sweep continues. Each run gets a seed derived from
    (train seed, value index), so runs are independent but reproducible.
    """
    if not values:
        raise InputError("lambda sweep needs at least one value")
    rows = []
    for i, value in enumerate(values):
        cfg = replace(train_config, lambda_d=None, seed=derive_seed(train_config.seed, 50, i))
        det_cfg = replace(detector_config, lambda_d=float(value))
        torch.manual_seed(derive_seed(cfg.seed, 40))
        model = build_detector(det_cfg)
        sub_dir = None
        if run_dir is not None:
            sub_dir = Path(run_dir) / f"lambda_{value:g}"
        try:
            model, _ = train_detector(triplets, model, cfg, run_dir=sub_dir)
            rows.append({"lambda_d": float(value), "f1": float(eval_fn(model)), "error": None})
        except TrainingFailure as exc:
            rows.append({"lambda_d": float(value), "f1": None, "error": str(exc)})
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "lambda_sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda_d", "f1", "error"])
            for row in rows:
                writer.writerow([
                    f"{row['lambda_d']:g}",
                    "" if row["f1"] is None else f"{row['f1']:.6f}",
                    row["error"] or "",
                ])
    return rows
