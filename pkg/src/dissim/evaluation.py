"""Ground-truth masks, dissimilarity map assembly, the softmax-entropy
baseline, and ROC/AUC/F1 metrics.

AUC is computed from a descending-score threshold sweep with grouped
thresholds, but the trapezoid sum is carried out in integer arithmetic over
true/false positive counts, so it coincides exactly (same rational number,
same float64 division) with the pairwise definition
P(score_pos > score_neg) + 0.5 * P(equal). Constant detectors therefore
score exactly 0.5.

Pixel pooling across a dataset walks images in manifest order and
concatenates in that order, so reports are reproducible run to run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np
import torch

from .datasets import Dataset, tree_hash
from .errors import InputError, UndefinedMetricError
from .models.cgan import ToyGenerator, generate_rgb, one_hot_labels
from .models.detector import DiscriminatorScorer, DissimilarityDetector, TransferDetector
from .patches import PatchLayout, extract_patches
from .seeding import derive_seed
from .toyworld import ClassSet, LabeledImage, render_from_labels

__all__ = [
    "MASK_KINDS",
    "DissimilarityMap",
    "EvalReport",
    "ConstantDetector",
    "build_masks",
    "select_mask",
    "assemble_map",
    "softmax_entropy_map",
    "roc_auc",
    "f1_at",
    "f1_sweep",
    "oracle_generator",
    "learned_generator",
    "image_dissimilarity",
    "evaluate_detector",
    "evaluate_entropy_baseline",
    "save_report",
    "save_report_file",
    "REPORT_SCHEMA",
    "REPORT_FILE_SCHEMA",
]

MASK_KINDS = ("ood", "misclass", "union")
DEFAULT_F1_THRESHOLDS = 99


def build_masks(image: LabeledImage, class_set: ClassSet):
    """(ood, misclass, union) boolean masks for one image.

    ood marks pixels whose ground-truth class never appears in training;
    misclass marks in-distribution pixels where the prediction disagrees
    with the ground truth (OoD pixels are excluded: the prediction cannot
    name their class, so the disagreement there is structural, not a
    segmentation mistake); union is the elementwise OR of the two.
    """
    if image.pred_labels is None:
        raise InputError(f"image {image.id!r} has no prediction; misclassification masks need one")
    ood = class_set.ood_mask(image.labels)
    misclass = (image.pred_labels != image.labels) & ~ood
    union = ood | misclass
    return ood, misclass, union


def select_mask(image: LabeledImage, class_set: ClassSet, mask_kind: str) -> np.ndarray:
    if mask_kind not in MASK_KINDS:
        raise InputError(f"unknown mask kind {mask_kind!r}, expected one of {MASK_KINDS}")
    ood, misclass, union = build_masks(image, class_set)
    return {"ood": ood, "misclass": misclass, "union": union}[mask_kind]


@dataclass(frozen=True, eq=False)
class DissimilarityMap:
    """Per-pixel dissimilarity scores for one image.

    values are in [0, 1]; scored is False on cropped border bands, and those
    pixels must never enter metrics. kind records whether the head produced
    score patches ("per_pixel") or one scalar per patch broadcast across it
    ("scalar").
    """

    values: np.ndarray
    scored: np.ndarray
    kind: str
    layout: PatchLayout


def assemble_map(patch_scores, layout: PatchLayout) -> DissimilarityMap:
    """Inverse of patch extraction for scores: place per-pixel score patches
    at their origins, broadcast scalar scores across their patch, and flag
    cropped bands unscored."""
    if len(patch_scores) != layout.n_patches:
        raise InputError(f"{len(patch_scores)} scores for a grid of {layout.n_patches} patches")
    p = layout.patch_size
    values = np.zeros((layout.height, layout.width), dtype=np.float64)
    scored = np.zeros((layout.height, layout.width), dtype=bool)
    kinds = set()
    for index, score in enumerate(patch_scores):
        row, col = layout.origin_of(index)
        arr = np.asarray(score, dtype=np.float64)
        if arr.ndim == 0:
            values[row:row + p, col:col + p] = float(arr)
            kinds.add("scalar")
        elif arr.shape == (p, p):
            values[row:row + p, col:col + p] = arr
            kinds.add("per_pixel")
        else:
            raise InputError(f"patch score {index} has shape {arr.shape}, expected scalar or ({p}, {p})")
        scored[row:row + p, col:col + p] = True
    if len(kinds) != 1:
        raise InputError("mixed scalar and per-pixel patch scores in one map")
    lo, hi = float(values[scored].min()), float(values[scored].max())
    if lo < 0.0 or hi > 1.0:
        raise InputError(f"scores outside [0, 1]: range [{lo}, {hi}]")
    return DissimilarityMap(values=values, scored=scored, kind=kinds.pop(), layout=layout)


def softmax_entropy_map(pred_probs: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy (natural log) of a class distribution
    field; 0 * log 0 is taken as 0."""
    p = np.asarray(pred_probs, dtype=np.float64)
    if p.ndim != 3:
        raise InputError(f"expected H x W x C probabilities, got shape {p.shape}")
    if p.min() < 0.0:
        raise InputError("negative probabilities")
    sums = p.sum(axis=-1)
    worst = float(np.abs(sums - 1.0).max())
    if worst > 1e-6:
        raise InputError(f"probability rows deviate from 1 by {worst:.3e} (> 1e-6)")
    safe = np.where(p > 0.0, p, 1.0)
    return np.maximum(-(p * np.log(safe)).sum(axis=-1), 0.0)


def _binary_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise UndefinedMetricError("no samples")
    uniq = np.unique(y)
    if not np.isin(uniq, (0, 1)).all():
        raise InputError(f"labels must be 0/1, found {uniq[:8].tolist()}")
    if uniq.size < 2:
        raise UndefinedMetricError(f"labels are single-class (all {int(uniq[0])}); metric undefined")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> tuple[list[tuple[float, float]], float]:
    """ROC points (grouped descending thresholds) and the trapezoid AUC.

    The trapezoid sum runs over integer TP/FP counts, which makes it equal,
    exactly, to the pairwise probability P(s1 > s0) + 0.5 P(s1 = s0).
    """
    s, y = _binary_arrays(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    group_ends = np.append(np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1)
    tp = np.concatenate([[0], np.cumsum(y_sorted, dtype=np.int64)[group_ends]])
    fp = np.concatenate([[0], (group_ends + 1) - np.cumsum(y_sorted, dtype=np.int64)[group_ends]])
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    numerator = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]), dtype=np.int64))
    auc = numerator / (2.0 * n_pos * n_neg)
    roc = list(zip((fp / n_neg).tolist(), (tp / n_pos).tolist()))
    return roc, auc


def f1_at(scores, labels, threshold: float) -> float:
    """F1 of (score >= threshold) against the error class; 0 when no
    prediction and no positive overlap exists."""
    s, y = _binary_arrays(scores, labels)
    predicted = s >= threshold
    tp = int((predicted & (y == 1)).sum())
    fp = int((predicted & (y == 0)).sum())
    fn = int((~predicted & (y == 1)).sum())
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def f1_sweep(scores, labels, n_thresholds: int = DEFAULT_F1_THRESHOLDS):
    """F1 over evenly spaced thresholds in (0, 1); returns (curve, best).

    best is (threshold, f1) at the first maximum, so ties resolve to the
    lowest threshold deterministically.
    """
    if n_thresholds < 1:
        raise InputError("need at least one threshold")
    s, y = _binary_arrays(scores, labels)
    thresholds = np.arange(1, n_thresholds + 1, dtype=np.float64) / (n_thresholds + 1)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    pos_prefix = np.concatenate([[0], np.cumsum(y[order], dtype=np.int64)])
    n, n_pos = s.size, int(pos_prefix[-1])
    idx = np.searchsorted(s_sorted, thresholds, side="left")
    tp = n_pos - pos_prefix[idx]
    predicted = n - idx
    fp = predicted - tp
    fn = n_pos - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    best_i = int(np.argmax(f1))
    curve = list(zip(thresholds.tolist(), f1.tolist()))
    return curve, (float(thresholds[best_i]), float(f1[best_i]))


@dataclass
class EvalReport:
    """Pixel-level detection metrics for one detector on one dataset."""

    mask_kind: str
    roc: list[tuple[float, float]]
    auc: float
    f1_curve: list[tuple[float, float]]
    best_f1: tuple[float, float]
    counts: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        """ROC endpoint/monotonicity and trapezoid-consistency invariants."""
        if self.roc[0] != (0.0, 0.0) or self.roc[-1] != (1.0, 1.0):
            raise InputError(f"ROC endpoints {self.roc[0]}..{self.roc[-1]}, expected (0,0)..(1,1)")
        pts = np.asarray(self.roc, dtype=np.float64)
        if (np.diff(pts[:, 0]) < 0).any() or (np.diff(pts[:, 1]) < 0).any():
            raise InputError("ROC coordinates must be nondecreasing")
        area = float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1])) / 2.0)
        if abs(area - self.auc) > 1e-9:
            raise InputError(f"AUC {self.auc} inconsistent with ROC trapezoid {area}")

    def to_dict(self) -> dict:
        return {
            "mask_kind": self.mask_kind,
            "auc": self.auc,
            "roc": [[float(a), float(b)] for a, b in self.roc],
            "f1_curve": [[float(a), float(b)] for a, b in self.f1_curve],
            "best_f1": [float(self.best_f1[0]), float(self.best_f1[1])],
            "counts": {k: int(v) for k, v in self.counts.items()},
            "meta": self.meta,
        }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["mask_kind", "auc", "roc", "f1_curve", "best_f1", "counts", "meta"],
    "additionalProperties": False,
    "properties": {
        "mask_kind": {"enum": list(MASK_KINDS)},
        "auc": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "roc": {
            "type": "array",
            "minItems": 2,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "f1_curve": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "best_f1": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "counts": {"type": "object", "additionalProperties": {"type": "integer"}},
        "meta": {"type": "object"},
    },
}


def save_report(report: EvalReport, path: Path) -> Path:
    report.check()
    payload = report.to_dict()
    jsonschema.validate(payload, REPORT_SCHEMA)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return path


def _report_row_schema() -> dict:
    row = copy.deepcopy(REPORT_SCHEMA)
    row["properties"]["name"] = {"type": "string", "minLength": 1}
    row["required"] = ["name"] + row["required"]
    return row


REPORT_FILE_SCHEMA = {
    "type": "object",
    "required": ["mask_kind", "dataset", "dataset_hash", "version", "config", "rows"],
    "additionalProperties": False,
    "properties": {
        "mask_kind": {"enum": list(MASK_KINDS)},
        "dataset": {"type": "string"},
        "dataset_hash": {"type": "string", "pattern": "^[0-9a-f]{16,64}$"},
        "version": {"type": "string"},
        "config": {"type": "object", "additionalProperties": {"type": "string"}},
        "rows": {"type": "array", "minItems": 1, "items": _report_row_schema()},
    },
}


def save_report_file(
    path: Path,
    mask_kind: str,
    rows: dict[str, EvalReport],
    dataset: str,
    dataset_hash: str,
    version: str,
    config: Optional[dict[str, str]] = None,
) -> Path:
    """Write several named evaluation rows (detector, baselines) that share
    one mask kind and dataset into a single schema-validated JSON file."""
    if mask_kind not in MASK_KINDS:
        raise InputError(f"unknown mask kind {mask_kind!r}, expected one of {MASK_KINDS}")
    if not rows:
        raise InputError("report file needs at least one row")
    serialized = []
    for name, report in rows.items():
        report.check()
        if report.mask_kind != mask_kind:
            raise InputError(
                f"row {name!r} evaluates mask {report.mask_kind!r}, file declares {mask_kind!r}"
            )
        serialized.append({"name": name, **report.to_dict()})
    payload = {
        "mask_kind": mask_kind,
        "dataset": str(dataset),
        "dataset_hash": dataset_hash,
        "version": version,
        "config": {k: str(v) for k, v in (config or {}).items()},
        "rows": serialized,
    }
    jsonschema.validate(payload, REPORT_FILE_SCHEMA)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return path


class ConstantDetector:
    """Harness detector: every patch scores the same value. A constant
    output ties every pixel pair, so AUC must come out exactly 0.5."""

    per_pixel = False

    def __init__(self, value: float = 0.5, patch_size: int = 64):
        if not (0.0 <= value <= 1.0):
            raise InputError(f"constant score {value} outside [0, 1]")
        self.value = value
        self.patch_size = patch_size

    def __call__(self, real: torch.Tensor, synthetic: torch.Tensor) -> torch.Tensor:
        return torch.full((real.shape[0],), self.value, dtype=real.dtype)


def oracle_generator(class_set: ClassSet, noise_level: float = 0.0) -> Callable[[np.ndarray, int], np.ndarray]:
    """Deterministic label-to-RGB callable standing in for the learned
    generator; with noise_level 0 the seed argument is inert."""
    def generate(labels: np.ndarray, seed: int) -> np.ndarray:
        return render_from_labels(labels, class_set, seed, noise_level=noise_level)
    return generate


def learned_generator(generator: ToyGenerator, class_set: ClassSet) -> Callable[[np.ndarray, int], np.ndarray]:
    def generate(labels: np.ndarray, seed: int) -> np.ndarray:
        del seed
        return generate_rgb(generator, labels, class_set)
    return generate


def _detector_patch_size(detector) -> Optional[int]:
    if isinstance(detector, DissimilarityDetector):
        return detector.config.patch_size
    return getattr(detector, "patch_size", None)


def _score_patch_batch(detector, real: torch.Tensor, synthetic: torch.Tensor,
                       condition: Optional[torch.Tensor]) -> torch.Tensor:
    if isinstance(detector, TransferDetector):
        return detector(real, synthetic, condition, condition)
    if isinstance(detector, DiscriminatorScorer):
        return detector(synthetic, condition)
    return detector(real, synthetic)


def _needs_condition(detector) -> bool:
    return isinstance(detector, (TransferDetector, DiscriminatorScorer))


def image_dissimilarity(
    detector,
    image: LabeledImage,
    synthetic: np.ndarray,
    class_set: ClassSet,
    patch_size: int,
) -> DissimilarityMap:
    """Score one image against its synthetic render, patch by patch.

    Cuts both images into the same grid, runs the detector on every pair
    (with one-hot predicted-label conditions for detectors that take them),
    and assembles the resulting per-patch outputs into a map.
    """
    if synthetic.shape != image.rgb.shape:
        raise InputError(
            f"generator returned shape {synthetic.shape} for image {image.id!r} of shape {image.rgb.shape}"
        )
    real_patches, layout = extract_patches(image.rgb.astype(np.float32) / 255.0, patch_size)
    syn_patches, _ = extract_patches(synthetic.astype(np.float32) / 255.0, patch_size)
    real_t = torch.from_numpy(np.stack(real_patches)).permute(0, 3, 1, 2)
    syn_t = torch.from_numpy(np.stack(syn_patches)).permute(0, 3, 1, 2)
    condition = None
    if _needs_condition(detector):
        if image.pred_labels is None:
            raise InputError(f"image {image.id!r} has no predicted labels to condition on")
        pred_patches, _ = extract_patches(image.pred_labels, patch_size)
        condition = torch.stack([one_hot_labels(p, class_set) for p in pred_patches])
    with torch.no_grad():
        out = _score_patch_batch(detector, real_t, syn_t, condition)
    scores = out.numpy().astype(np.float64)
    patch_scores = list(scores) if scores.ndim == 3 else [float(v) for v in scores]
    return assemble_map(patch_scores, layout)


def evaluate_detector(
    detector,
    dataset: Dataset,
    generator: Callable[[np.ndarray, int], np.ndarray],
    mask_kind: str = "union",
    patch_size: int = 64,
    seed: int = 0,
    meta: Optional[dict] = None,
) -> EvalReport:
    """Score every image and pool pixels against the chosen mask.

    Per image: re-render the predicted labels through the generator, cut
    real and synthetic into the same patch grid, run the detector on each
    pair, assemble the dissimilarity map, and collect scored pixels. The
    pass is deterministic given the seed (used only to derive per-image
    generator seeds).
    """
    if mask_kind not in MASK_KINDS:
        raise InputError(f"unknown mask kind {mask_kind!r}, expected one of {MASK_KINDS}")
    if len(dataset) == 0:
        raise InputError("empty dataset")
    if not dataset.has_predictions:
        raise InputError("dataset has no predictions; evaluation renders from predicted labels")
    expected = _detector_patch_size(detector)
    if expected is not None and expected != patch_size:
        raise InputError(f"detector expects {expected}-pixel patches, asked to run at {patch_size}")

    pooled_scores: list[np.ndarray] = []
    pooled_truth: list[np.ndarray] = []
    unscored = 0
    per_pixel = None
    for index, image in enumerate(dataset.images):
        synthetic = generator(image.pred_labels, derive_seed(seed, index))
        dmap = image_dissimilarity(detector, image, synthetic, dataset.class_set, patch_size)
        per_pixel = dmap.kind == "per_pixel"
        mask = select_mask(image, dataset.class_set, mask_kind)
        pooled_scores.append(dmap.values[dmap.scored])
        pooled_truth.append(mask[dmap.scored].astype(np.int64))
        unscored += int((~dmap.scored).sum())

    scores = np.concatenate(pooled_scores)
    truth = np.concatenate(pooled_truth)
    roc, auc = roc_auc(scores, truth)
    f1_curve, best = f1_sweep(scores, truth)
    counts = {
        "pixels": int(scores.size),
        "positives": int(truth.sum()),
        "negatives": int(scores.size - truth.sum()),
        "unscored": unscored,
    }
    info = {
        "detector": type(detector).__name__,
        "score_kind": "per_pixel" if per_pixel else "scalar",
        "patch_size": patch_size,
        "seed": seed,
        "n_images": len(dataset),
    }
    if isinstance(detector, DissimilarityDetector):
        info["head"] = detector.config.head
    if dataset.path is not None:
        info["dataset"] = str(dataset.path)
        info["dataset_hash"] = tree_hash(dataset.path)
    if meta:
        info.update(meta)
    report = EvalReport(mask_kind=mask_kind, roc=roc, auc=auc, f1_curve=f1_curve,
                        best_f1=best, counts=counts, meta=info)
    report.check()
    return report


def evaluate_entropy_baseline(
    dataset: Dataset,
    mask_kind: str = "misclass",
    meta: Optional[dict] = None,
) -> EvalReport:
    """Softmax-entropy uncertainty as the detector score.

    Entropy is divided by ln(C) so scores land in [0, 1] and the F1
    threshold sweep runs on the same axis as head scores; the rescale is
    strictly monotone, so ROC and AUC are unaffected by it.
    """
    if mask_kind not in MASK_KINDS:
        raise InputError(f"unknown mask kind {mask_kind!r}, expected one of {MASK_KINDS}")
    if len(dataset) == 0:
        raise InputError("empty dataset")
    n_channels = len(dataset.class_set.prob_channel_ids)
    scale = float(np.log(n_channels))
    pooled_scores: list[np.ndarray] = []
    pooled_truth: list[np.ndarray] = []
    for image in dataset.images:
        if image.pred_probs is None:
            raise InputError(f"image {image.id!r} has no probability field; the entropy baseline needs one")
        entropy = softmax_entropy_map(image.pred_probs) / scale
        mask = select_mask(image, dataset.class_set, mask_kind)
        pooled_scores.append(np.minimum(entropy, 1.0).ravel())
        pooled_truth.append(mask.astype(np.int64).ravel())
    scores = np.concatenate(pooled_scores)
    truth = np.concatenate(pooled_truth)
    roc, auc = roc_auc(scores, truth)
    f1_curve, best = f1_sweep(scores, truth)
    counts = {
        "pixels": int(scores.size),
        "positives": int(truth.sum()),
        "negatives": int(scores.size - truth.sum()),
        "unscored": 0,
    }
    info = {"detector": "softmax-entropy", "score_kind": "per_pixel", "n_images": len(dataset)}
    if dataset.path is not None:
        info["dataset"] = str(dataset.path)
        info["dataset_hash"] = tree_hash(dataset.path)
    if meta:
        info.update(meta)
    report = EvalReport(mask_kind=mask_kind, roc=roc, auc=auc, f1_curve=f1_curve,
                        best_f1=best, counts=counts, meta=info)
    report.check()
    return report
