"""Patch extraction, semantic-difference gating, and triplet assembly.

A triplet pairs a real patch (anchor) with its aligned synthetic render
(positive) and a synthetic patch from a different origin (negative). The
negative is accepted only when its label patch differs from the anchor's on
at least a fraction tau of positions, evaluated BEFORE augmentation: the
gate compares content, not orientation. Flips are then applied jointly to
rgb and labels, so the stored semantic_diff refers to the pre-flip
comparison; flips being involutions, tests can undo them to re-verify.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import InputError, SamplingExhausted
from .seeding import derive_seed, rng

__all__ = [
    "Patch",
    "PatchLayout",
    "PatchOrigin",
    "Triplet",
    "SyntheticImage",
    "PatchPool",
    "AugmentParams",
    "extract_patches",
    "semantic_difference",
    "augment",
    "augment_with_params",
    "sample_negative",
    "build_triplets",
    "materialize_triplets",
    "MIN_PATCH_SIZE",
]

MIN_PATCH_SIZE = 8
DEFAULT_MAX_TRIES = 64


@dataclass(frozen=True)
class PatchOrigin:
    image_id: str
    row: int
    col: int

    def __str__(self) -> str:
        return f"{self.image_id}:{self.row}:{self.col}"


@dataclass(frozen=True)
class PatchLayout:
    """Grid geometry of non-overlapping patches over one image."""

    height: int
    width: int
    patch_size: int
    rows: int
    cols: int
    cropped_rows: int
    cropped_cols: int

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def origin_of(self, index: int) -> tuple[int, int]:
        if not (0 <= index < self.n_patches):
            raise InputError(f"patch index {index} outside grid of {self.n_patches}")
        return (index // self.cols) * self.patch_size, (index % self.cols) * self.patch_size


def plan_layout(height: int, width: int, patch_size: int) -> PatchLayout:
    if patch_size < MIN_PATCH_SIZE:
        raise InputError(f"patch size {patch_size} below minimum {MIN_PATCH_SIZE}")
    if patch_size > min(height, width):
        raise InputError(f"patch size {patch_size} exceeds image extent {height}x{width}")
    rows, cols = height // patch_size, width // patch_size
    return PatchLayout(
        height=height,
        width=width,
        patch_size=patch_size,
        rows=rows,
        cols=cols,
        cropped_rows=height - rows * patch_size,
        cropped_cols=width - cols * patch_size,
    )


def extract_patches(array: np.ndarray, patch_size: int) -> tuple[list[np.ndarray], PatchLayout]:
    """Row-major non-overlapping patch grid; remainder bands are cropped
    and recorded in the layout."""
    if array.ndim < 2:
        raise InputError("array must have at least two dimensions")
    layout = plan_layout(array.shape[0], array.shape[1], patch_size)
    p = patch_size
    out = [
        array[r * p:(r + 1) * p, c * p:(c + 1) * p].copy()
        for r in range(layout.rows)
        for c in range(layout.cols)
    ]
    return out, layout


@dataclass(frozen=True)
class AugmentParams:
    brightness: float
    contrast: float
    hflip: bool
    vflip: bool

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(brightness=0.0, contrast=1.0, hflip=False, vflip=False)

    @classmethod
    def draw(cls, r: np.random.Generator) -> "AugmentParams":
        return cls(
            brightness=float(r.uniform(-0.2, 0.2)),
            contrast=float(r.uniform(0.8, 1.25)),
            hflip=bool(r.random() < 0.5),
            vflip=bool(r.random() < 0.5),
        )


@dataclass(frozen=True, eq=False)
class Patch:
    """One P x P patch. rgb is float in [0,1]; labels are class ids.

    `augmented` records the applied photometric/flip parameters, or None for
    a raw extraction. Offsets are multiples of the patch size.
    """

    rgb: np.ndarray
    labels: np.ndarray
    origin: PatchOrigin
    source: str  # "real" or "synthetic"
    augmented: Optional[AugmentParams] = None

    def __post_init__(self):
        p = self.labels.shape[0]
        if self.labels.shape != (p, p) or self.rgb.shape != (p, p, 3):
            raise InputError(f"patch arrays disagree: rgb {self.rgb.shape}, labels {self.labels.shape}")
        if self.source not in ("real", "synthetic"):
            raise InputError(f"patch source must be real or synthetic, got {self.source!r}")
        if self.origin.row % p or self.origin.col % p:
            raise InputError(f"origin {self.origin} not aligned to patch size {p}")
        lo, hi = float(self.rgb.min()), float(self.rgb.max())
        if lo < 0.0 or hi > 1.0:
            raise InputError(f"patch rgb outside [0,1]: [{lo}, {hi}]")

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def patch_from_arrays(
    rgb: np.ndarray,
    labels: np.ndarray,
    origin: PatchOrigin,
    source: str,
) -> Patch:
    if rgb.dtype == np.uint8:
        rgb = rgb.astype(np.float32) / 255.0
    return Patch(rgb=np.ascontiguousarray(rgb, dtype=np.float32), labels=labels, origin=origin, source=source)


@dataclass(frozen=True, eq=False)
class Triplet:
    anchor: Patch
    positive: Patch
    negative: Patch
    semantic_diff: float

    def validate(self, tau: float) -> None:
        if self.anchor.source != "real":
            raise InputError("anchor must be a real patch")
        if self.positive.source != "synthetic" or self.negative.source != "synthetic":
            raise InputError("positive and negative must be synthetic patches")
        if self.positive.origin != self.anchor.origin:
            raise InputError("positive origin differs from anchor origin")
        if self.negative.origin == self.anchor.origin:
            raise InputError("negative shares the anchor origin")
        neg_labels = undo_flips(self.negative)
        diff = semantic_difference(self.anchor.labels, neg_labels)
        if abs(diff - self.semantic_diff) > 1e-12:
            raise InputError(f"stored semantic_diff {self.semantic_diff} != recomputed {diff}")
        if diff < tau:
            raise InputError(f"semantic_diff {diff} below gate {tau}")


def undo_flips(patch: Patch) -> np.ndarray:
    """Label patch with any augmentation flips undone (flips are involutions)."""
    labels = patch.labels
    if patch.augmented is not None:
        if patch.augmented.vflip:
            labels = labels[::-1, :]
        if patch.augmented.hflip:
            labels = labels[:, ::-1]
    return labels


# --------------------------------------------------------------------------
# Semantic gate and augmentation
# --------------------------------------------------------------------------

def semantic_difference(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Fraction of positions whose class ids differ."""
    if labels_a.shape != labels_b.shape:
        raise InputError(f"label shapes differ: {labels_a.shape} vs {labels_b.shape}")
    return float(np.mean(labels_a != labels_b))


def augment_with_params(patch: Patch, params: AugmentParams) -> Patch:
    if params.brightness == 0.0 and params.contrast == 1.0:
        rgb = patch.rgb
    else:
        rgb = np.clip((patch.rgb - 0.5) * params.contrast + 0.5 + params.brightness, 0.0, 1.0)
    labels = patch.labels
    if params.hflip:
        rgb = rgb[:, ::-1]
        labels = labels[:, ::-1]
    if params.vflip:
        rgb = rgb[::-1, :]
        labels = labels[::-1, :]
    return Patch(
        rgb=np.ascontiguousarray(rgb, dtype=np.float32),
        labels=np.ascontiguousarray(labels),
        origin=patch.origin,
        source=patch.source,
        augmented=params,
    )


def augment(patch: Patch, seed: int) -> Patch:
    """Random brightness/contrast jitter plus joint rgb+label flips."""
    return augment_with_params(patch, AugmentParams.draw(rng(seed, 3)))


# --------------------------------------------------------------------------
# Negative sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticImage:
    """A generator output: rgb plus the label map it was rendered from."""

    rgb: np.ndarray
    labels: np.ndarray
    id: str


class PatchPool:
    """Synthetic patches addressable by (image index, patch index)."""

    def __init__(self, images: list[SyntheticImage], patch_size: int):
        if len(images) < 2:
            raise InputError(f"negative sampling needs at least 2 synthetic images, got {len(images)}")
        self.images = images
        self.patch_size = patch_size
        self.layouts = [plan_layout(im.labels.shape[0], im.labels.shape[1], patch_size) for im in images]

    @property
    def n_images(self) -> int:
        return len(self.images)

    def get(self, image_index: int, patch_index: int) -> Patch:
        im = self.images[image_index]
        row, col = self.layouts[image_index].origin_of(patch_index)
        p = self.patch_size
        return patch_from_arrays(
            im.rgb[row:row + p, col:col + p],
            im.labels[row:row + p, col:col + p],
            PatchOrigin(im.id, row, col),
            source="synthetic",
        )

    def get_labels(self, image_index: int, patch_index: int) -> np.ndarray:
        im = self.images[image_index]
        row, col = self.layouts[image_index].origin_of(patch_index)
        p = self.patch_size
        return im.labels[row:row + p, col:col + p]


def sample_negative(
    positive: Patch,
    pool: PatchPool,
    tau: float,
    seed: int,
    max_tries: int = DEFAULT_MAX_TRIES,
) -> Patch:
    """Draw an augmented synthetic patch whose labels differ from the given
    patch's on at least a fraction tau of positions.

    Candidates come from other images first; after max_tries // 2 rejections
    the anchor's own image becomes eligible (different origin only). On
    exhaustion the error carries the best difference seen, a signal that tau
    is too high for the pool.
    """
    if not (0.0 < tau <= 1.0):
        raise InputError(f"tau {tau} outside (0, 1]")
    if max_tries < 1:
        raise InputError("max_tries must be positive")
    r = rng(seed, 7)
    best = -1.0
    for attempt in range(max_tries):
        image_index = int(r.integers(pool.n_images))
        image = pool.images[image_index]
        same_image = image.id == positive.origin.image_id
        if same_image and attempt < max_tries // 2:
            continue
        patch_index = int(r.integers(pool.layouts[image_index].n_patches))
        row, col = pool.layouts[image_index].origin_of(patch_index)
        if same_image and (row, col) == (positive.origin.row, positive.origin.col):
            continue
        diff = semantic_difference(positive.labels, pool.get_labels(image_index, patch_index))
        best = max(best, diff)
        if diff >= tau:
            candidate = pool.get(image_index, patch_index)
            return augment(candidate, derive_seed(seed, 11, attempt))
    raise SamplingExhausted(
        f"no negative with semantic difference >= {tau} after {max_tries} tries "
        f"(best seen {max(best, 0.0):.3f})",
        best_difference=max(best, 0.0),
    )


# --------------------------------------------------------------------------
# Triplet assembly
# --------------------------------------------------------------------------

def build_triplets(
    real_images: list,
    synthetic_images: list[SyntheticImage],
    patch_size: int,
    tau: float,
    seed: int,
    max_tries: int = DEFAULT_MAX_TRIES,
) -> tuple[list[Triplet], int]:
    """One triplet per patch position per image; returns (triplets, skipped).

    real_images are LabeledImages; synthetic_images must align with them by
    id and position. The negative gate compares against the anchor's labels,
    with per-sample seeds derived from (seed, image index, patch index), so
    assembly order and worker count cannot change the result.
    """
    if len(real_images) != len(synthetic_images):
        raise InputError(
            f"real and synthetic lists differ in length: {len(real_images)} vs {len(synthetic_images)}"
        )
    for im, syn in zip(real_images, synthetic_images):
        if im.id != syn.id:
            raise InputError(f"image id mismatch: real {im.id!r} vs synthetic {syn.id!r}")
    pool = PatchPool(synthetic_images, patch_size)
    triplets: list[Triplet] = []
    skipped = 0
    for image_index, (im, syn) in enumerate(zip(real_images, synthetic_images)):
        layout = plan_layout(im.labels.shape[0], im.labels.shape[1], patch_size)
        p = patch_size
        for patch_index in range(layout.n_patches):
            row, col = layout.origin_of(patch_index)
            origin = PatchOrigin(im.id, row, col)
            anchor = patch_from_arrays(
                im.rgb[row:row + p, col:col + p],
                im.labels[row:row + p, col:col + p],
                origin,
                source="real",
            )
            positive = patch_from_arrays(
                syn.rgb[row:row + p, col:col + p],
                syn.labels[row:row + p, col:col + p],
                origin,
                source="synthetic",
            )
            gate_patch = replace(positive, labels=anchor.labels)
            sample_seed = derive_seed(seed, image_index, patch_index)
            try:
                negative = sample_negative(gate_patch, pool, tau, sample_seed, max_tries)
            except SamplingExhausted:
                skipped += 1
                continue
            diff = semantic_difference(anchor.labels, undo_flips(negative))
            triplets.append(
                Triplet(anchor=anchor, positive=positive, negative=negative, semantic_diff=diff)
            )
    return triplets, skipped


def materialize_triplets(triplets: list[Triplet], out_dir: Path) -> Path:
    """Write patch PNG trios plus a text index (origins + semantic_diff)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, t in enumerate(triplets):
        for role, patch in (("anchor", t.anchor), ("positive", t.positive), ("negative", t.negative)):
            arr = np.clip(np.rint(patch.rgb * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(out_dir / f"t{i:05d}_{role}.png", format="PNG")
        lines.append(f"{i}\t{t.anchor.origin}\t{t.positive.origin}\t{t.negative.origin}\t{t.semantic_diff:.6f}")
    (out_dir / "index.txt").write_text("\n".join(lines) + "\n")
    return out_dir
