"""Procedurally generated labeled scenes with exact error ground truth.

The world is deliberately simple: a background plus geometric objects
(rectangles, ellipses, triangles), each class identified by a palette color
and a positional texture. Out-of-distribution (OoD) classes get palette
colors and a texture style disjoint from the in-distribution classes, so a
synthetic re-render from in-distribution labels can never imitate them.

All operations are pure functions of their inputs and a seed (Philox
streams, see seeding.py); reruns are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InputError, PlacementError
from .seeding import derive_seed, rng

__all__ = [
    "ClassSet",
    "LabeledImage",
    "default_class_set",
    "texture_field",
    "render_from_labels",
    "generate_scene",
    "inject_ood",
    "corrupt_prediction",
    "label_components",
    "RectSpec",
    "EllipseSpec",
    "TriangleSpec",
    "rasterize_shape",
    "sample_object_shape",
    "DEFAULT_PATCH_SIZE",
    "DEFAULT_NOISE_LEVEL",
]

DEFAULT_PATCH_SIZE = 64
DEFAULT_NOISE_LEVEL = 0.04

# Texture amplitudes in [0,1] rgb units. Kept small against palette color
# distances (~0.3) so class identity stays the dominant visual signal.
_IN_DIST_TEXTURE_AMP = 0.025
_OOD_TEXTURE_AMP = 0.09

_GOLDEN_ANGLE = 2.399963229728653

_DEFAULT_PALETTE = {
    0: (96, 96, 96),
    1: (46, 64, 156),
    2: (58, 128, 52),
    3: (150, 116, 44),
    4: (128, 64, 128),
    5: (64, 140, 140),
    6: (160, 60, 60),
    7: (190, 190, 120),
    8: (230, 40, 200),
    9: (40, 230, 230),
    10: (245, 150, 30),
}


@dataclass(frozen=True)
class ClassSet:
    """The class universe: which ids are in-distribution, which are OoD,
    and how every id is colored."""

    in_dist_ids: tuple[int, ...]
    ood_ids: tuple[int, ...]
    palette: dict[int, tuple[int, int, int]]
    background_id: int

    def __post_init__(self):
        in_dist = set(self.in_dist_ids)
        ood = set(self.ood_ids)
        if in_dist & ood:
            raise InputError(f"in-dist and ood ids overlap: {sorted(in_dist & ood)}")
        if self.background_id not in in_dist:
            raise InputError(f"background id {self.background_id} not in in-dist ids")
        missing = (in_dist | ood) - set(self.palette)
        if missing:
            raise InputError(f"palette missing ids: {sorted(missing)}")
        for cid in in_dist | ood:
            if not (0 <= cid <= 255):
                raise InputError(f"class id {cid} outside 8-bit range")

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.in_dist_ids) | set(self.ood_ids)))

    @property
    def prob_channel_ids(self) -> tuple[int, ...]:
        """Channel order of per-pixel class distributions: sorted in-dist ids.

        A segmentation net trained on in-distribution classes has no OoD
        output channel, so distributions cover in-dist ids only.
        """
        return tuple(sorted(self.in_dist_ids))

    def is_ood(self, class_id: int) -> bool:
        return class_id in set(self.ood_ids)

    def ood_mask(self, labels: np.ndarray) -> np.ndarray:
        return np.isin(labels, np.asarray(self.ood_ids, dtype=labels.dtype))

    def validate_labels(self, labels: np.ndarray) -> None:
        known = np.asarray(self.all_ids)
        present = np.unique(labels)
        unknown = np.setdiff1d(present, known)
        if unknown.size:
            raise InputError(f"unknown class id {int(unknown[0])} in label map")

    def palette_lut(self) -> np.ndarray:
        lut = np.zeros((256, 3), dtype=np.uint8)
        for cid, color in self.palette.items():
            lut[cid] = color
        return lut


def default_class_set() -> ClassSet:
    """8 in-distribution classes (0 = background) and 3 OoD classes."""
    return ClassSet(
        in_dist_ids=tuple(range(8)),
        ood_ids=(8, 9, 10),
        palette=dict(_DEFAULT_PALETTE),
        background_id=0,
    )


@dataclass
class LabeledImage:
    """One scene: RGB, per-pixel labels, error masks, optional prediction.

    misclass_mask is the raw disagreement pred != labels wherever a
    prediction exists (OoD pixels included, since predictions can only use
    in-distribution ids there). The evaluation module derives the in-dist
    restricted variant from it.
    """

    rgb: np.ndarray
    labels: np.ndarray
    ood_mask: np.ndarray
    misclass_mask: np.ndarray
    id: str
    pred_labels: Optional[np.ndarray] = None
    pred_probs: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def validate(self, class_set: ClassSet) -> None:
        h, w = self.labels.shape
        if self.rgb.shape != (h, w, 3) or self.rgb.dtype != np.uint8:
            raise InputError(f"rgb must be {h}x{w}x3 uint8")
        class_set.validate_labels(self.labels)
        if not np.array_equal(self.ood_mask, class_set.ood_mask(self.labels)):
            raise InputError("ood_mask inconsistent with labels")
        if self.pred_labels is not None:
            class_set.validate_labels(self.pred_labels)
            if not np.array_equal(self.misclass_mask, self.pred_labels != self.labels):
                raise InputError("misclass_mask inconsistent with prediction")
        if self.pred_probs is not None:
            c = len(class_set.prob_channel_ids)
            if self.pred_probs.shape != (h, w, c):
                raise InputError(f"pred_probs must be {h}x{w}x{c}")
            sums = self.pred_probs.sum(axis=-1, dtype=np.float64)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise InputError("pred_probs rows must sum to 1 within 1e-6")


def _make_labeled(
    labels: np.ndarray,
    class_set: ClassSet,
    rgb: np.ndarray,
    image_id: str,
    pred_labels: Optional[np.ndarray] = None,
    pred_probs: Optional[np.ndarray] = None,
) -> LabeledImage:
    if pred_labels is not None:
        misclass = pred_labels != labels
    else:
        misclass = np.zeros(labels.shape, dtype=bool)
    return LabeledImage(
        rgb=rgb,
        labels=labels,
        ood_mask=class_set.ood_mask(labels),
        misclass_mask=misclass,
        id=image_id,
        pred_labels=pred_labels,
        pred_probs=pred_probs,
    )


# --------------------------------------------------------------------------
# Textures and rendering
# --------------------------------------------------------------------------

def texture_field(class_id: int, height: int, width: int, ood: bool = False) -> np.ndarray:
    """Positional texture for one class, an H x W field in roughly [-amp, amp].

    Purely a function of (class_id, position): no seed, so ground-truth
    renders and synthetic re-renders of the same labels carry identical
    texture. In-dist classes get low-amplitude oriented gratings; OoD
    classes get high-amplitude checkerboards, a style no in-dist class uses.
    """
    rows = np.arange(height, dtype=np.float32)[:, None]
    cols = np.arange(width, dtype=np.float32)[None, :]
    if ood:
        cell = 4.0 + 2.0 * (class_id % 5)
        pattern = np.sign(np.sin(2 * np.pi * rows / cell)) * np.sign(np.sin(2 * np.pi * cols / cell))
        return (_OOD_TEXTURE_AMP * pattern).astype(np.float32)
    theta = _GOLDEN_ANGLE * class_id
    wavelength = 6.0 + (class_id * 5) % 11
    phase = 0.7 * class_id
    wave = np.sin(2 * np.pi * (np.cos(theta) * cols + np.sin(theta) * rows) / wavelength + phase)
    return (_IN_DIST_TEXTURE_AMP * wave).astype(np.float32)


def render_from_labels(
    labels: np.ndarray,
    class_set: ClassSet,
    seed: int,
    noise_level: float = DEFAULT_NOISE_LEVEL,
) -> np.ndarray:
    """Render a label map to RGB: palette color + class texture + seeded noise.

    This is the oracle renderer: it both produces the ground-truth RGB of
    the toy world and stands in for the learned generator wherever a test
    needs a generator of known quality. Deterministic in (labels, seed).
    """
    if not (0.0 <= noise_level <= 0.5):
        raise InputError(f"noise_level {noise_level} outside [0, 0.5]")
    class_set.validate_labels(labels)
    h, w = labels.shape
    rgb = class_set.palette_lut()[labels].astype(np.float32) / 255.0
    texture = np.zeros((h, w), dtype=np.float32)
    for cid in np.unique(labels):
        mask = labels == cid
        texture[mask] = texture_field(int(cid), h, w, ood=class_set.is_ood(int(cid)))[mask]
    rgb += texture[..., None]
    if noise_level > 0:
        noise = rng(seed, 0).uniform(-noise_level, noise_level, size=(h, w, 3))
        rgb += noise.astype(np.float32)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# Shapes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RectSpec:
    row0: int
    col0: int
    height: int
    width: int


@dataclass(frozen=True)
class EllipseSpec:
    center_row: float
    center_col: float
    semi_row: float
    semi_col: float


@dataclass(frozen=True)
class TriangleSpec:
    vertices: tuple[tuple[float, float], ...]  # three (row, col) points


ShapeSpec = RectSpec | EllipseSpec | TriangleSpec


def rasterize_shape(spec: ShapeSpec, height: int, width: int) -> np.ndarray:
    """Boolean pixel-membership mask of a shape on an H x W canvas."""
    if isinstance(spec, RectSpec):
        mask = np.zeros((height, width), dtype=bool)
        mask[spec.row0:spec.row0 + spec.height, spec.col0:spec.col0 + spec.width] = True
        return mask
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    if isinstance(spec, EllipseSpec):
        dr = (rows - spec.center_row) / spec.semi_row
        dc = (cols - spec.center_col) / spec.semi_col
        return dr * dr + dc * dc <= 1.0
    if isinstance(spec, TriangleSpec):
        (r0, c0), (r1, c1), (r2, c2) = spec.vertices
        d0 = (c1 - c0) * (rows - r0) - (r1 - r0) * (cols - c0)
        d1 = (c2 - c1) * (rows - r1) - (r2 - r1) * (cols - c1)
        d2 = (c0 - c2) * (rows - r2) - (r0 - r2) * (cols - c2)
        neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
        pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
        return ~(neg & pos)
    raise InputError(f"unknown shape spec {type(spec).__name__}")


def sample_object_shape(
    r: np.random.Generator,
    height: int,
    width: int,
    min_extent: float,
    max_extent: float,
) -> ShapeSpec:
    """Draw a shape whose extent is a fraction of min(height, width),
    positioned fully inside the canvas."""
    scale = min(height, width)
    kind = int(r.integers(3))
    if kind == 0:
        h = max(6, int(round(r.uniform(min_extent, max_extent) * scale)))
        w = max(6, int(round(r.uniform(min_extent, max_extent) * scale)))
        h, w = min(h, height), min(w, width)
        row0 = int(r.integers(0, height - h + 1))
        col0 = int(r.integers(0, width - w + 1))
        return RectSpec(row0, col0, h, w)
    if kind == 1:
        a = max(3.0, r.uniform(min_extent, max_extent) * scale / 2)
        b = max(3.0, r.uniform(min_extent, max_extent) * scale / 2)
        cr = r.uniform(a, height - 1 - a)
        cc = r.uniform(b, width - 1 - b)
        return EllipseSpec(cr, cc, a, b)
    extent = max(10.0, r.uniform(min_extent, max_extent) * scale)
    top = r.uniform(0, height - 1 - extent)
    left = r.uniform(0, width - 1 - extent)
    for _ in range(30):
        pts = tuple(
            (float(top + r.uniform(0, extent)), float(left + r.uniform(0, extent)))
            for _ in range(3)
        )
        area = abs(
            (pts[1][1] - pts[0][1]) * (pts[2][0] - pts[0][0])
            - (pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1])
        ) / 2
        if area >= 0.15 * extent * extent:
            return TriangleSpec(pts)
    return TriangleSpec(((top, left), (top, left + extent), (top + extent, left)))


# --------------------------------------------------------------------------
# Scene generation
# --------------------------------------------------------------------------

def generate_scene(
    seed: int,
    class_set: ClassSet,
    height: int,
    width: int,
    n_objects: int,
    patch_size: int = DEFAULT_PATCH_SIZE,
    noise_level: float = DEFAULT_NOISE_LEVEL,
    image_id: Optional[str] = None,
) -> LabeledImage:
    """Background plus n_objects in-distribution shapes, rendered to RGB.

    Dimensions must be at least 64 and divisible by patch_size so the patch
    grid downstream covers the image without remainder bands.
    """
    if height < 64 or width < 64:
        raise InputError(f"image dimensions {height}x{width} below the 64-pixel minimum")
    if height % patch_size or width % patch_size:
        raise InputError(
            f"image dimensions {height}x{width} not divisible by patch size {patch_size}"
        )
    if n_objects < 0:
        raise InputError("n_objects must be nonnegative")
    labels = np.full((height, width), class_set.background_id, dtype=np.uint8)
    object_ids = [cid for cid in class_set.in_dist_ids if cid != class_set.background_id]
    r = rng(seed, 0)
    for _ in range(n_objects):
        spec = sample_object_shape(r, height, width, min_extent=0.10, max_extent=0.30)
        cid = object_ids[int(r.integers(len(object_ids)))] if object_ids else class_set.background_id
        labels[rasterize_shape(spec, height, width)] = cid
    rgb = render_from_labels(labels, class_set, seed=derive_seed(seed, 1), noise_level=noise_level)
    return _make_labeled(labels, class_set, rgb, image_id or f"scene-{seed:08d}")


def inject_ood(
    scene: LabeledImage,
    class_set: ClassSet,
    seed: int,
    n_ood: int,
    noise_level: float = DEFAULT_NOISE_LEVEL,
) -> LabeledImage:
    """Add n_ood out-of-distribution shapes and re-render the RGB.

    Each shape must fit inside the canvas and may overlap already-placed OoD
    pixels by at most 25% of its own area; placement retries are bounded.
    Any prediction on the input scene is dropped (it no longer matches).
    """
    if n_ood < 1:
        raise InputError("n_ood must be at least 1")
    if not class_set.ood_ids:
        raise InputError("class set has no ood ids")
    h, w = scene.labels.shape
    labels = scene.labels.copy()
    ood_so_far = class_set.ood_mask(labels)
    r = rng(seed, 2)
    for _ in range(n_ood):
        placed = False
        for _attempt in range(100):
            spec = sample_object_shape(r, h, w, min_extent=0.16, max_extent=0.30)
            mask = rasterize_shape(spec, h, w)
            area = int(mask.sum())
            if area < 40:
                continue
            if int((mask & ood_so_far).sum()) > 0.25 * area:
                continue
            cid = class_set.ood_ids[int(r.integers(len(class_set.ood_ids)))]
            labels[mask] = cid
            ood_so_far |= mask
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place ood shape after 100 retries on {h}x{w} scene {scene.id}"
            )
    rgb = render_from_labels(labels, class_set, seed=derive_seed(seed, 3), noise_level=noise_level)
    return _make_labeled(labels, class_set, rgb, scene.id)


# --------------------------------------------------------------------------
# Prediction corruption
# --------------------------------------------------------------------------

def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labeling of a boolean mask.

    Returns (labels, count) where labels is int32 with 0 on background and
    components numbered from 1.
    """
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int32)
    count = 0
    for start_r, start_c in zip(*np.nonzero(mask & (out == 0))):
        if out[start_r, start_c]:
            continue
        count += 1
        stack = [(int(start_r), int(start_c))]
        out[start_r, start_c] = count
        while stack:
            rr, cc = stack.pop()
            for nr, nc in ((rr - 1, cc), (rr + 1, cc), (rr, cc - 1), (rr, cc + 1)):
                if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not out[nr, nc]:
                    out[nr, nc] = count
                    stack.append((nr, nc))
    return out, count


_PROB_SMOOTHING = 0.05
_REGION_PIXELS_LOW = 600
_REGION_PIXELS_HIGH = 2400


def corrupt_prediction(
    labels: np.ndarray,
    rate: float,
    seed: int,
    class_set: ClassSet,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate a segmentation prediction with a controlled error budget.

    Connected blobs covering `rate` of the in-distribution pixels are
    rewritten to a different in-distribution id. OoD pixels are always
    mapped to some in-distribution id, since a net trained only on in-dist
    classes cannot emit OoD ids.

    The returned probability field is the smoothed one-hot of the predicted
    label; on rewritten pixels the mass is split between the new and the
    original class (the net is "torn" there), which gives the softmax
    entropy baseline something to detect, as it would on a real net.
    """
    if not (0.0 <= rate <= 1.0):
        raise InputError(f"rate {rate} outside [0, 1]")
    class_set.validate_labels(labels)
    h, w = labels.shape
    in_dist_sorted = tuple(sorted(class_set.in_dist_ids))
    channel_of = {cid: i for i, cid in enumerate(in_dist_sorted)}
    n_channels = len(in_dist_sorted)
    r = rng(seed, 4)

    pred = labels.copy()
    # Confusion weight on the predicted class: 1.0 everywhere except
    # rewritten in-dist pixels, where part of the mass stays on the truth.
    alpha = np.ones((h, w), dtype=np.float32)

    ood = class_set.ood_mask(labels)
    if ood.any():
        comp, n_comp = label_components(ood)
        for k in range(1, n_comp + 1):
            pred[comp == k] = in_dist_sorted[int(r.integers(n_channels))]

    in_dist = ~ood
    n_in = int(in_dist.sum())
    if rate >= 1.0:
        if n_channels < 2:
            raise InputError("rate=1 needs at least two in-distribution classes")
        cycle = {cid: in_dist_sorted[(i + 1) % n_channels] for i, cid in enumerate(in_dist_sorted)}
        remap = np.arange(256, dtype=np.uint8)
        for cid, nxt in cycle.items():
            remap[cid] = nxt
        pred[in_dist] = remap[labels[in_dist]]
        alpha[in_dist] = r.uniform(0.62, 0.88)
    elif rate > 0.0 and n_in > 0:
        target = int(round(rate * n_in))
        changed = 0
        visited = np.zeros((h, w), dtype=bool)
        for _region in range(500):
            if changed >= target:
                break
            eligible = np.flatnonzero(in_dist.ravel() & ~visited.ravel())
            if eligible.size == 0:
                break
            start = int(eligible[int(r.integers(eligible.size))])
            start_rc = (start // w, start % w)
            region_budget = min(target - changed, int(r.integers(_REGION_PIXELS_LOW, _REGION_PIXELS_HIGH)))
            new_id = in_dist_sorted[int(r.integers(n_channels))]
            region_alpha = float(r.uniform(0.62, 0.88))
            frontier = [start_rc]
            visited[start_rc] = True
            flipped = 0
            while frontier and flipped < region_budget:
                idx = int(r.integers(len(frontier)))
                frontier[idx], frontier[-1] = frontier[-1], frontier[idx]
                rr, cc = frontier.pop()
                if labels[rr, cc] != new_id:
                    pred[rr, cc] = new_id
                    alpha[rr, cc] = region_alpha
                    flipped += 1
                for nr, nc in ((rr - 1, cc), (rr + 1, cc), (rr, cc - 1), (rr, cc + 1)):
                    if 0 <= nr < h and 0 <= nc < w and in_dist[nr, nc] and not visited[nr, nc]:
                        visited[nr, nc] = True
                        frontier.append((nr, nc))
            changed += flipped
        if changed < target:
            # Region growth can strand pixels behind visited walls; finish
            # the budget with a cyclic remap of individual clean pixels.
            leftovers = np.flatnonzero((in_dist & (pred == labels)).ravel())
            r.shuffle(leftovers)
            tail_alpha = float(r.uniform(0.62, 0.88))
            for flat in leftovers[: target - changed]:
                rr, cc = int(flat) // w, int(flat) % w
                idx = channel_of[int(labels[rr, cc])]
                pred[rr, cc] = in_dist_sorted[(idx + 1) % n_channels]
                alpha[rr, cc] = tail_alpha

    channel_lut = np.zeros(256, dtype=np.int64)
    for cid, i in channel_of.items():
        channel_lut[cid] = i
    probs = np.full((h, w, n_channels), _PROB_SMOOTHING / n_channels, dtype=np.float32)
    rows, cols = np.indices((h, w))
    probs[rows, cols, channel_lut[pred]] += (1.0 - _PROB_SMOOTHING) * alpha
    torn = alpha < 1.0
    if torn.any():
        true_ch = channel_lut[labels[torn]]
        probs[rows[torn], cols[torn], true_ch] += (1.0 - _PROB_SMOOTHING) * (1.0 - alpha[torn])
    return pred, probs
