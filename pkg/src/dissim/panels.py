"""Qualitative PNG panels: real | synthetic | dissimilarity | masks.

The heatmap colormap is monotone blue-to-red and invertible to 8-bit
precision: a score s maps to byte k = round(255 s), colored
(k, 255 - |2k - 255|, 255 - k), so the red channel alone recovers k and
the score as k / 255. Unscored pixels (cropped border bands) use the
sentinel (0, 255, 0), which no scored pixel can produce because scored
pixels always satisfy blue = 255 - red.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .evaluation import DissimilarityMap

__all__ = [
    "GUTTER",
    "UNSCORED_COLOR",
    "heatmap_rgb",
    "decode_heatmap",
    "mask_overlay",
    "compose_panel",
    "write_panel",
]

GUTTER = 4
GUTTER_COLOR = (32, 32, 32)
UNSCORED_COLOR = (0, 255, 0)
OOD_COLOR = (255, 255, 255)
MISCLASS_COLOR = (255, 128, 0)


def heatmap_rgb(dmap: DissimilarityMap) -> np.ndarray:
    """Dissimilarity map to H x W x 3 uint8 under the invertible colormap."""
    k = np.rint(np.clip(dmap.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    out = np.empty(k.shape + (3,), dtype=np.uint8)
    out[..., 0] = k
    out[..., 1] = 255 - np.abs(2 * k.astype(np.int32) - 255).astype(np.uint8)
    out[..., 2] = 255 - k
    out[~dmap.scored] = UNSCORED_COLOR
    return out


def decode_heatmap(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(scores, scored) back from a heatmap image; exact to 8-bit precision."""
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise InputError(f"expected H x W x 3 image, got shape {rgb.shape}")
    unscored = np.all(rgb == np.asarray(UNSCORED_COLOR, dtype=rgb.dtype), axis=-1)
    consistent = rgb[..., 2].astype(np.int32) == 255 - rgb[..., 0].astype(np.int32)
    if not np.all(consistent | unscored):
        raise InputError("image is not a heatmap from this colormap")
    values = rgb[..., 0].astype(np.float64) / 255.0
    values[unscored] = 0.0
    return values, ~unscored


def mask_overlay(ood_mask: np.ndarray, misclass_mask: np.ndarray) -> np.ndarray:
    """Black background, OoD white, misclassification orange."""
    if ood_mask.shape != misclass_mask.shape:
        raise InputError(f"mask shapes differ: {ood_mask.shape} vs {misclass_mask.shape}")
    out = np.zeros(ood_mask.shape + (3,), dtype=np.uint8)
    out[misclass_mask.astype(bool)] = MISCLASS_COLOR
    out[ood_mask.astype(bool)] = OOD_COLOR
    return out


def compose_panel(
    real_rgb: np.ndarray,
    synthetic_rgb: np.ndarray,
    dmap: DissimilarityMap,
    ood_mask: np.ndarray,
    misclass_mask: np.ndarray,
) -> np.ndarray:
    """Four tiles side by side with gutters; width = 4 W + 3 * GUTTER."""
    tiles = [
        np.asarray(real_rgb, dtype=np.uint8),
        np.asarray(synthetic_rgb, dtype=np.uint8),
        heatmap_rgb(dmap),
        mask_overlay(ood_mask, misclass_mask),
    ]
    h, w = tiles[0].shape[:2]
    for tile in tiles:
        if tile.shape != (h, w, 3):
            raise InputError(f"panel tiles must share shape {(h, w, 3)}, got {tile.shape}")
    gutter = np.tile(np.asarray(GUTTER_COLOR, dtype=np.uint8), (h, GUTTER, 1))
    parts: list[np.ndarray] = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(gutter)
        parts.append(tile)
    return np.concatenate(parts, axis=1)


def write_panel(path: Path, panel: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(panel, mode="RGB").save(path)
    return path
