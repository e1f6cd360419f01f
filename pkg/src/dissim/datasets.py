"""Dataset directories: save/load LabeledImages, synthesize toy datasets.

Layout of a dataset directory:

    manifest            key=value text file (format, sizes, seed, class set)
    rgb/<id>.png        24-bit color image
    labels/<id>.png     8-bit single channel, pixel value = class id
    pred/<id>.png       8-bit single channel, present when predictions exist
    masks/<id>_ood.png  8-bit, 0 or 255
    masks/<id>_mis.png  8-bit, 0 or 255
    probs/<id>.bin      8-byte header (magic "TWPB" + uint32 LE version),
                        then float32 little-endian, C-order, H*W*C values;
                        H, W and the channel id list come from the manifest

Everything is written in sorted order with deterministic bytes, so a rerun
with the same inputs produces a bit-identical tree.
"""

from __future__ import annotations

import hashlib
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import InputError
from .seeding import derive_seed, rng
from .toyworld import (
    DEFAULT_PATCH_SIZE,
    ClassSet,
    LabeledImage,
    corrupt_prediction,
    default_class_set,
    generate_scene,
    inject_ood,
)

__all__ = [
    "Dataset",
    "save_dataset",
    "load_dataset",
    "synth_dataset",
    "write_probs",
    "read_probs",
    "tree_hash",
    "PROBS_MAGIC",
    "PROBS_VERSION",
]

PROBS_MAGIC = b"TWPB"
PROBS_VERSION = 1
_MANIFEST_NAME = "manifest"
_FORMAT_NAME = "toyworld-dataset"
_FORMAT_VERSION = 1


@dataclass
class Dataset:
    """A loaded dataset: images in manifest order plus its class universe."""

    images: list[LabeledImage]
    class_set: ClassSet
    manifest: dict[str, str]
    path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def has_predictions(self) -> bool:
        return all(im.pred_labels is not None for im in self.images)


# --------------------------------------------------------------------------
# Probability field binary format
# --------------------------------------------------------------------------

def write_probs(path: Path, probs: np.ndarray) -> None:
    arr = np.ascontiguousarray(probs, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PROBS_MAGIC)
        fh.write(struct.pack("<I", PROBS_VERSION))
        fh.write(arr.tobytes())


def read_probs(path: Path, height: int, width: int, n_channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != PROBS_MAGIC:
        raise InputError(f"{path}: not a probability file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != PROBS_VERSION:
        raise InputError(f"{path}: unsupported probability file version {version}")
    expected = height * width * n_channels * 4
    if len(raw) - 8 != expected:
        raise InputError(
            f"{path}: payload is {len(raw) - 8} bytes, expected {expected} "
            f"for {height}x{width}x{n_channels}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=8)
    return flat.reshape(height, width, n_channels).copy()


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

def _format_palette(palette: dict[int, tuple[int, int, int]]) -> str:
    parts = [f"{cid}:{r}:{g}:{b}" for cid, (r, g, b) in sorted(palette.items())]
    return ";".join(parts)


def _parse_palette(text: str) -> dict[int, tuple[int, int, int]]:
    palette = {}
    for part in text.split(";"):
        if not part:
            continue
        cid, r, g, b = (int(x) for x in part.split(":"))
        palette[cid] = (r, g, b)
    return palette


def _parse_id_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x != "")


def write_manifest(path: Path, entries: dict[str, str]) -> None:
    lines = [f"{key}={value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise InputError(f"{path}: manifest not found")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


# --------------------------------------------------------------------------
# Save / load
# --------------------------------------------------------------------------

def _save_gray_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array.astype(np.uint8), mode="L").save(path, format="PNG")


def save_dataset(
    images: list[LabeledImage],
    class_set: ClassSet,
    out_dir: Path,
    seed: int,
    extra: Optional[dict[str, str]] = None,
    force: bool = False,
) -> Path:
    """Write a dataset directory. Refuses a non-empty target without force."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise InputError(f"{out_dir}: exists and is not empty (pass force to overwrite)")
        shutil.rmtree(out_dir)
    if not images:
        raise InputError("refusing to write an empty dataset")
    heights = {im.height for im in images}
    widths = {im.width for im in images}
    if len(heights) != 1 or len(widths) != 1:
        raise InputError("all images in a dataset must share one size")
    for im in images:
        if not im.id or not all(c.isalnum() or c in "-_" for c in im.id):
            raise InputError(f"image id {im.id!r} is not filesystem-safe")
        im.validate(class_set)
    if len({im.id for im in images}) != len(images):
        raise InputError("duplicate image ids")

    for sub in ("rgb", "labels", "pred", "masks", "probs"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    for im in images:
        Image.fromarray(im.rgb, mode="RGB").save(out_dir / "rgb" / f"{im.id}.png", format="PNG")
        _save_gray_png(out_dir / "labels" / f"{im.id}.png", im.labels)
        _save_gray_png(out_dir / "masks" / f"{im.id}_ood.png", im.ood_mask.astype(np.uint8) * 255)
        _save_gray_png(out_dir / "masks" / f"{im.id}_mis.png", im.misclass_mask.astype(np.uint8) * 255)
        if im.pred_labels is not None:
            _save_gray_png(out_dir / "pred" / f"{im.id}.png", im.pred_labels)
        if im.pred_probs is not None:
            write_probs(out_dir / "probs" / f"{im.id}.bin", im.pred_probs)

    from . import __version__

    entries = {
        "format": _FORMAT_NAME,
        "format_version": str(_FORMAT_VERSION),
        "tool_version": __version__,
        "height": str(images[0].height),
        "width": str(images[0].width),
        "n_images": str(len(images)),
        "seed": str(seed),
        "background_id": str(class_set.background_id),
        "in_dist_ids": ",".join(str(i) for i in class_set.in_dist_ids),
        "ood_ids": ",".join(str(i) for i in class_set.ood_ids),
        "palette": _format_palette(class_set.palette),
        "prob_channels": ",".join(str(i) for i in class_set.prob_channel_ids),
        "ids": ",".join(im.id for im in images),
    }
    for key, value in (extra or {}).items():
        if key in entries:
            raise InputError(f"extra manifest key {key!r} collides with a reserved key")
        entries[key] = value
    write_manifest(out_dir / _MANIFEST_NAME, entries)
    return out_dir


def _load_gray_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            raise InputError(f"{path}: expected 8-bit grayscale, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8)


def load_dataset(path: Path, validate: bool = True) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path / _MANIFEST_NAME)
    if manifest.get("format") != _FORMAT_NAME:
        raise InputError(f"{path}: unrecognized dataset format {manifest.get('format')!r}")
    try:
        height = int(manifest["height"])
        width = int(manifest["width"])
        class_set = ClassSet(
            in_dist_ids=_parse_id_list(manifest["in_dist_ids"]),
            ood_ids=_parse_id_list(manifest["ood_ids"]),
            palette=_parse_palette(manifest["palette"]),
            background_id=int(manifest["background_id"]),
        )
        ids = [s for s in manifest["ids"].split(",") if s]
    except KeyError as exc:
        raise InputError(f"{path}: manifest missing key {exc}") from exc

    images = []
    for image_id in ids:
        rgb_path = path / "rgb" / f"{image_id}.png"
        if not rgb_path.is_file():
            raise InputError(f"{path}: missing rgb image for id {image_id}")
        with Image.open(rgb_path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        labels = _load_gray_png(path / "labels" / f"{image_id}.png")
        ood_mask = _load_gray_png(path / "masks" / f"{image_id}_ood.png") > 127
        mis_mask = _load_gray_png(path / "masks" / f"{image_id}_mis.png") > 127
        pred_path = path / "pred" / f"{image_id}.png"
        probs_path = path / "probs" / f"{image_id}.bin"
        pred = _load_gray_png(pred_path) if pred_path.is_file() else None
        probs = (
            read_probs(probs_path, height, width, len(class_set.prob_channel_ids))
            if probs_path.is_file()
            else None
        )
        image = LabeledImage(
            rgb=rgb,
            labels=labels,
            ood_mask=ood_mask,
            misclass_mask=mis_mask,
            id=image_id,
            pred_labels=pred,
            pred_probs=probs,
        )
        if rgb.shape[:2] != (height, width):
            raise InputError(f"{path}: image {image_id} size differs from manifest")
        if validate:
            image.validate(class_set)
        images.append(image)
    return Dataset(images=images, class_set=class_set, manifest=manifest, path=path)


# --------------------------------------------------------------------------
# Synthesis
# --------------------------------------------------------------------------

def synth_dataset(
    out_dir: Path,
    n: int,
    seed: int,
    ood_rate: float,
    corrupt_rate: float,
    size: int,
    class_set: Optional[ClassSet] = None,
    patch_size: int = DEFAULT_PATCH_SIZE,
    n_objects_range: tuple[int, int] = (3, 8),
    force: bool = False,
) -> tuple[Path, dict[int, int]]:
    """Generate n scenes, inject OoD into a seeded ood_rate fraction of them,
    attach a corrupted prediction, and write the dataset directory.

    Returns the directory and per-class pixel counts over the whole set.
    """
    if n < 1:
        raise InputError("n must be at least 1")
    if not (0.0 <= ood_rate <= 1.0):
        raise InputError(f"ood_rate {ood_rate} outside [0, 1]")
    class_set = class_set or default_class_set()
    images = []
    for i in range(n):
        r = rng(seed, i, 9)
        n_objects = int(r.integers(n_objects_range[0], n_objects_range[1]))
        scene = generate_scene(
            derive_seed(seed, i, 0),
            class_set,
            size,
            size,
            n_objects,
            patch_size=patch_size,
            image_id=f"toy-{i:05d}",
        )
        if class_set.ood_ids and r.random() < ood_rate:
            n_ood = int(r.integers(1, 3))
            scene = inject_ood(scene, class_set, derive_seed(seed, i, 1), n_ood=n_ood)
        pred, probs = corrupt_prediction(
            scene.labels, corrupt_rate, derive_seed(seed, i, 2), class_set
        )
        scene.pred_labels = pred
        scene.pred_probs = probs
        scene.misclass_mask = pred != scene.labels
        images.append(scene)

    extra = {
        "ood_rate": repr(float(ood_rate)),
        "corrupt_rate": repr(float(corrupt_rate)),
        "patch_size": str(patch_size),
    }
    out = save_dataset(images, class_set, Path(out_dir), seed=seed, extra=extra, force=force)
    counts: dict[int, int] = {cid: 0 for cid in class_set.all_ids}
    for im in images:
        ids, freq = np.unique(im.labels, return_counts=True)
        for cid, c in zip(ids, freq):
            counts[int(cid)] += int(c)
    return out, counts


# --------------------------------------------------------------------------
# Tree hashing
# --------------------------------------------------------------------------

def tree_hash(path: Path) -> str:
    """SHA-256 over sorted relative paths and file contents of a directory."""
    path = Path(path)
    if not path.is_dir():
        raise InputError(f"{path}: not a directory")
    hasher = hashlib.sha256()
    for file in sorted(p for p in path.rglob("*") if p.is_file()):
        rel = file.relative_to(path).as_posix()
        hasher.update(rel.encode())
        hasher.update(b"\0")
        hasher.update(file.read_bytes())
        hasher.update(b"\0")
    return hasher.hexdigest()
