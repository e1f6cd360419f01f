"""Model zoo: dissimilarity detector heads, toy segmentation net, toy cGAN,
and checkpoint serialization for all of them."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..errors import CheckpointError, InputError
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .cgan import (
    PatchDiscriminator,
    ToyGenerator,
    generate_rgb,
    one_hot_labels,
    train_toy_cgan,
)
from .detector import (
    HEAD_NAMES,
    PIXEL_HEADS,
    DetectorConfig,
    DiscriminatorScorer,
    DissimilarityDetector,
    FeatureExtractor,
    TransferDetector,
    build_detector,
    receptive_field,
)
from .segnet import ToySegNet, segnet_forward, segnet_predict, train_toy_segnet

__all__ = [
    "CheckpointData",
    "DetectorConfig",
    "DiscriminatorScorer",
    "DissimilarityDetector",
    "FeatureExtractor",
    "HEAD_NAMES",
    "PIXEL_HEADS",
    "PatchDiscriminator",
    "ToyGenerator",
    "ToySegNet",
    "TransferDetector",
    "build_detector",
    "generate_rgb",
    "load_checkpoint",
    "load_model",
    "module_arrays",
    "one_hot_labels",
    "receptive_field",
    "save_checkpoint",
    "save_model",
    "segnet_forward",
    "segnet_predict",
    "train_toy_cgan",
    "train_toy_segnet",
]


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def _load_arrays_into(module: nn.Module, arrays: dict[str, np.ndarray], source: str) -> None:
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{source}: parameter mismatch: {exc}") from exc


_KIND_DETECTOR = "detector"
_KIND_TRANSFER = "transfer-detector"
_KIND_SEGNET = "segnet"
_KIND_GENERATOR = "generator"
_KIND_DISCRIMINATOR = "discriminator"


def save_model(path: Path, model) -> Path:
    """Serialize any model of this package to the checkpoint container."""
    if isinstance(model, DissimilarityDetector):
        kind, config = _KIND_DETECTOR, model.config.to_dict()
    elif isinstance(model, TransferDetector):
        kind, config = _KIND_TRANSFER, model.config_dict()
    elif isinstance(model, ToySegNet):
        kind, config = _KIND_SEGNET, model.config_dict()
    elif isinstance(model, ToyGenerator):
        kind, config = _KIND_GENERATOR, model.config_dict()
    elif isinstance(model, PatchDiscriminator):
        kind, config = _KIND_DISCRIMINATOR, model.config_dict()
    else:
        raise InputError(f"cannot checkpoint object of type {type(model).__name__}")
    return save_checkpoint(path, kind, config, module_arrays(model))


def load_model(path: Path, expect_kind: str | None = None):
    """Rebuild a model from a checkpoint; optionally enforce its kind."""
    data = load_checkpoint(path)
    if expect_kind is not None and data.kind != expect_kind:
        raise CheckpointError(f"{path}: checkpoint kind {data.kind!r}, expected {expect_kind!r}")
    cfg = data.config
    if data.kind == _KIND_DETECTOR:
        model = DissimilarityDetector(DetectorConfig.from_dict(cfg))
    elif data.kind == _KIND_TRANSFER:
        disc = PatchDiscriminator(cfg["n_label_channels"], base=cfg["discriminator_base"])
        model = TransferDetector(disc, cfg["patch_size"], cfg["n_label_channels"])
    elif data.kind == _KIND_SEGNET:
        model = ToySegNet(cfg["n_classes"], base=cfg["base"])
    elif data.kind == _KIND_GENERATOR:
        model = ToyGenerator(cfg["n_label_channels"], base=cfg["base"])
    elif data.kind == _KIND_DISCRIMINATOR:
        model = PatchDiscriminator(cfg["n_label_channels"], base=cfg["base"])
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {data.kind!r}")
    _load_arrays_into(model, data.arrays, str(path))
    model.eval()
    return model
