"""The dissimilarity detector: shared convolutional trunk plus five heads.

The trunk consumes a channel-concatenated (real, synthetic) patch pair
(6 input channels) through 3x3 convolutions arranged in three stacks with a
2x2 stride-2 max pool after each of the first two stacks. With the default
stacks (2, 2, 3) and widths (b, b, 2b, 2b, 4b, 4b, 4b) the receptive field
is 40 input pixels with jump 4, so locality within a 64-pixel patch is
preserved. Stack depths are configurable; the receptive field must never
exceed the patch size.

Heads:
  resize  1x1 convolution, sigmoid, bilinear x4 upsample back to P x P
          (corner-aligned sampling: align_corners=True throughout)
  deconv  two stride-2 4x4 transposed convolutions, channels F -> F/2 -> 1
  fc      flatten -> 1024 -> 256 -> 1, rectifier activations, sigmoid
  transfer       frozen first-three discriminator convolutions + fc stack
  discriminator  no training; 1 - mean realism of the synthetic patch
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from ..errors import InputError

__all__ = [
    "DetectorConfig",
    "DissimilarityDetector",
    "TransferDetector",
    "DiscriminatorScorer",
    "FeatureExtractor",
    "receptive_field",
    "build_detector",
    "HEAD_NAMES",
]

HEAD_NAMES = ("resize", "deconv", "fc", "transfer", "discriminator")
PIXEL_HEADS = ("resize", "deconv")


def receptive_field(conv_stacks: tuple[int, int, int]) -> tuple[int, int]:
    """(receptive field, jump) of the trunk via r <- r + (k-1)*j; j <- j*s."""
    layers = [(3, 1)] * conv_stacks[0] + [(2, 2)] + [(3, 1)] * conv_stacks[1] + [(2, 2)] + [(3, 1)] * conv_stacks[2]
    r, j = 1, 1
    for k, s in layers:
        r += (k - 1) * j
        j *= s
    return r, j


@dataclass(frozen=True)
class DetectorConfig:
    head: str
    patch_size: int = 64
    base_filters: int = 16
    lambda_d: float = 1.0
    conv_stacks: tuple[int, int, int] = (2, 2, 3)
    input_mode: str = "channel_concat"

    def __post_init__(self):
        if self.head not in HEAD_NAMES:
            raise InputError(f"unknown head {self.head!r}, expected one of {HEAD_NAMES}")
        if self.input_mode != "channel_concat":
            raise InputError(f"input_mode is fixed to channel_concat, got {self.input_mode!r}")
        if self.patch_size % 4:
            raise InputError(f"patch size {self.patch_size} not divisible by 4 (two pooling stages)")
        if self.base_filters < 1:
            raise InputError("base_filters must be positive")
        if self.lambda_d <= 0:
            raise InputError(f"lambda_d must be positive, got {self.lambda_d}")
        stacks = tuple(int(s) for s in self.conv_stacks)
        object.__setattr__(self, "conv_stacks", stacks)
        if len(stacks) != 3 or stacks[0] < 1 or stacks[1] < 1 or stacks[2] < 0:
            raise InputError(f"conv_stacks must be (>=1, >=1, >=0), got {stacks}")
        rf, _ = receptive_field(stacks)
        if rf > self.patch_size:
            raise InputError(
                f"receptive field {rf} exceeds patch size {self.patch_size}; "
                f"reduce conv_stacks or enlarge patches"
            )

    @property
    def stack_widths(self) -> tuple[int, int, int]:
        b = self.base_filters
        return (b, 2 * b, 4 * b)

    @property
    def feature_channels(self) -> int:
        widths = self.stack_widths
        return widths[2] if self.conv_stacks[2] > 0 else widths[1]

    @property
    def feature_size(self) -> int:
        return self.patch_size // 4

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "patch_size": self.patch_size,
            "base_filters": self.base_filters,
            "lambda_d": self.lambda_d,
            "conv_stacks": list(self.conv_stacks),
            "input_mode": self.input_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        known = {"head", "patch_size", "base_filters", "lambda_d", "conv_stacks", "input_mode"}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown detector config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "conv_stacks" in kwargs:
            kwargs["conv_stacks"] = tuple(kwargs["conv_stacks"])
        return cls(**kwargs)


class FeatureExtractor(nn.Module):
    """3x3 conv stacks with two interleaved 2x2 max pools; rectifier units."""

    def __init__(self, config: DetectorConfig, in_channels: int = 6):
        super().__init__()
        widths = config.stack_widths
        layers: list[nn.Module] = []
        prev = in_channels
        for stage, depth in enumerate(config.conv_stacks):
            for _ in range(depth):
                layers.append(nn.Conv2d(prev, widths[stage], kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                prev = widths[stage]
            if stage < 2:
                layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResizeHead(nn.Module):
    def __init__(self, feature_channels: int, patch_size: int):
        super().__init__()
        self.project = nn.Conv2d(feature_channels, 1, kernel_size=1)
        self.patch_size = patch_size

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        score = torch.sigmoid(self.project(features))
        score = nn.functional.interpolate(
            score, size=(self.patch_size, self.patch_size), mode="bilinear", align_corners=True
        )
        return score.squeeze(1)


class DeconvHead(nn.Module):
    def __init__(self, feature_channels: int):
        super().__init__()
        mid = max(1, feature_channels // 2)
        self.up1 = nn.ConvTranspose2d(feature_channels, mid, kernel_size=4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(mid, 1, kernel_size=4, stride=2, padding=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = nn.functional.relu(self.up1(features))
        return torch.sigmoid(self.up2(x)).squeeze(1)


class FCHead(nn.Module):
    def __init__(self, feature_channels: int, feature_size: int):
        super().__init__()
        self.stack = nn.Sequential(
            nn.Flatten(),
            nn.Linear(feature_channels * feature_size * feature_size, 1024),
            nn.ReLU(inplace=True),
            nn.Linear(1024, 256),
            nn.ReLU(inplace=True),
            nn.Linear(256, 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.stack(features)).squeeze(-1)


class DissimilarityDetector(nn.Module):
    """Trainable detector for the resize, deconv, and fc heads.

    forward(real, synthetic) takes B x 3 x P x P tensors in [0,1] and
    returns B x P x P score maps (pixel heads) or B scalars (fc), all in
    [0,1]. The pair enters as a 6-channel concatenation, so argument order
    matters.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        if config.head not in ("resize", "deconv", "fc"):
            raise InputError(f"DissimilarityDetector does not implement head {config.head!r}")
        self.config = config
        self.extractor = FeatureExtractor(config)
        if config.head == "resize":
            self.head = ResizeHead(config.feature_channels, config.patch_size)
        elif config.head == "deconv":
            self.head = DeconvHead(config.feature_channels)
        else:
            self.head = FCHead(config.feature_channels, config.feature_size)

    @property
    def per_pixel(self) -> bool:
        return self.config.head in PIXEL_HEADS

    def features(self, real: torch.Tensor, synthetic: torch.Tensor) -> torch.Tensor:
        if real.shape != synthetic.shape:
            raise InputError(f"pair shapes differ: {tuple(real.shape)} vs {tuple(synthetic.shape)}")
        p = self.config.patch_size
        if real.shape[-2:] != (p, p) or real.shape[-3] != 3:
            raise InputError(f"expected B x 3 x {p} x {p} patches, got {tuple(real.shape)}")
        return self.extractor(torch.cat([real, synthetic], dim=-3))

    def forward(self, real: torch.Tensor, synthetic: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(real, synthetic))


class TransferDetector(nn.Module):
    """Frozen discriminator features (first three convolutions) on each
    patch-condition pair, concatenated, then a trainable fc decision stack."""

    def __init__(self, discriminator: nn.Module, patch_size: int, n_label_channels: int):
        super().__init__()
        if patch_size % 4:
            raise InputError(f"patch size {patch_size} not divisible by 4")
        self.frozen = discriminator.feature_convs()
        for param in self.frozen.parameters():
            param.requires_grad_(False)
        self.patch_size = patch_size
        self.n_label_channels = n_label_channels
        self.discriminator_base = discriminator.base
        with torch.no_grad():
            probe = torch.zeros(1, 3 + n_label_channels, patch_size, patch_size)
            feat = self.frozen(probe)
        flat = 2 * feat.numel()
        self.decision = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 1024),
            nn.ReLU(inplace=True),
            nn.Linear(1024, 256),
            nn.ReLU(inplace=True),
            nn.Linear(256, 1),
        )

    @property
    def per_pixel(self) -> bool:
        return False

    def config_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "n_label_channels": self.n_label_channels,
            "discriminator_base": self.discriminator_base,
        }

    def forward(
        self,
        real: torch.Tensor,
        synthetic: torch.Tensor,
        real_condition: torch.Tensor,
        synthetic_condition: torch.Tensor,
    ) -> torch.Tensor:
        with torch.no_grad():
            f_real = self.frozen(torch.cat([real, real_condition], dim=-3))
            f_syn = self.frozen(torch.cat([synthetic, synthetic_condition], dim=-3))
        both = torch.cat([f_real, f_syn], dim=-3)
        return torch.sigmoid(self.decision(both)).squeeze(-1)


class DiscriminatorScorer:
    """Head (v): no training. Dissimilarity = 1 - mean realism that the
    pretrained discriminator assigns to the synthetic patch conditioned on
    its own label map. The real patch plays no role."""

    def __init__(self, discriminator: nn.Module):
        self.discriminator = discriminator

    per_pixel = False

    def __call__(self, synthetic: torch.Tensor, synthetic_condition: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            grid = self.discriminator(synthetic, synthetic_condition)
        return 1.0 - grid.mean(dim=(-1, -2, -3))


def build_detector(config: DetectorConfig) -> DissimilarityDetector:
    return DissimilarityDetector(config)
