"""Toy conditional generator and patch discriminator.

The generator maps one-hot label maps to RGB in [0,1] through a small
U-Net. Training always fits the discriminator to separate real renders from
generator output; the `adversarial` flag only controls whether that signal
reaches the generator. With it off, the generator sees a pure L1 objective,
which is deterministic-stable on the toy world, while the returned
discriminator is still a trained model usable by the transfer and
discriminator heads.

Only in-distribution class ids exist as generator input channels. Label
maps containing other ids (OoD included) must first pass through a
segmentation prediction; feeding them directly is an error.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..errors import InputError, TrainingFailure
from ..seeding import derive_seed, rng
from ..toyworld import ClassSet

__all__ = [
    "ToyGenerator",
    "PatchDiscriminator",
    "one_hot_labels",
    "train_toy_cgan",
    "generate_rgb",
]


def one_hot_labels(labels: np.ndarray, class_set: ClassSet) -> torch.Tensor:
    """Labels H x W -> one-hot C x H x W float tensor over in-dist channels.

    Raises on any id without a channel (OoD ids in particular).
    """
    channel_ids = class_set.prob_channel_ids
    lut = np.full(256, -1, dtype=np.int64)
    for i, cid in enumerate(channel_ids):
        lut[cid] = i
    idx = lut[labels]
    if (idx < 0).any():
        bad = int(labels[idx < 0].flat[0])
        raise InputError(
            f"class id {bad} has no input channel (channels cover in-distribution ids "
            f"{list(channel_ids)}); map the label field through a prediction first"
        )
    onehot = np.zeros((len(channel_ids),) + labels.shape, dtype=np.float32)
    rows, cols = np.indices(labels.shape)
    onehot[idx, rows, cols] = 1.0
    return torch.from_numpy(onehot)


class ToyGenerator(nn.Module):
    """Small U-Net: one-hot labels C x H x W -> rgb 3 x H x W in [0,1]."""

    def __init__(self, n_label_channels: int, base: int = 32):
        super().__init__()
        self.n_label_channels = n_label_channels
        self.base = base
        self.enc1 = nn.Conv2d(n_label_channels, base, 3, padding=1)
        self.enc2 = nn.Conv2d(base, 2 * base, 3, padding=1)
        self.mid = nn.Conv2d(2 * base, 2 * base, 3, padding=1)
        self.dec2 = nn.Conv2d(4 * base, base, 3, padding=1)
        self.dec1 = nn.Conv2d(2 * base, base, 3, padding=1)
        self.out = nn.Conv2d(base, 3, 1)
        self.pool = nn.MaxPool2d(2, 2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, onehot: torch.Tensor) -> torch.Tensor:
        if onehot.shape[-3] != self.n_label_channels:
            raise InputError(
                f"generator expects {self.n_label_channels} label channels, got {onehot.shape[-3]}"
            )
        relu = nn.functional.relu
        e1 = relu(self.enc1(onehot))
        e2 = relu(self.enc2(self.pool(e1)))
        m = relu(self.mid(self.pool(e2)))
        d2 = relu(self.dec2(torch.cat([self.up(m), e2], dim=-3)))
        d1 = relu(self.dec1(torch.cat([self.up(d2), e1], dim=-3)))
        return torch.sigmoid(self.out(d1))

    def config_dict(self) -> dict:
        return {"n_label_channels": self.n_label_channels, "base": self.base}


class PatchDiscriminator(nn.Module):
    """Conditional patch discriminator: (rgb, one-hot labels) -> realism grid
    in [0,1]. Fully convolutional, so it applies to any input size."""

    def __init__(self, n_label_channels: int, base: int = 16):
        super().__init__()
        self.n_label_channels = n_label_channels
        self.base = base
        self.conv1 = nn.Conv2d(3 + n_label_channels, base, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(base, 2 * base, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * base, 4 * base, 4, stride=1, padding=1)
        self.proj = nn.Conv2d(4 * base, 1, 4, stride=1, padding=1)

    def feature_convs(self) -> nn.Sequential:
        """The first three convolutions (with their activations), sharing
        this discriminator's parameters."""
        act = nn.LeakyReLU(0.2)
        return nn.Sequential(self.conv1, act, self.conv2, act, self.conv3, act)

    def forward(self, rgb: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if rgb.shape[-3] != 3 or condition.shape[-3] != self.n_label_channels:
            raise InputError(
                f"discriminator expects 3 rgb + {self.n_label_channels} condition channels"
            )
        x = torch.cat([rgb, condition], dim=-3)
        act = nn.functional.leaky_relu
        x = act(self.conv1(x), 0.2)
        x = act(self.conv2(x), 0.2)
        x = act(self.conv3(x), 0.2)
        return torch.sigmoid(self.proj(x))

    def config_dict(self) -> dict:
        return {"n_label_channels": self.n_label_channels, "base": self.base}


def _in_dist_tensors(dataset, class_set: ClassSet) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """(one-hot label, rgb) tensor pairs for images free of OoD pixels."""
    onehots, rgbs = [], []
    for im in dataset.images:
        if im.ood_mask.any():
            continue
        onehots.append(one_hot_labels(im.labels, class_set))
        rgbs.append(torch.from_numpy(im.rgb.astype(np.float32).transpose(2, 0, 1) / 255.0))
    return onehots, rgbs


def train_toy_cgan(
    dataset,
    seed: int,
    adversarial: bool = False,
    epochs: int = 12,
    lr: float = 1e-3,
    batch_size: int = 8,
    holdout_fraction: float = 0.2,
    l1_threshold: float = 0.05,
    generator_base: int = 32,
    discriminator_base: int = 16,
    adversarial_weight: float = 0.05,
) -> tuple[ToyGenerator, PatchDiscriminator, dict]:
    """Fit generator and discriminator on (labels -> rgb) pairs.

    Trains only on images without OoD pixels (no input channel exists for
    OoD ids). Fails with a training-failure report if the generator's
    held-out L1 does not reach l1_threshold, or if the loss goes NaN.
    """
    class_set = dataset.class_set
    onehots, rgbs = _in_dist_tensors(dataset, class_set)
    if len(onehots) < 4:
        raise InputError(
            f"cgan training needs at least 4 OoD-free images, found {len(onehots)}"
        )
    n_holdout = max(1, int(round(holdout_fraction * len(onehots))))
    train_x, train_y = onehots[:-n_holdout], rgbs[:-n_holdout]
    hold_x, hold_y = onehots[-n_holdout:], rgbs[-n_holdout:]

    torch.manual_seed(derive_seed(seed, 20))
    generator = ToyGenerator(len(class_set.prob_channel_ids), base=generator_base)
    discriminator = PatchDiscriminator(len(class_set.prob_channel_ids), base=discriminator_base)
    opt_g = torch.optim.Adam(generator.parameters(), lr=lr)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=lr)
    bce = nn.BCELoss()
    order_rng = rng(seed, 21)

    curve = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(train_x))
        epoch_l1 = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x = torch.stack([train_x[i] for i in idx])
            y = torch.stack([train_y[i] for i in idx])

            fake = generator(x)
            d_real = discriminator(y, x)
            d_fake = discriminator(fake.detach(), x)
            loss_d = 0.5 * (bce(d_real, torch.ones_like(d_real)) + bce(d_fake, torch.zeros_like(d_fake)))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            l1 = (fake - y).abs().mean()
            loss_g = l1
            if adversarial:
                d_out = discriminator(fake, x)
                loss_g = loss_g + adversarial_weight * bce(d_out, torch.ones_like(d_out))
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            if not torch.isfinite(loss_g) or not torch.isfinite(loss_d):
                raise TrainingFailure(
                    f"cgan loss went non-finite at epoch {epoch}",
                    summary={"epoch": epoch, "loss_g": loss_g.detach().item(), "loss_d": loss_d.detach().item()},
                )
            epoch_l1.append(l1.detach().item())
        curve.append(sum(epoch_l1) / len(epoch_l1))

    generator.eval()
    with torch.no_grad():
        holdout_l1 = float(
            torch.stack([(generator(x[None]) - y[None]).abs().mean() for x, y in zip(hold_x, hold_y)]).mean()
        )
    summary = {
        "holdout_l1": holdout_l1,
        "epochs": epochs,
        "adversarial": adversarial,
        "train_images": len(train_x),
        "holdout_images": len(hold_x),
        "l1_curve": curve,
    }
    if holdout_l1 > l1_threshold:
        raise TrainingFailure(
            f"generator held-out L1 {holdout_l1:.4f} above threshold {l1_threshold}",
            summary=summary,
        )
    return generator, discriminator, summary


def generate_rgb(generator: ToyGenerator, labels: np.ndarray, class_set: ClassSet) -> np.ndarray:
    """Run the generator on one label map; returns uint8 H x W x 3."""
    generator.eval()
    with torch.no_grad():
        out = generator(one_hot_labels(labels, class_set)[None])[0]
    arr = out.numpy().transpose(1, 2, 0)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
