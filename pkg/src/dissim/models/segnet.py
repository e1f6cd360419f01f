"""Toy segmentation net: rgb -> per-pixel class distribution.

A small encoder-decoder with three pooling stages, trained with per-pixel
cross-entropy on in-distribution classes only. OoD pixels carry no
supervision (there is no output channel for them), so at inference they
receive whatever in-distribution distribution the net extrapolates.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..errors import InputError, TrainingFailure
from ..seeding import derive_seed, rng
from ..toyworld import ClassSet

__all__ = ["ToySegNet", "train_toy_segnet", "segnet_forward", "segnet_predict"]

_IGNORE = -100


class ToySegNet(nn.Module):
    def __init__(self, n_classes: int, base: int = 16):
        super().__init__()
        self.n_classes = n_classes
        self.base = base
        b = base
        self.enc1 = nn.Conv2d(3, b, 3, padding=1)
        self.enc2 = nn.Conv2d(b, 2 * b, 3, padding=1)
        self.enc3 = nn.Conv2d(2 * b, 4 * b, 3, padding=1)
        self.dec3 = nn.Conv2d(4 * b, 2 * b, 3, padding=1)
        self.dec2 = nn.Conv2d(6 * b, 2 * b, 3, padding=1)
        self.dec1 = nn.Conv2d(4 * b, b, 3, padding=1)
        self.out = nn.Conv2d(b, n_classes, 1)
        self.pool = nn.MaxPool2d(2, 2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        """Logits B x C x H x W."""
        relu = nn.functional.relu
        e1 = relu(self.enc1(rgb))
        e2 = relu(self.enc2(self.pool(e1)))
        e3 = relu(self.enc3(self.pool(e2)))
        d3 = relu(self.dec3(self.pool(e3)))
        d2 = relu(self.dec2(torch.cat([self.up(d3), e3], dim=-3)))
        d1 = relu(self.dec1(torch.cat([self.up(d2), e2], dim=-3)))
        return self.out(self.up(d1))

    def config_dict(self) -> dict:
        return {"n_classes": self.n_classes, "base": self.base}


def _target_indices(labels: np.ndarray, class_set: ClassSet) -> torch.Tensor:
    """Class-channel targets with OoD pixels marked ignore."""
    lut = np.full(256, _IGNORE, dtype=np.int64)
    for i, cid in enumerate(class_set.prob_channel_ids):
        lut[cid] = i
    return torch.from_numpy(lut[labels])


def train_toy_segnet(
    dataset,
    seed: int,
    epochs: int = 6,
    lr: float = 1e-3,
    batch_size: int = 4,
    holdout_fraction: float = 0.2,
    accuracy_target: float = 0.9,
    base: int = 16,
) -> tuple[ToySegNet, dict]:
    """Train on the dataset's (rgb, labels) pairs; fail below the accuracy
    target on held-out in-distribution pixels."""
    class_set = dataset.class_set
    images = dataset.images
    if len(images) < 5:
        raise InputError(f"segnet training needs at least 5 images, got {len(images)}")
    n_holdout = max(1, int(round(holdout_fraction * len(images))))
    train_imgs, hold_imgs = images[:-n_holdout], images[-n_holdout:]

    torch.manual_seed(derive_seed(seed, 30))
    model = ToySegNet(len(class_set.prob_channel_ids), base=base)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    criterion = nn.CrossEntropyLoss(ignore_index=_IGNORE)
    order_rng = rng(seed, 31)

    xs = [torch.from_numpy(im.rgb.astype(np.float32).transpose(2, 0, 1) / 255.0) for im in train_imgs]
    ys = [_target_indices(im.labels, class_set) for im in train_imgs]

    curve = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(xs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = model(torch.stack([xs[i] for i in idx]))
            loss = criterion(logits, torch.stack([ys[i] for i in idx]))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if not torch.isfinite(loss):
                raise TrainingFailure(
                    f"segnet loss went non-finite at epoch {epoch}",
                    summary={"epoch": epoch},
                )
            losses.append(loss.detach().item())
        curve.append(sum(losses) / len(losses))

    model.eval()
    correct = total = 0
    channel_ids = np.asarray(class_set.prob_channel_ids, dtype=np.uint8)
    for im in hold_imgs:
        probs = segnet_forward(model, im.rgb)
        pred = channel_ids[probs.argmax(axis=-1)]
        in_dist = ~class_set.ood_mask(im.labels)
        correct += int((pred[in_dist] == im.labels[in_dist]).sum())
        total += int(in_dist.sum())
    accuracy = correct / max(total, 1)
    summary = {
        "holdout_accuracy": accuracy,
        "epochs": epochs,
        "train_images": len(train_imgs),
        "holdout_images": len(hold_imgs),
        "loss_curve": curve,
    }
    if accuracy < accuracy_target:
        raise TrainingFailure(
            f"segnet held-out accuracy {accuracy:.4f} below target {accuracy_target}",
            summary=summary,
        )
    return model, summary


def segnet_forward(model: ToySegNet, rgb: np.ndarray) -> np.ndarray:
    """Per-pixel class distribution H x W x C (softmax; rows sum to 1)."""
    model.eval()
    x = torch.from_numpy(rgb.astype(np.float32).transpose(2, 0, 1) / 255.0)
    with torch.no_grad():
        logits = model(x[None])[0]
        probs = torch.softmax(logits, dim=0)
    return probs.numpy().transpose(1, 2, 0)


def segnet_predict(model: ToySegNet, rgb: np.ndarray, class_set: ClassSet) -> tuple[np.ndarray, np.ndarray]:
    """(pred_labels, pred_probs) with channel indices mapped back to ids."""
    probs = segnet_forward(model, rgb)
    channel_ids = np.asarray(class_set.prob_channel_ids, dtype=np.uint8)
    return channel_ids[probs.argmax(axis=-1)], probs
