"""Run configuration: one flat key=value file covering every pipeline stage.

The file format is the same line format the dataset manifest uses: one
`key=value` per line, `#` comments and blank lines ignored. Every key has a
default, so an empty file (or none at all) is a complete configuration.
Unknown keys are rejected rather than ignored; a typo should fail loudly,
not silently train with defaults.

Precedence, lowest to highest: built-in defaults, config file, explicit
command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Optional

from .datasets import read_manifest, write_manifest
from .errors import InputError

__all__ = ["RunConfig", "CONFIG_FILE_NAME"]

CONFIG_FILE_NAME = "config.txt"

_HEAD_CHOICES = ("resize", "deconv", "fc", "transfer", "discriminator")
_GENERATOR_CHOICES = ("oracle", "gan")


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise InputError(f"config key {key!r}: {text!r} is not a boolean")


def _parse_ints(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise InputError(f"config key {key!r}: {text!r} is not a comma-separated int list") from exc


def _parse_floats(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise InputError(f"config key {key!r}: {text!r} is not a comma-separated float list") from exc


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline in one flat namespace.

    Path-valued fields stay strings ("" meaning unset) so the whole config
    round-trips through text unchanged.
    """

    # dataset synthesis
    n_images: int = 40
    image_size: int = 128
    ood_rate: float = 0.25
    corrupt_rate: float = 0.0
    # patch grid and negative gate
    patch_size: int = 64
    tau: float = 0.5
    # detector
    head: str = "fc"
    base_filters: int = 16
    conv_stacks: tuple[int, ...] = (2, 2, 3)
    lambda_d: float = 1.0
    # detector training budget
    epochs: int = 3
    learning_rate: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    train_images: int = 0
    # synthetic side
    generator: str = "oracle"
    render_noise: float = 0.0
    # upstream nets
    gan_epochs: int = 12
    gan_lr: float = 1e-3
    gan_adversarial: bool = False
    gan_base: int = 32
    disc_base: int = 16
    seg_epochs: int = 6
    seg_lr: float = 1e-3
    seg_base: int = 16
    # paths
    dataset: str = ""
    eval_dataset: str = ""
    gan_run: str = ""
    seg_run: str = ""
    # sweep
    lambda_values: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.head not in _HEAD_CHOICES:
            raise InputError(f"head {self.head!r} not one of {_HEAD_CHOICES}")
        if self.generator not in _GENERATOR_CHOICES:
            raise InputError(f"generator {self.generator!r} not one of {_GENERATOR_CHOICES}")
        for key in ("ood_rate", "corrupt_rate", "tau"):
            value = getattr(self, key)
            if not (0.0 <= value <= 1.0):
                raise InputError(f"{key} {value} outside [0, 1]")
        for key in ("n_images", "image_size", "patch_size", "base_filters", "epochs",
                    "batch_size", "gan_epochs", "gan_base", "disc_base", "seg_epochs", "seg_base"):
            value = getattr(self, key)
            if value < 1:
                raise InputError(f"{key} must be at least 1, got {value}")
        if self.train_images < 0:
            raise InputError(f"train_images must be >= 0, got {self.train_images}")
        if min(self.learning_rate, self.seg_lr, self.gan_lr) <= 0 or self.lambda_d <= 0:
            raise InputError("learning rates and lambda_d must be positive")
        if not self.lambda_values or any(v <= 0 for v in self.lambda_values):
            raise InputError(f"lambda_values must be positive, got {self.lambda_values}")

    @classmethod
    def _parse_one(cls, key: str, text: str):
        spec = {f.name: f for f in fields(cls)}
        if key not in spec:
            known = ", ".join(sorted(spec))
            raise InputError(f"unknown config key {key!r}; known keys: {known}")
        default = spec[key].default
        try:
            if isinstance(default, bool):
                return _parse_bool(text, key)
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
            if isinstance(default, str):
                return text
        except ValueError as exc:
            raise InputError(f"config key {key!r}: cannot parse {text!r}") from exc
        if key == "conv_stacks":
            return _parse_ints(text, key)
        if key == "lambda_values":
            return _parse_floats(text, key)
        raise InputError(f"config key {key!r} has no parser")

    @classmethod
    def from_entries(cls, entries: Mapping[str, str]) -> "RunConfig":
        parsed = {key: cls._parse_one(key, str(value)) for key, value in entries.items()}
        return cls(**parsed)

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        return cls.from_entries(read_manifest(Path(path)))

    def override(self, entries: Mapping[str, str]) -> "RunConfig":
        """New config with the given textual entries applied on top."""
        if not entries:
            return self
        parsed = {key: self._parse_one(key, str(value)) for key, value in entries.items()}
        return replace(self, **parsed)

    def to_entries(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            elif isinstance(value, tuple):
                out[f.name] = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                out[f.name] = repr(value)
            else:
                out[f.name] = str(value)
        return out

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_manifest(path, self.to_entries())
        return path
