"""Flat experiment configuration with strict parsing.

A config file is a YAML mapping of known keys; unset keys fall back to
the full-scale defaults (temperature 0.5, batch 1024, 200 epochs, LARS
at lr 1.2, ResNet-50).  Parsing is total: unknown keys, type
mismatches, and out-of-range values raise errors naming the offending
key.  Every run persists its resolved config verbatim next to its
outputs, and the persisted file re-parses to an equal config.

The data root for resolving relative manifest paths can come from the
``HISTOSSL_DATA_ROOT`` environment variable.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .evaluation import ProbeConfig
from .pretrain import PretrainConfig

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "derived_lr", "DATA_ROOT_ENV"]

DATA_ROOT_ENV = "HISTOSSL_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending key."""


def derived_lr(batch_size: int) -> float:
    """Learning rate scaled with batch size: 0.3 * batch / 256."""
    return 0.3 * batch_size / 256.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of the pipeline as one flat record."""

    # run identity / paths
    run_id: str = "run"
    out_dir: str = "runs"
    data_root: str | None = None
    unsupervised_manifest: str | None = None
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    # patch geometry
    patch_size: int = 256
    input_size: int = 224
    mpp: float = 0.5
    # sampling
    max_per_slide: int = 1000
    min_coverage: float = 0.5
    min_class_coverage: float = 0.5
    overlap_fraction: float = 0.0
    per_class_cap: int = 75000
    val_per_class: int = 700
    test_per_class: int = 3700
    subset_sizes: tuple[int, ...] | None = None
    n_folds: int = 5
    # view generation
    augmentations: str = "simclr_original"
    custom_transforms: tuple | None = None  # list of transform dicts
    # encoder / pretraining
    backbone: str = "resnet50"
    projection_dim: int = 128
    projection_hidden: int | None = None
    batch_size: int = 1024
    epochs: int = 200
    base_lr: float = 1.2
    temperature: float = 0.5
    weight_decay: float = 1e-6
    momentum: float = 0.9
    trust_coefficient: float = 0.001
    accumulate_steps: int = 1
    checkpoint_epochs: tuple[int, ...] = (10, 20, 50, 100, 200)
    cache_pixels: bool = False
    # evaluation
    mode: str = "linear"
    probe_recipe: str | None = None
    probe_epochs: int | None = None
    probe_lr: float | None = None
    probe_weight_decay: float | None = None
    probe_batch_size: int = 64
    supervised_stack: str = "base"
    checkpoint_selection: str = "final"
    # randomness / execution
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    device: str = "cpu"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature: must be positive, got {self.temperature}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size: must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr: must be positive, got {self.base_lr}")
        if not 0 < self.mpp:
            raise ConfigError(f"mpp: must be positive, got {self.mpp}")
        if not 0 <= self.overlap_fraction < 1:
            raise ConfigError(
                f"overlap_fraction: must be in [0, 1), got {self.overlap_fraction}"
            )

    def resolved_data_root(self) -> Path | None:
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None

    def resolve_path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        root = self.resolved_data_root()
        if not p.is_absolute() and root is not None:
            return root / p
        return p

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            base_lr=self.base_lr,
            temperature=self.temperature,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            trust_coefficient=self.trust_coefficient,
            stack=self.augmentations,
            input_size=self.input_size,
            backbone=self.backbone,
            projection_dim=self.projection_dim,
            projection_hidden=self.projection_hidden,
            seed=self.seed,
            checkpoint_epochs=tuple(e for e in self.checkpoint_epochs if e <= self.epochs),
            accumulate_steps=self.accumulate_steps,
            cache_pixels=self.cache_pixels,
            device=self.device,
        )

    def probe_config(self, mode: str | None = None) -> ProbeConfig:
        return ProbeConfig(
            mode=mode or self.mode,
            recipe=self.probe_recipe,
            epochs=self.probe_epochs,
            initial_lr=self.probe_lr,
            weight_decay=self.probe_weight_decay,
            batch_size=self.probe_batch_size,
            seed=self.seed,
            stack=self.supervised_stack,
            input_size=self.input_size,
            backbone=self.backbone,
            projection_dim=self.projection_dim,
            checkpoint_selection=self.checkpoint_selection,
            device=self.device,
        )

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return _from_mapping({**self.to_dict(), **kwargs}, source="override")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}

_TUPLE_KEYS = {"checkpoint_epochs", "subset_sizes", "seeds", "custom_transforms"}
_INT_KEYS = {
    "patch_size", "input_size", "max_per_slide", "per_class_cap", "val_per_class",
    "test_per_class", "n_folds", "projection_dim", "projection_hidden", "batch_size",
    "epochs", "accumulate_steps", "probe_epochs", "probe_batch_size", "seed",
}
_FLOAT_KEYS = {
    "mpp", "min_coverage", "min_class_coverage", "overlap_fraction", "base_lr",
    "temperature", "weight_decay", "momentum", "trust_coefficient", "probe_lr",
    "probe_weight_decay",
}
_BOOL_KEYS = {"cache_pixels"}


def _coerce(key: str, value):
    if value is None:
        return None
    try:
        if key in _TUPLE_KEYS:
            if not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            if key in ("checkpoint_epochs", "subset_sizes", "seeds"):
                return tuple(int(v) for v in value)
            return tuple(value)
        if key in _BOOL_KEYS:
            if not isinstance(value, bool):
                raise TypeError("expected a boolean")
            return value
        if key in _INT_KEYS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError("expected an integer")
            return int(value)
        if key in _FLOAT_KEYS:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError("expected a number")
            return float(value)
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc} (got {value!r})") from None


def _from_mapping(mapping: dict, source: str) -> ExperimentConfig:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in {source}")
    kwargs = {key: _coerce(key, value) for key, value in mapping.items()}
    return ExperimentConfig(**kwargs)


def parse_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Load a YAML config file, apply overrides, fill defaults.

    ``path`` may be None (pure defaults).  An empty file is the
    all-defaults config.
    """
    mapping: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping of keys to values")
        mapping.update(loaded)
    if overrides:
        mapping.update({k: v for k, v in overrides.items() if v is not None})
    return _from_mapping(mapping, source=str(path) if path else "overrides")
