"""Downstream evaluation of pre-trained encoders.

Three modes: ``linear`` trains a classifier on frozen backbone features
(the representation-quality measurement), ``finetune`` trains the whole
network from a checkpoint, and ``scratch`` trains from random
initialization.  All supervised training uses cosine-annealed learning
rates, inverse-frequency weighted sampling, and the light supervised
augmentation stack (tight crop, jitter, flips/rotations).  Features for
linear probing come from the backbone's pooled output, not the
projection head.

Metrics are patch-level: accuracy, per-class accuracy, confusion
matrix, and (for binary tasks) AUC computed by the midrank statistic.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import AugmentationStack, apply_stack, compose_stack, resize
from .manifest import Manifest, load_patch_pixels
from .models import ContrastiveModel, EncoderConfig, build_model, views_to_tensor
from .pretrain import model_from_checkpoint
from .schedules import cosine_anneal

__all__ = [
    "ProbeConfig",
    "MetricsReport",
    "ProbeRun",
    "FoldSeriesResult",
    "weighted_sampler_weights",
    "midrank_auc",
    "metrics_from_predictions",
    "evaluate",
    "linear_probe",
    "finetune",
    "run_fold_series",
    "state_hash",
]

MODES = ("linear", "finetune", "scratch")
RECIPES = ("linear", "breast", "skin", "scratch")


@dataclass(frozen=True)
class ProbeConfig:
    """Supervised training recipe for probes and fine-tuning.

    Optimizer presets: linear probing uses Adam at 0.01 for 20 epochs;
    fine-tuning uses Adam 1e-3 with weight decay 1e-4 ("breast") or
    Nesterov SGD 1e-4 with momentum 0.9 ("skin"); training from scratch
    uses Adam 1e-3.  Leaving ``epochs``/``initial_lr`` unset picks the
    preset values.
    """

    mode: str = "linear"
    recipe: str | None = None  # optimizer preset; defaults per mode
    epochs: int | None = None
    initial_lr: float | None = None
    weight_decay: float | None = None
    batch_size: int = 64
    seed: int = 0
    stack: str = "base"
    input_size: int = 224
    backbone: str = "resnet50"  # used when initializing without a checkpoint
    projection_dim: int = 128
    augment: bool = True
    checkpoint_selection: str = "final"  # final | best_val
    device: str = "cpu"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.recipe is not None and self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        if self.checkpoint_selection not in ("final", "best_val"):
            raise ValueError("checkpoint_selection must be 'final' or 'best_val'")

    def resolved(self) -> "ProbeConfig":
        """Fill epochs/lr/weight decay from the preset for this mode."""
        recipe = self.recipe or ("linear" if self.mode == "linear" else
                                 "scratch" if self.mode == "scratch" else "breast")
        presets = {
            "linear": dict(epochs=20, initial_lr=0.01, weight_decay=0.0),
            "breast": dict(epochs=50, initial_lr=1e-3, weight_decay=1e-4),
            "skin": dict(epochs=50, initial_lr=1e-4, weight_decay=0.0),
            "scratch": dict(epochs=50, initial_lr=1e-3, weight_decay=0.0),
        }[recipe]
        return dataclasses.replace(
            self,
            recipe=recipe,
            epochs=self.epochs if self.epochs is not None else presets["epochs"],
            initial_lr=self.initial_lr if self.initial_lr is not None else presets["initial_lr"],
            weight_decay=self.weight_decay if self.weight_decay is not None else presets["weight_decay"],
        )


@dataclass
class MetricsReport:
    """Patch-level test metrics; AUC present only for binary tasks."""

    accuracy: float
    per_class_accuracy: list[float]
    confusion: np.ndarray  # rows: true class, cols: predicted
    n_test: int
    auc: float | None = None

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion)
        trace_acc = float(np.trace(self.confusion)) / self.n_test
        if abs(trace_acc - self.accuracy) > 1e-9:
            raise ValueError("accuracy inconsistent with confusion matrix")

    def macro_accuracy(self) -> float:
        return float(np.mean(self.per_class_accuracy))

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "per_class_accuracy": self.per_class_accuracy,
                "confusion": self.confusion.tolist(),
                "n_test": self.n_test,
                "auc": self.auc,
            },
            indent=2,
        )


@dataclass
class ProbeRun:
    """A trained classifier plus its evaluation artifacts."""

    metrics: MetricsReport
    history: list[dict]
    init_hash: str
    encoder_hash_before: str
    encoder_hash_after: str
    classifier: "PatchClassifier"


@dataclass
class FoldSeriesResult:
    reports: list[MetricsReport]
    mean_accuracy: float
    std_accuracy: float


def state_hash(module: nn.Module) -> str:
    """SHA-256 over the module's parameters and buffers, order-stable."""
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def weighted_sampler_weights(labels) -> np.ndarray:
    """Inverse class-frequency weights: each class gets equal draw mass."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot weight an empty label list")
    counts = np.bincount(labels)
    return 1.0 / counts[labels]


def midrank_auc(labels, scores) -> float:
    """Rank-statistic AUC of binary labels with midrank tie handling."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics_from_predictions(
    y_true, y_pred, n_classes: int, scores=None
) -> MetricsReport:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("empty test set")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    accuracy = float(np.trace(confusion)) / y_true.size
    per_class = []
    for c in range(n_classes):
        total = confusion[c].sum()
        per_class.append(float(confusion[c, c]) / total if total else float("nan"))
    auc = None
    if n_classes == 2 and scores is not None:
        auc = midrank_auc(y_true, scores)
    return MetricsReport(accuracy, per_class, confusion, int(y_true.size), auc)


class PatchClassifier(nn.Module):
    """Backbone features plus a linear classification head."""

    def __init__(self, encoder: nn.Module, feature_dim: int, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(feature_dim, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


class _SupervisedData:
    """Pixels and labels of a supervised manifest, resized to input size."""

    def __init__(self, manifest: Manifest, input_size: int):
        if manifest.dataset_kind != "supervised":
            raise ValueError("supervised manifest required")
        if len(manifest) == 0:
            raise ValueError("empty manifest")
        self.input_size = input_size
        self.pixels = [
            load_patch_pixels(rec, manifest.root) for rec in manifest.records
        ]
        self.labels = manifest.labels()

    def __len__(self):
        return len(self.labels)

    def image(self, i: int, stack: AugmentationStack | None, rng) -> np.ndarray:
        if stack is not None:
            return apply_stack(self.pixels[i], stack, rng)
        return resize(self.pixels[i], self.input_size)


def _predict(classifier: PatchClassifier, data: _SupervisedData, batch_size: int, device) -> tuple[np.ndarray, np.ndarray]:
    classifier.eval()
    preds, probs = [], []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            imgs = np.stack([data.image(j, None, None) for j in range(i, min(i + batch_size, len(data)))])
            logits = classifier(views_to_tensor(imgs).to(device))
            p = torch.softmax(logits, dim=1)
            preds.append(logits.argmax(dim=1).cpu().numpy())
            probs.append(p.cpu().numpy())
    return np.concatenate(preds), np.concatenate(probs)


def evaluate(
    classifier: PatchClassifier,
    test_manifest: Manifest,
    input_size: int = 224,
    batch_size: int = 64,
    device: str = "cpu",
) -> MetricsReport:
    """Patch-wise metrics of a classifier on a supervised manifest."""
    n_classes = classifier.head.out_features
    data = _SupervisedData(test_manifest, input_size)
    preds, probs = _predict(classifier, data, batch_size, torch.device(device))
    scores = probs[:, 1] if n_classes == 2 else None
    return metrics_from_predictions(data.labels, preds, n_classes, scores)


def _resolve_init(
    init, config: ProbeConfig
) -> tuple[ContrastiveModel, int]:
    """Model from a checkpoint path, an existing model, or a seeded random init."""
    if isinstance(init, ContrastiveModel):
        return init, init.feature_dim
    if init is None:
        model = build_model(
            EncoderConfig(config.backbone, config.projection_dim), seed=config.seed
        )
        return model, model.feature_dim
    model, _, _ = model_from_checkpoint(init)
    return model, model.feature_dim


def _train_supervised(
    init,
    train_manifest: Manifest,
    test_manifest: Manifest,
    config: ProbeConfig,
    freeze_encoder: bool,
    val_manifest: Manifest | None,
) -> ProbeRun:
    config = config.resolved()
    device = torch.device(config.device)
    train_labels = set(train_manifest.labels().tolist())
    test_labels = set(test_manifest.labels().tolist())
    if train_labels != test_labels:
        raise ValueError(
            f"label sets differ between manifests: train {sorted(train_labels)} "
            f"vs test {sorted(test_labels)}"
        )
    n_classes = (
        len(train_manifest.class_names)
        if train_manifest.class_names
        else max(train_labels) + 1
    )

    model, feature_dim = _resolve_init(init, config)
    model.to(device)
    torch.manual_seed(config.seed)  # head init and any torch-side sampling
    classifier = PatchClassifier(model.encoder, feature_dim, n_classes).to(device)
    init_hash = state_hash(classifier)
    encoder_hash_before = state_hash(classifier.encoder)

    if freeze_encoder:
        for p in classifier.encoder.parameters():
            p.requires_grad_(False)
        trainable = list(classifier.head.parameters())
    else:
        trainable = list(classifier.parameters())

    if config.recipe == "skin":
        optimizer = torch.optim.SGD(
            trainable,
            lr=config.initial_lr,
            momentum=0.9,
            nesterov=True,
            weight_decay=config.weight_decay,
        )
    else:
        optimizer = torch.optim.Adam(
            trainable, lr=config.initial_lr, weight_decay=config.weight_decay
        )

    data = _SupervisedData(train_manifest, config.input_size)
    stack = compose_stack(config.stack, config.input_size) if config.augment else None
    weights = weighted_sampler_weights(data.labels)
    probabilities = weights / weights.sum()
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng([config.seed, 55331])

    history: list[dict] = []
    best_state = None
    best_val = -1.0
    for epoch in range(config.epochs):
        lr = cosine_anneal(config.initial_lr, epoch, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        draws = rng.choice(len(data), size=len(data), replace=True, p=probabilities)
        classifier.train()
        if freeze_encoder:
            classifier.encoder.eval()  # keep normalization statistics untouched
        epoch_losses = []
        for b0 in range(0, len(draws), config.batch_size):
            idx = draws[b0 : b0 + config.batch_size]
            imgs = np.stack([data.image(int(i), stack, rng) for i in idx])
            x = views_to_tensor(imgs).to(device)
            y = torch.as_tensor(data.labels[idx], device=device)
            optimizer.zero_grad()
            if freeze_encoder:
                with torch.no_grad():
                    feats = classifier.encoder(x)
                logits = classifier.head(feats)
            else:
                logits = classifier(x)
            loss = loss_fn(logits, y)
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        entry = {"epoch": epoch + 1, "train_loss": float(np.mean(epoch_losses)), "lr": lr}
        if val_manifest is not None:
            val_report = evaluate(
                classifier, val_manifest, config.input_size, config.batch_size, config.device
            )
            entry["val_accuracy"] = val_report.accuracy
            if config.checkpoint_selection == "best_val" and val_report.accuracy > best_val:
                best_val = val_report.accuracy
                best_state = {
                    k: v.detach().clone() for k, v in classifier.state_dict().items()
                }
        history.append(entry)

    if best_state is not None:
        classifier.load_state_dict(best_state)
    metrics = evaluate(
        classifier, test_manifest, config.input_size, config.batch_size, config.device
    )
    return ProbeRun(
        metrics=metrics,
        history=history,
        init_hash=init_hash,
        encoder_hash_before=encoder_hash_before,
        encoder_hash_after=state_hash(classifier.encoder),
        classifier=classifier,
    )


def linear_probe(
    init,
    train_manifest: Manifest,
    test_manifest: Manifest,
    config: ProbeConfig | None = None,
    val_manifest: Manifest | None = None,
) -> ProbeRun:
    """Train only a linear head on frozen backbone features.

    ``init`` is a checkpoint path, an in-memory model, or None for a
    seeded random encoder.  The encoder is bit-identical before and
    after (parameters frozen, normalization statistics not updated).
    """
    config = config or ProbeConfig()
    if config.mode != "linear":
        config = dataclasses.replace(config, mode="linear", recipe=None)
    return _train_supervised(init, train_manifest, test_manifest, config, True, val_manifest)


def finetune(
    init,
    train_manifest: Manifest,
    test_manifest: Manifest,
    config: ProbeConfig | None = None,
    val_manifest: Manifest | None = None,
) -> ProbeRun:
    """Train all weights from a checkpoint (or scratch when init is None)."""
    config = config or ProbeConfig(mode="finetune")
    if config.mode == "linear":
        raise ValueError("finetune() requires mode 'finetune' or 'scratch'")
    if config.mode == "scratch":
        init = None
    return _train_supervised(init, train_manifest, test_manifest, config, False, val_manifest)


def run_fold_series(
    mode: str,
    init,
    fold_manifests,
    test_manifest: Manifest,
    config: ProbeConfig | None = None,
    seeds=None,
) -> FoldSeriesResult:
    """One supervised run per (fold, seed); aggregate mean and std accuracy."""
    config = config or ProbeConfig(mode=mode)
    config = dataclasses.replace(config, mode=mode)
    folds = list(fold_manifests)
    if not folds:
        raise ValueError("no fold manifests given")
    seeds = list(seeds) if seeds is not None else list(range(len(folds)))
    if len(seeds) != len(folds):
        raise ValueError("need one seed per fold")
    reports = []
    for i, fold_manifest in enumerate(folds):
        if fold_manifest is None or len(fold_manifest) == 0:
            raise ValueError(f"missing or empty fold manifest at index {i}")
        run_config = dataclasses.replace(config, seed=seeds[i])
        if mode == "linear":
            run = linear_probe(init, fold_manifest, test_manifest, run_config)
        else:
            run = finetune(init, fold_manifest, test_manifest, run_config)
        reports.append(run.metrics)
    accs = np.array([r.accuracy for r in reports])
    return FoldSeriesResult(reports, float(accs.mean()), float(accs.std()))
