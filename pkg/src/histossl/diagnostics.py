"""Representation diagnostics.

* :func:`false_negative_stats` quantifies how often negatives sit close
  to their anchor in embedding space (cosine similarity above a
  threshold), the signature of false negatives in datasets with few
  classes.  Counts run over all ordered anchor-negative pairs within
  each mini-batch, positives excluded.
* :func:`checkpoint_curve` probes a series of checkpoints with an
  identical linear-probe configuration, pairing each checkpoint's
  self-supervised loss with its downstream accuracy.
* :func:`export_embeddings` writes a class-balanced sample of backbone
  features to CSV, optionally with a 2-D PCA projection for plotting.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .evaluation import ProbeConfig, linear_probe
from .losses import EmbeddingBatch
from .manifest import Manifest, load_patch_pixels
from .models import ContrastiveModel, views_to_tensor
from .pretrain import model_from_checkpoint

__all__ = [
    "SimilarityStats",
    "false_negative_stats",
    "checkpoint_curve",
    "pca_projection",
    "export_embeddings",
]

HISTOGRAM_BINS = 50


@dataclass
class SimilarityStats:
    """Distribution of anchor-negative cosine similarities."""

    histogram: np.ndarray  # counts per bin
    bin_edges: np.ndarray  # HISTOGRAM_BINS + 1 uniform edges over [-1, 1]
    fraction_above: dict[float, float]
    n_pairs: int

    def __post_init__(self):
        if int(self.histogram.sum()) != self.n_pairs:
            raise ValueError("histogram mass must equal the number of pairs")
        for t, frac in self.fraction_above.items():
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"fraction above {t} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "histogram": self.histogram.tolist(),
                "bin_edges": self.bin_edges.tolist(),
                "fraction_above": {str(k): v for k, v in self.fraction_above.items()},
                "n_pairs": self.n_pairs,
            },
            indent=2,
        )


def false_negative_stats(
    batches: EmbeddingBatch | list[EmbeddingBatch],
    thresholds: tuple[float, ...] = (0.9,),
) -> SimilarityStats:
    """Cosine-similarity statistics over ordered anchor-negative pairs.

    For a batch of 2N rows every anchor contributes 2N-2 ordered pairs
    (self and its positive excluded).  Multiple batches accumulate into
    one histogram of 50 uniform bins over [-1, 1].
    """
    if isinstance(batches, EmbeddingBatch):
        batches = [batches]
    if not batches:
        raise ValueError("no batches given")
    edges = np.linspace(-1.0, 1.0, HISTOGRAM_BINS + 1)
    hist = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    above = {float(t): 0 for t in thresholds}
    n_pairs = 0
    for batch in batches:
        z = batch.embeddings.detach().cpu().numpy().astype(np.float64)
        n = z.shape[0]
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm embedding row")
        zn = z / norms
        sims = zn @ zn.T
        mask = np.ones((n, n), dtype=bool)
        np.fill_diagonal(mask, False)
        mask[np.arange(n), batch.pairing] = False
        values = np.clip(sims[mask], -1.0, 1.0)
        hist += np.histogram(values, bins=edges)[0]
        for t in above:
            above[t] += int((values > t).sum())
        n_pairs += values.size
    fraction_above = {t: c / n_pairs for t, c in above.items()}
    return SimilarityStats(hist, edges, fraction_above, n_pairs)


def checkpoint_curve(
    checkpoint_paths,
    train_manifest: Manifest,
    test_manifest: Manifest,
    config: ProbeConfig | None = None,
) -> list[dict]:
    """Probe each checkpoint under one fixed configuration.

    Returns rows ``{epoch, ssl_loss, probe_accuracy}`` ordered as given.
    The self-supervised loss is the checkpoint's recorded epoch mean.
    Missing checkpoints are skipped with a warning rather than failing
    the whole curve.
    """
    config = config or ProbeConfig()
    rows = []
    for path in checkpoint_paths:
        path = Path(path)
        if not path.exists():
            warnings.warn(f"checkpoint {path} missing; skipping", stacklevel=2)
            continue
        model, _, payload = model_from_checkpoint(path)
        run = linear_probe(model, train_manifest, test_manifest, config)
        rows.append(
            {
                "epoch": payload["epoch"],
                "ssl_loss": payload["epoch_losses"][-1],
                "probe_accuracy": run.metrics.accuracy,
            }
        )
    return rows


def pca_projection(features: np.ndarray, n_components: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Principal axes by eigendecomposition of the feature covariance.

    Returns (projected, components, mean) where ``components`` rows are
    orthonormal axes sorted by decreasing variance; ``projected`` is the
    centered data expressed in those axes.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D feature matrix with at least two rows")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    components = eigvecs[:, order].T
    return centered @ components.T, components, mean


def _balanced_sample(labels: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    classes = np.unique(labels)
    per_class = n_samples // len(classes)
    extra = n_samples - per_class * len(classes)
    chosen = []
    for i, c in enumerate(classes):
        pool = np.flatnonzero(labels == c)
        want = per_class + (1 if i < extra else 0)
        if want > len(pool):
            warnings.warn(
                f"class {c}: only {len(pool)} samples available of {want} requested",
                stacklevel=3,
            )
            want = len(pool)
        pick = rng.choice(len(pool), size=want, replace=False)
        chosen.append(pool[np.sort(pick)])
    return np.concatenate(chosen)


def export_embeddings(
    model: ContrastiveModel | str | Path,
    manifest: Manifest,
    out_path: str | Path,
    n_samples: int = 5000,
    seed: int = 0,
    input_size: int | None = None,
    batch_size: int = 64,
    with_pca: bool = False,
    device: str = "cpu",
) -> dict:
    """Write backbone features of a class-balanced patch sample to CSV.

    The CSV columns are ``patch_id,label,f0..f{d-1}``.  With
    ``with_pca`` a companion ``*_pca.csv`` holds the 2-D projection.
    Requesting more samples than available takes everything and warns.
    Sampling is deterministic in (manifest, n_samples, seed).
    """
    if not isinstance(model, ContrastiveModel):
        model, _, _ = model_from_checkpoint(model)
    if manifest.dataset_kind != "supervised":
        raise ValueError("embedding export expects a labelled manifest")
    labels = manifest.labels()
    rng = np.random.default_rng([int(seed), 90001])
    take = _balanced_sample(labels, min(n_samples, len(labels)), rng)
    if n_samples > len(labels):
        warnings.warn(
            f"requested {n_samples} samples but only {len(labels)} available; taking all",
            stacklevel=2,
        )

    device_t = torch.device(device)
    model.to(device_t).eval()
    feats = []
    with torch.no_grad():
        for b0 in range(0, len(take), batch_size):
            idx = take[b0 : b0 + batch_size]
            imgs = []
            for i in idx:
                px = load_patch_pixels(manifest.records[int(i)], manifest.root)
                if input_size is not None and px.shape[0] != input_size:
                    import cv2

                    px = cv2.resize(px, (input_size, input_size), interpolation=cv2.INTER_LINEAR)
                imgs.append(px)
            x = views_to_tensor(np.stack(imgs)).to(device_t)
            feats.append(model.encoder(x).cpu().numpy())
    features = np.concatenate(feats, axis=0)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    d = features.shape[1]
    with out_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["patch_id", "label"] + [f"f{i}" for i in range(d)])
        for row_i, i in enumerate(take):
            rec = manifest.records[int(i)]
            writer.writerow([rec.patch_id, rec.label] + [repr(v) for v in features[row_i]])

    result = {
        "path": out_path,
        "patch_ids": [manifest.records[int(i)].patch_id for i in take],
        "labels": labels[take],
        "features": features,
    }
    if with_pca:
        projected, components, _ = pca_projection(features, 2)
        pca_path = out_path.with_name(out_path.stem + "_pca.csv")
        with pca_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["patch_id", "label", "p0", "p1"])
            for row_i, i in enumerate(take):
                rec = manifest.records[int(i)]
                writer.writerow([rec.patch_id, rec.label, repr(projected[row_i, 0]), repr(projected[row_i, 1])])
        result["pca_path"] = pca_path
        result["projection"] = projected
        result["components"] = components
    return result
