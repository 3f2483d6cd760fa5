"""Contrastive losses over paired embedding batches.

A batch holds 2N projected embeddings with an explicit anchor-positive
pairing (a fixed-point-free involution on row indices).  The normalized
temperature-scaled loss treats every row as an anchor once:

    loss_i = -log( exp(sim(z_i, z_p(i)) / t) / sum_{k != i} exp(sim(z_i, z_k) / t) )

with cosine similarity and temperature t; the mean over all 2N anchors
is returned.  The denominator has exactly 2N-1 terms.  The plain
dot-product variant with unit temperature is exposed as the same kernel
under a different similarity.

Losses are computed with log-sum-exp (max-subtraction) stabilization
and are differentiable through torch autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = [
    "NonFiniteError",
    "EmbeddingBatch",
    "paired_batch",
    "cosine_similarity",
    "nt_xent_loss",
    "info_nce_loss",
]


class NonFiniteError(FloatingPointError):
    """A numeric input or result was NaN/inf where finiteness is required."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def validate_pairing(pairing: np.ndarray, n_rows: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (n_rows,):
        raise ValueError(f"pairing must have shape ({n_rows},), got {pairing.shape}")
    idx = np.arange(n_rows)
    if np.any(pairing == idx):
        raise ValueError("pairing maps some row to itself")
    if not np.array_equal(pairing[pairing], idx):
        raise ValueError("pairing is not an involution; rows must form disjoint pairs")
    return pairing


@dataclass
class EmbeddingBatch:
    """2N projected embeddings plus their anchor-positive pairing."""

    embeddings: torch.Tensor  # 2N x d
    pairing: np.ndarray = field(default=None)  # pairing[i] = index of i's positive
    temperature: float = 0.5

    def __post_init__(self):
        self.embeddings = _as_tensor(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {tuple(self.embeddings.shape)}")
        n = self.embeddings.shape[0]
        if n < 4 or n % 2 != 0:
            raise ValueError(f"need an even number of rows >= 4 (2N with N >= 2), got {n}")
        if self.pairing is None:
            self.pairing = default_pairing(n // 2)
        self.pairing = validate_pairing(self.pairing, n)
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def n_pairs(self) -> int:
        return self.embeddings.shape[0] // 2


def default_pairing(n_pairs: int) -> np.ndarray:
    """Pairing for the [anchors; positives] block layout: i <-> i+N."""
    idx = np.arange(2 * n_pairs)
    return np.concatenate([idx[n_pairs:], idx[:n_pairs]])


def paired_batch(z_a, z_b, temperature: float = 0.5) -> EmbeddingBatch:
    """Stack anchor-side and positive-side projections into one batch."""
    za, zb = _as_tensor(z_a), _as_tensor(z_b)
    if za.shape != zb.shape:
        raise ValueError(f"anchor/positive shapes differ: {tuple(za.shape)} vs {tuple(zb.shape)}")
    z = torch.cat([za, zb], dim=0)
    return EmbeddingBatch(z, default_pairing(za.shape[0]), temperature)


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two vectors; rejects zero vectors."""
    u, v = _as_tensor(u).reshape(-1), _as_tensor(v).reshape(-1)
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(u @ v / (nu * nv))


def _check_finite(z: torch.Tensor) -> None:
    if not torch.isfinite(z).all():
        raise NonFiniteError("embeddings contain NaN or infinite values")


def _contrastive_loss(
    z: torch.Tensor, pairing: np.ndarray, temperature: float, similarity: str
) -> torch.Tensor:
    _check_finite(z)
    n = z.shape[0]
    if similarity == "cosine":
        norms = torch.linalg.vector_norm(z, dim=1, keepdim=True)
        if (norms == 0).any():
            raise ValueError("zero-norm embedding row: representation collapsed")
        zn = z / norms
        logits = (zn @ zn.T) / temperature
    elif similarity == "dot":
        logits = (z @ z.T) / temperature
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    # logsumexp performs the max-subtraction stabilization; -inf self terms
    # drop out, leaving exactly 2N-1 denominator terms per anchor.
    log_denom = torch.logsumexp(logits, dim=1)
    pos = logits[torch.arange(n), torch.as_tensor(pairing)]
    return (log_denom - pos).mean()


def nt_xent_loss(batch: EmbeddingBatch) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over all 2N anchors."""
    return _contrastive_loss(batch.embeddings, batch.pairing, batch.temperature, "cosine")


def info_nce_loss(batch: EmbeddingBatch) -> torch.Tensor:
    """Dot-product contrastive loss at unit temperature (same kernel)."""
    return _contrastive_loss(batch.embeddings, batch.pairing, 1.0, "dot")
