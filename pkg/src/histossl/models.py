"""Encoders and projection heads.

Two backbones: the full-scale ResNet-50 and a four-block convolutional
network for desk-scale experiments on small inputs.  Both feed a
two-layer MLP projection head; the contrastive loss acts on the head's
output, while downstream evaluation reads the backbone's pooled
features.  Projections are intentionally not normalized here; the
cosine similarity inside the loss owns that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .losses import EmbeddingBatch, default_pairing

__all__ = ["EncoderConfig", "SmallCNN", "ContrastiveModel", "build_model", "encode_project"]

BACKBONES = ("resnet50", "small_cnn")


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "resnet50"
    projection_dim: int = 128
    projection_hidden: int | None = None  # None: same as backbone feature dim

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.projection_dim < 2:
            raise ValueError("projection_dim must be >= 2")


class SmallCNN(nn.Module):
    """Four conv-BN-ReLU-pool blocks with global average pooling.

    Handles inputs of 16 px and up; feature dimension 256.
    """

    feature_dim = 256

    def __init__(self):
        super().__init__()
        blocks = []
        channels = [3, 32, 64, 128, 256]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks += [
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


def _make_backbone(name: str) -> tuple[nn.Module, int]:
    if name == "small_cnn":
        return SmallCNN(), SmallCNN.feature_dim
    import torchvision.models

    net = torchvision.models.resnet50(weights=None)
    dim = net.fc.in_features
    net.fc = nn.Identity()
    return net, dim


class ContrastiveModel(nn.Module):
    """Backbone plus projection head; forward yields both outputs."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder, self.feature_dim = _make_backbone(config.backbone)
        hidden = config.projection_hidden or self.feature_dim
        self.projector = nn.Sequential(
            nn.Linear(self.feature_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, config.projection_dim),
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.encoder(x)
        return features, self.projector(features)


def build_model(config: EncoderConfig, seed: int | None = None) -> ContrastiveModel:
    """Construct a model, optionally with a reproducible random init."""
    if seed is not None:
        torch.manual_seed(seed)
    return ContrastiveModel(config)


def views_to_tensor(views: np.ndarray | torch.Tensor) -> torch.Tensor:
    """uint8 BxHxWx3 image stack to float BCHW in [0, 1]."""
    if isinstance(views, torch.Tensor):
        t = views
        if t.ndim == 4 and t.shape[1] == 3:
            return t.float()
    else:
        arr = np.asarray(views)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected BxHxWx3 view stack, got shape {arr.shape}")
        t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected BxHxWx3 view stack, got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).float() / 255.0


@torch.no_grad()
def encode_project(
    views: np.ndarray | torch.Tensor,
    model: ContrastiveModel,
    temperature: float = 0.5,
    chunk_size: int = 512,
) -> EmbeddingBatch:
    """Project a [anchors; positives] view stack in inference mode.

    The stack's first half are anchors, the second half their positives
    in order; the returned batch carries the matching pairing.
    """
    x = views_to_tensor(views)
    n = x.shape[0]
    if n < 4 or n % 2 != 0:
        raise ValueError(f"view stack must hold 2N views with N >= 2, got {n}")
    was_training = model.training
    model.eval()
    outs = []
    for i in range(0, n, chunk_size):
        _, z = model(x[i : i + chunk_size])
        outs.append(z)
    if was_training:
        model.train()
    z = torch.cat(outs, dim=0)
    return EmbeddingBatch(z, default_pairing(n // 2), temperature)
