"""histossl: contrastive self-supervised pre-training for histopathology patches.

Library layout:

* ``slides`` / ``tissue`` / ``sampling`` / ``manifest`` -- slide sources,
  Otsu tissue masking, patch sampling, dataset manifests.
* ``augment`` -- stochastic view generation and the named stack registry.
* ``models`` / ``losses`` / ``lars`` / ``schedules`` / ``pretrain`` -- the
  contrastive training engine.
* ``evaluation`` -- linear probes, fine-tuning, patch-level metrics.
* ``diagnostics`` -- false-negative similarity stats, checkpoint curves,
  embedding export with PCA.
* ``config`` / ``sweep`` / ``cli`` -- experiment configuration, grid
  sweeps, command-line interface.
"""

from .augment import AugmentationStack, TransformSpec, ViewPair, compose_stack, generate_views
from .config import ExperimentConfig, parse_config
from .evaluation import MetricsReport, ProbeConfig, evaluate, finetune, linear_probe
from .losses import EmbeddingBatch, cosine_similarity, info_nce_loss, nt_xent_loss
from .manifest import Manifest, Patch, load_manifest, write_manifest
from .models import EncoderConfig, build_model, encode_project
from .pretrain import PretrainConfig, RunRecord, pretrain, resume
from .sampling import build_supervised_dataset, make_slide_subsets, sample_unsupervised_patches
from .slides import SlideSource, SyntheticSlideSpec, generate_synthetic_slide
from .tissue import compute_tissue_mask

__version__ = "0.1.0"
