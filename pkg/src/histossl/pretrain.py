"""Self-supervised pre-training loop.

One run lives in a directory: ``metrics.jsonl`` (one JSON object per
epoch: run_id, epoch, loss, lr, wall_time_s), ``checkpoint_ep{N}.pt``
at the configured epochs, a rolling ``last.pt`` for resumption, and a
``run_record.json`` written when the run terminates (completed or
diverged).  All randomness is derived statelessly from
(seed, epoch, patch index), so an interrupted run resumed from
``last.pt`` retraces the remaining epochs exactly.

Divergence handling: a non-finite loss, a collapsed (zero-norm)
embedding, or an epoch-mean loss exceeding 10x the first epoch's mean
marks the run diverged and halts it instead of crashing.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationStack, apply_stack, compose_stack
from .lars import LARS, split_lars_param_groups
from .losses import NonFiniteError, nt_xent_loss, paired_batch
from .manifest import Manifest, load_patch_pixels
from .models import ContrastiveModel, EncoderConfig, build_model, views_to_tensor
from .schedules import cosine_anneal

__all__ = [
    "PretrainConfig",
    "RunRecord",
    "PretrainResult",
    "pretrain",
    "resume",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT_VERSION",
]

CHECKPOINT_FORMAT_VERSION = 1

DIVERGENCE_FACTOR = 10.0  # epoch mean above this multiple of the first epoch's mean


@dataclass(frozen=True)
class PretrainConfig:
    """Hyper-parameters of one self-supervised run.

    ``batch_size`` counts source patches per step (N); each step sees 2N
    views.  Defaults follow the full-scale recipe: LARS at base lr 1.2
    with cosine annealing, temperature 0.5, batch 1024 for 200 epochs.
    """

    batch_size: int = 1024
    epochs: int = 200
    base_lr: float = 1.2
    temperature: float = 0.5
    weight_decay: float = 1e-6
    momentum: float = 0.9
    trust_coefficient: float = 1e-3
    stack: str = "simclr_original"
    input_size: int = 224
    backbone: str = "resnet50"
    projection_dim: int = 128
    projection_hidden: int | None = None
    seed: int = 0
    checkpoint_epochs: tuple[int, ...] = (10, 20, 50, 100, 200)
    accumulate_steps: int = 1
    cache_pixels: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 pairs")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.accumulate_steps < 1:
            raise ValueError("accumulate_steps must be >= 1")
        bad = [e for e in self.checkpoint_epochs if not 1 <= e <= self.epochs]
        if bad:
            raise ValueError(f"checkpoint epochs {bad} outside [1, {self.epochs}]")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.backbone, self.projection_dim, self.projection_hidden)


@dataclass
class RunRecord:
    """Persisted outcome of one run."""

    run_id: str
    config: dict
    status: str  # completed | diverged | failed
    metrics_path: str | None = None
    checkpoint_paths: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.status not in ("completed", "diverged", "failed"):
            raise ValueError(f"bad run status {self.status!r}")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        return path

    @staticmethod
    def load(path: str | Path) -> "RunRecord":
        return RunRecord(**json.loads(Path(path).read_text()))


@dataclass
class PretrainResult:
    record: RunRecord | None  # None when stopped early (simulated interruption)
    out_dir: Path
    epoch_losses: list[float]
    checkpoint_paths: list[Path]
    last_checkpoint: Path

    @property
    def diverged(self) -> bool:
        return self.record is not None and self.record.status == "diverged"


class _PatchStore:
    """Loads patch pixels from a manifest, optionally caching them."""

    def __init__(self, manifest: Manifest, cache: bool):
        self.manifest = manifest
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifest)

    def pixels(self, index: int) -> np.ndarray:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        px = load_patch_pixels(self.manifest.records[index], self.manifest.root)
        if self._cache is not None:
            self._cache[index] = px
        return px


def view_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-(epoch, patch) augmentation stream; stateless for resumability."""
    return np.random.default_rng([int(seed), 104729 + int(epoch), int(index)])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 7919, int(epoch)]).permutation(n)


def save_checkpoint(
    path: str | Path,
    model: ContrastiveModel,
    optimizer: torch.optim.Optimizer,
    epoch: int,
    config: PretrainConfig,
    epoch_losses: list[float],
) -> Path:
    """Versioned container with weights, optimizer/momentum and RNG state."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "encoder_state": model.encoder.state_dict(),
        "projection_state": model.projector.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng_state": torch.get_rng_state(),
        "config": dataclasses.asdict(config),
        "epoch_losses": list(epoch_losses),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    return payload


def model_from_checkpoint(path: str | Path) -> tuple[ContrastiveModel, PretrainConfig, dict]:
    payload = load_checkpoint(path)
    config = PretrainConfig(**payload["config"])
    model = build_model(config.encoder_config())
    model.encoder.load_state_dict(payload["encoder_state"])
    model.projector.load_state_dict(payload["projection_state"])
    return model, config, payload


def _append_metrics(path: Path, entry: dict) -> None:
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(entry) + "\n")


def _truncate_metrics(path: Path, run_id: str, max_epoch: int) -> None:
    """Drop metric lines past max_epoch so resumed runs have no duplicates."""
    if not path.exists():
        return
    kept = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        if entry.get("epoch", 0) <= max_epoch:
            kept.append(line)
    path.write_text("".join(k + "\n" for k in kept))


def pretrain(
    config: PretrainConfig,
    manifest: Manifest,
    out_dir: str | Path,
    stack: AugmentationStack | None = None,
    run_id: str = "pretrain",
    stop_after_epoch: int | None = None,
    force: bool = False,
    _resume_from: Path | None = None,
) -> PretrainResult:
    """Run (or finish) a self-supervised training run in ``out_dir``.

    A directory whose run already terminated refuses to rerun without
    ``force``.  ``stop_after_epoch`` ends the process after that epoch
    without writing a run record, emulating an interruption; ``resume``
    picks such a run back up from ``last.pt``.
    """
    if len(manifest) == 0:
        raise ValueError("cannot pretrain on an empty manifest")
    if manifest.dataset_kind != "unsupervised":
        raise ValueError("pretraining expects an unsupervised manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record_path = out_dir / "run_record.json"
    if record_path.exists() and not force and _resume_from is None:
        raise FileExistsError(
            f"{out_dir} already holds a terminated run (use force to overwrite)"
        )

    stack = stack or compose_stack(config.stack, config.input_size)
    metrics_path = out_dir / "metrics.jsonl"
    device = torch.device(config.device)

    notes: list[str] = []
    if config.accumulate_steps > 1:
        notes.append(
            f"effective batch {config.batch_size} realized by {config.accumulate_steps}-step "
            "gradient accumulation; negatives drawn only within each sub-batch"
        )

    if _resume_from is not None:
        payload = load_checkpoint(_resume_from)
        model = build_model(config.encoder_config())
        model.encoder.load_state_dict(payload["encoder_state"])
        model.projector.load_state_dict(payload["projection_state"])
        model.to(device)
        optimizer = LARS(
            split_lars_param_groups(model, config.weight_decay),
            lr=config.base_lr,
            momentum=config.momentum,
            trust_coefficient=config.trust_coefficient,
        )
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        start_epoch = payload["epoch"]  # completed epochs so far
        epoch_losses = list(payload["epoch_losses"])
        _truncate_metrics(metrics_path, run_id, start_epoch)
    else:
        model = build_model(config.encoder_config(), seed=config.seed).to(device)
        optimizer = LARS(
            split_lars_param_groups(model, config.weight_decay),
            lr=config.base_lr,
            momentum=config.momentum,
            trust_coefficient=config.trust_coefficient,
        )
        start_epoch = 0
        epoch_losses = []
        metrics_path.write_text("")

    store = _PatchStore(manifest, config.cache_pixels)
    n = len(store)
    checkpoint_paths = [
        out_dir / f"checkpoint_ep{e}.pt"
        for e in sorted(config.checkpoint_epochs)
        if e <= start_epoch and (out_dir / f"checkpoint_ep{e}.pt").exists()
    ]
    last_path = out_dir / "last.pt"
    status = "completed"

    for epoch in range(start_epoch, config.epochs):
        t0 = time.monotonic()
        lr = cosine_anneal(config.base_lr, epoch, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = epoch_order(config.seed, epoch, n)
        model.train()
        batch_losses: list[float] = []
        diverged = False
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            if len(idx) < 2:
                continue  # a single pair cannot form negatives
            chunk_size = max(int(np.ceil(len(idx) / config.accumulate_steps)), 2)
            optimizer.zero_grad()
            step_loss = 0.0
            n_chunks = 0
            try:
                for c0 in range(0, len(idx), chunk_size):
                    sub = idx[c0 : c0 + chunk_size]
                    if len(sub) < 2:
                        continue
                    anchors, positives = [], []
                    for i in sub:
                        rng = view_rng(config.seed, epoch, int(i))
                        px = store.pixels(int(i))
                        anchors.append(apply_stack(px, stack, rng))
                        positives.append(apply_stack(px, stack, rng))
                    xa = views_to_tensor(np.stack(anchors)).to(device)
                    xp = views_to_tensor(np.stack(positives)).to(device)
                    _, za = model(xa)
                    _, zp = model(xp)
                    loss = nt_xent_loss(paired_batch(za, zp, config.temperature))
                    if not torch.isfinite(loss):
                        raise NonFiniteError("non-finite training loss")
                    (loss / config.accumulate_steps).backward()
                    step_loss += float(loss.detach())
                    n_chunks += 1
                optimizer.step()
            except NonFiniteError as exc:
                notes.append(f"epoch {epoch + 1}: {exc}")
                diverged = True
                break
            except ValueError as exc:
                if "zero-norm" in str(exc):
                    notes.append(f"epoch {epoch + 1}: {exc}")
                    diverged = True
                    break
                raise
            batch_losses.append(step_loss / max(n_chunks, 1))

        if diverged or not batch_losses:
            status = "diverged"
            break
        epoch_mean = float(np.mean(batch_losses))
        epoch_losses.append(epoch_mean)
        _append_metrics(
            metrics_path,
            {
                "run_id": run_id,
                "epoch": epoch + 1,
                "loss": epoch_mean,
                "lr": lr,
                "wall_time_s": round(time.monotonic() - t0, 3),
            },
        )
        save_checkpoint(last_path, model, optimizer, epoch + 1, config, epoch_losses)
        if (epoch + 1) in config.checkpoint_epochs:
            cp = save_checkpoint(
                out_dir / f"checkpoint_ep{epoch + 1}.pt",
                model,
                optimizer,
                epoch + 1,
                config,
                epoch_losses,
            )
            checkpoint_paths.append(cp)
        if epoch_mean > DIVERGENCE_FACTOR * epoch_losses[0]:
            notes.append(
                f"epoch {epoch + 1}: mean loss {epoch_mean:.4g} exceeded "
                f"{DIVERGENCE_FACTOR}x the first epoch mean {epoch_losses[0]:.4g}"
            )
            status = "diverged"
            break
        if stop_after_epoch is not None and (epoch + 1) >= stop_after_epoch and (epoch + 1) < config.epochs:
            # Simulated interruption: leave no run record behind.
            return PretrainResult(None, out_dir, epoch_losses, checkpoint_paths, last_path)

    record = RunRecord(
        run_id=run_id,
        config=dataclasses.asdict(config),
        status=status,
        metrics_path=str(metrics_path),
        checkpoint_paths=[str(p) for p in checkpoint_paths],
        notes=notes,
    )
    record.save(record_path)
    return PretrainResult(record, out_dir, epoch_losses, checkpoint_paths, last_path)


def resume(
    out_dir: str | Path,
    manifest: Manifest,
    stack: AugmentationStack | None = None,
    run_id: str = "pretrain",
) -> PretrainResult:
    """Continue an interrupted run from its last checkpoint.

    Completing runs twice is a no-op: a terminated run is returned
    as-is with a notice.  Thanks to stateless per-epoch randomness the
    resumed trajectory matches an uninterrupted one.
    """
    out_dir = Path(out_dir)
    record_path = out_dir / "run_record.json"
    if record_path.exists():
        record = RunRecord.load(record_path)
        last = out_dir / "last.pt"
        payload = load_checkpoint(last)
        return PretrainResult(
            record,
            out_dir,
            payload["epoch_losses"],
            [Path(p) for p in record.checkpoint_paths],
            last,
        )
    last = out_dir / "last.pt"
    if not last.exists():
        raise FileNotFoundError(f"no checkpoint to resume from in {out_dir}")
    payload = load_checkpoint(last)
    config = PretrainConfig(**payload["config"])
    return pretrain(
        config,
        manifest,
        out_dir,
        stack=stack,
        run_id=run_id,
        _resume_from=last,
    )
