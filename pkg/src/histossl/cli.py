"""Command-line entry points.

Subcommands: synth, sample, pretrain, probe, finetune, sweep, diagnose,
curve, export.  Each accepts ``--config <file>`` for a YAML experiment
config, ``--seed`` and ``--out`` overrides; relative manifest paths
resolve against ``HISTOSSL_DATA_ROOT`` when set.  Tables are CSV,
metric streams JSON-lines, plots PNG.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, evaluation, sampling, slides, sweep as sweep_mod, tissue
from .config import ExperimentConfig, parse_config
from .manifest import load_manifest, materialize_patches, write_manifest
from .pretrain import pretrain, resume


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="root random seed override")
    parser.add_argument("--out", type=Path, default=None, help="output directory override")


def _load_config(args: argparse.Namespace, **extra) -> ExperimentConfig:
    overrides = {"seed": args.seed, **extra}
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return parse_config(args.config, overrides)


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = slides.SyntheticSlideSpec(
        n_classes=args.n_classes,
        width=args.size,
        height=args.size,
        mpp=config.mpp,
        tile=args.tile,
    )
    for i in range(args.n_slides):
        slide, mask = slides.generate_synthetic_slide(spec, seed=config.seed * 10_000 + i)
        slide_dir = out / slide.slide_id
        slides.save_slide_dir(slide, slide_dir)
        slides.save_label_mask(mask, slide_dir / "label_mask.png")
    print(f"wrote {args.n_slides} synthetic slides to {out}")
    return 0


def _load_slide_dirs(root: Path):
    dirs = sorted(p for p in root.iterdir() if (p / "slide.json").exists())
    if not dirs:
        raise SystemExit(f"no slide directories under {root}")
    return [slides.load_slide_dir(p) for p in dirs], dirs


def cmd_sample(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(config.out_dir)
    sources, dirs = _load_slide_dirs(Path(args.slides))
    if args.supervised:
        triples = []
        split_assignment = {}
        assignments = json.loads(Path(args.splits).read_text()) if args.splits else None
        for slide, d in zip(sources, dirs):
            mask_path = d / "label_mask.png"
            if not mask_path.exists():
                raise SystemExit(f"supervised sampling needs {mask_path}")
            mask = slides.load_label_mask(mask_path)
            coarse_mpp = slide.levels[0][0]
            triples.append((slide, mask, coarse_mpp))
            split_assignment[slide.slide_id] = (
                assignments[slide.slide_id] if assignments else "train"
            )
        class_names = [f"class_{i}" for i in range(args.n_classes)]
        manifest = sampling.build_supervised_dataset(
            triples,
            split_assignment,
            class_names,
            patch_size=config.patch_size,
            mpp=config.mpp,
            per_class_cap=config.per_class_cap,
            val_per_class=config.val_per_class,
            test_per_class=config.test_per_class,
            overlap_fraction=config.overlap_fraction,
            min_class_coverage=config.min_class_coverage,
            seed=config.seed,
        )
        slide_map = {s.slide_id: s for s in sources}
        manifest = materialize_patches(
            manifest.records, slide_map, out, "supervised", class_names
        )
    else:
        all_patches = []
        for slide in sources:
            coarse_mpp, cw, ch = slide.levels[-1]
            overview = slide.read_region(coarse_mpp, 0, 0, cw, ch)
            mask = tissue.compute_tissue_mask(overview)
            all_patches.extend(
                sampling.sample_unsupervised_patches(
                    slide,
                    mask,
                    coarse_mpp,
                    patch_size=config.patch_size,
                    mpp=config.mpp,
                    max_per_slide=config.max_per_slide,
                    min_coverage=config.min_coverage,
                    seed=config.seed,
                )
            )
        slide_map = {s.slide_id: s for s in sources}
        manifest = materialize_patches(all_patches, slide_map, out, "unsupervised")
    print(f"wrote manifest with {len(manifest)} patches to {out / 'manifest.csv'}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _load_config(args)
    manifest = load_manifest(config.resolve_path(config.unsupervised_manifest))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    if args.resume:
        result = resume(out, manifest, run_id=config.run_id)
    else:
        result = pretrain(
            config.pretrain_config(), manifest, out, run_id=config.run_id, force=args.force
        )
    status = result.record.status if result.record else "interrupted"
    print(f"run {config.run_id}: {status}; {len(result.epoch_losses)} epochs logged")
    return 0 if status != "failed" else 1


def _probe_common(args: argparse.Namespace, mode: str) -> int:
    config = _load_config(args)
    train = load_manifest(config.resolve_path(args.train_manifest or config.train_manifest))
    test = load_manifest(config.resolve_path(args.test_manifest or config.test_manifest))
    val_path = config.resolve_path(args.val_manifest or config.val_manifest)
    val = load_manifest(val_path) if val_path else None
    probe_config = config.probe_config(mode)
    init = args.checkpoint
    if mode == "linear":
        run = evaluation.linear_probe(init, train, test, probe_config, val_manifest=val)
    else:
        run = evaluation.finetune(init, train, test, probe_config, val_manifest=val)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(run.metrics.to_json())
    (out / "history.jsonl").write_text(
        "".join(json.dumps(h) + "\n" for h in run.history)
    )
    config.save(out / "config.yaml")
    print(f"{mode} accuracy: {run.metrics.accuracy:.4f} (n={run.metrics.n_test})")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    return _probe_common(args, "linear")


def cmd_finetune(args: argparse.Namespace) -> int:
    mode = "scratch" if args.checkpoint is None else "finetune"
    return _probe_common(args, mode)


def _parse_axis(text: str):
    key, _, values = text.partition("=")
    if not values:
        raise SystemExit(f"bad axis {text!r}: expected key=v1,v2,...")
    parsed = []
    for token in values.split(","):
        if token == sweep_mod.DERIVED:
            parsed.append(token)
            continue
        try:
            parsed.append(int(token))
        except ValueError:
            try:
                parsed.append(float(token))
            except ValueError:
                parsed.append(token)
    return key, parsed


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args)
    axes = dict(_parse_axis(a) for a in args.axis)
    out = Path(config.out_dir)
    records = sweep_mod.run_sweep(config, axes, out, force=args.force)
    keys = sorted(axes)
    row_key = "batch_size" if "batch_size" in axes else keys[0]
    col_key = "base_lr" if "base_lr" in axes else keys[-1]
    table = sweep_mod.sweep_table(records, row_key=row_key, col_key=col_key)
    (out / "sweep_table.csv").write_text(table)
    n_div = sum(r.status == "diverged" for r in records)
    print(f"{len(records)} runs ({n_div} diverged); table at {out / 'sweep_table.csv'}")
    return 0


def _embedding_batches(checkpoint: Path, manifest_path: Path, config: ExperimentConfig, n_batches: int, batch_pairs: int):
    """Paired view embeddings of random manifest patches, batch by batch."""
    from .augment import compose_stack, apply_stack
    from .manifest import load_patch_pixels
    from .models import encode_project
    from .pretrain import model_from_checkpoint, view_rng

    manifest = load_manifest(manifest_path)
    model, pre_config, _ = model_from_checkpoint(checkpoint)
    stack = compose_stack(pre_config.stack, pre_config.input_size)
    rng = np.random.default_rng(config.seed)
    batches = []
    for b in range(n_batches):
        idx = rng.choice(len(manifest), size=min(batch_pairs, len(manifest)), replace=False)
        anchors, positives = [], []
        for i in idx:
            px = load_patch_pixels(manifest.records[int(i)], manifest.root)
            vrng = view_rng(config.seed, b, int(i))
            anchors.append(apply_stack(px, stack, vrng))
            positives.append(apply_stack(px, stack, vrng))
        views = np.stack(anchors + positives)
        batches.append(encode_project(views, model, temperature=pre_config.temperature))
    return batches


def cmd_diagnose(args: argparse.Namespace) -> int:
    config = _load_config(args)
    manifest_path = config.resolve_path(args.manifest or config.unsupervised_manifest)
    batches = _embedding_batches(
        args.checkpoint, manifest_path, config, args.n_batches, args.batch_pairs
    )
    stats = diagnostics.false_negative_stats(batches, thresholds=tuple(args.threshold))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = json.loads(stats.to_json())
    payload["sampling"] = {
        "n_batches": args.n_batches,
        "batch_pairs": args.batch_pairs,
        "manifest": str(manifest_path),
    }
    (out / "similarity_stats.json").write_text(json.dumps(payload, indent=2))
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        centers = 0.5 * (stats.bin_edges[:-1] + stats.bin_edges[1:])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(centers, stats.histogram, width=centers[1] - centers[0])
        ax.set_xlabel("anchor-negative cosine similarity")
        ax.set_ylabel("pairs")
        fig.tight_layout()
        fig.savefig(out / "similarity_hist.png", dpi=120)
        plt.close(fig)
    for t, frac in stats.fraction_above.items():
        print(f"fraction of pairs above {t}: {frac:.6f} ({stats.n_pairs} pairs)")
    return 0


def cmd_curve(args: argparse.Namespace) -> int:
    config = _load_config(args)
    train = load_manifest(config.resolve_path(args.train_manifest or config.train_manifest))
    test = load_manifest(config.resolve_path(args.test_manifest or config.test_manifest))
    rows = diagnostics.checkpoint_curve(
        args.checkpoints, train, test, config.probe_config("linear")
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,ssl_loss,probe_accuracy"] + [
        f"{r['epoch']},{r['ssl_loss']:.6f},{r['probe_accuracy']:.6f}" for r in rows
    ]
    (out / "checkpoint_curve.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    config = _load_config(args)
    manifest = load_manifest(config.resolve_path(args.manifest or config.test_manifest))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = diagnostics.export_embeddings(
        args.checkpoint,
        manifest,
        out / "embeddings.csv",
        n_samples=args.n,
        seed=config.seed,
        input_size=config.input_size,
        with_pca=args.pca or args.plot,
    )
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        proj = result["projection"]
        fig, ax = plt.subplots(figsize=(5, 5))
        scatter = ax.scatter(proj[:, 0], proj[:, 1], c=result["labels"], s=8, cmap="tab10")
        fig.colorbar(scatter, ax=ax, label="class")
        ax.set_xlabel("pc 0")
        ax.set_ylabel("pc 1")
        fig.tight_layout()
        fig.savefig(out / "embeddings_scatter.png", dpi=120)
        plt.close(fig)
    print(f"exported {len(result['patch_ids'])} embeddings to {result['path']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histossl",
        description="Contrastive self-supervised pre-training for histopathology patches",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides with label masks")
    _common(p)
    p.add_argument("--n-slides", type=int, default=12)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--tile", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="sample patches from slide directories")
    _common(p)
    p.add_argument("--slides", type=Path, required=True)
    p.add_argument("--supervised", action="store_true")
    p.add_argument("--splits", type=Path, default=None, help="JSON slide_id->split map")
    p.add_argument("--n-classes", type=int, default=3)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _common(p)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear evaluation on frozen features")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="omit for random init")
    p.add_argument("--train-manifest", type=Path, default=None)
    p.add_argument("--val-manifest", type=Path, default=None)
    p.add_argument("--test-manifest", type=Path, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="fine-tune all weights (or train from scratch)")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="omit to train from scratch")
    p.add_argument("--train-manifest", type=Path, default=None)
    p.add_argument("--val-manifest", type=Path, default=None)
    p.add_argument("--test-manifest", type=Path, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="run a Cartesian hyper-parameter grid")
    _common(p)
    p.add_argument(
        "--axis",
        action="append",
        required=True,
        help="key=v1,v2,... ('base_lr=derived' scales lr with batch size)",
    )
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="anchor-negative similarity statistics")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--threshold", type=float, action="append", default=[0.9])
    p.add_argument("--n-batches", type=int, default=8)
    p.add_argument("--batch-pairs", type=int, default=64)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("curve", help="probe accuracy across training checkpoints")
    _common(p)
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    p.add_argument("--train-manifest", type=Path, default=None)
    p.add_argument("--test-manifest", type=Path, default=None)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("export", help="export backbone embeddings (+ PCA)")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("-n", type=int, default=5000)
    p.add_argument("--pca", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
