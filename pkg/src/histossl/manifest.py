"""Patch records and the on-disk manifest format.

A manifest is a UTF-8 CSV with header
``patch_id,slide_id,x,y,mpp,width,height,label,split,fold,path``
indexing lossless-compressed RGB patch images.  ``label`` is empty for
unsupervised rows; ``path`` is relative to the manifest's directory.
Pixels never live in the manifest; they are materialized as PNG files
and loaded on demand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np

from .slides import SlideSource

__all__ = [
    "Patch",
    "Manifest",
    "ManifestError",
    "write_manifest",
    "load_manifest",
    "materialize_patches",
    "load_patch_pixels",
]

MANIFEST_COLUMNS = (
    "patch_id",
    "slide_id",
    "x",
    "y",
    "mpp",
    "width",
    "height",
    "label",
    "split",
    "fold",
    "path",
)

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Malformed manifest content."""


@dataclass
class Patch:
    """One patch: provenance, geometry, and optionally pixels."""

    patch_id: str
    slide_id: str
    x: int
    y: int
    mpp: float
    width: int
    height: int
    label: int | None = None
    split: str | None = None
    fold: int | None = None
    path: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mpp <= 0:
            raise ValueError(f"patch {self.patch_id}: mpp must be positive")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"patch {self.patch_id}: bad split {self.split!r}")
        if self.pixels is not None:
            ph, pw = self.pixels.shape[:2]
            if (ph, pw) != (self.height, self.width):
                raise ValueError(
                    f"patch {self.patch_id}: pixels {pw}x{ph} do not match "
                    f"declared size {self.width}x{self.height}"
                )

    def meta_only(self) -> "Patch":
        return replace(self, pixels=None)


@dataclass
class Manifest:
    """Indexed patch dataset: metadata rows plus labelling info."""

    records: list[Patch]
    dataset_kind: str  # "unsupervised" | "supervised"
    class_names: list[str] | None = None
    root: Path | None = None  # directory paths are relative to

    def __post_init__(self):
        if self.dataset_kind not in ("unsupervised", "supervised"):
            raise ValueError(f"bad dataset_kind {self.dataset_kind!r}")
        seen: set[str] = set()
        for rec in self.records:
            if rec.patch_id in seen:
                raise ManifestError(f"duplicate patch_id {rec.patch_id!r}")
            seen.add(rec.patch_id)
        if self.dataset_kind == "supervised":
            for rec in self.records:
                if rec.label is None:
                    raise ManifestError(f"supervised manifest row {rec.patch_id!r} lacks a label")
                if self.class_names is not None and not 0 <= rec.label < len(self.class_names):
                    raise ManifestError(
                        f"patch {rec.patch_id!r}: label {rec.label} out of range "
                        f"for {len(self.class_names)} classes"
                    )
        else:
            for rec in self.records:
                if rec.label is not None:
                    raise ManifestError(
                        f"unsupervised manifest row {rec.patch_id!r} carries a label"
                    )

    def __len__(self) -> int:
        return len(self.records)

    def for_split(self, split: str) -> "Manifest":
        recs = [r for r in self.records if r.split == split]
        return Manifest(recs, self.dataset_kind, self.class_names, self.root)

    def for_slides(self, slide_ids: Iterable[str], fold: int | None = None) -> "Manifest":
        wanted = set(slide_ids)
        recs = [
            replace(r, fold=fold if fold is not None else r.fold)
            for r in self.records
            if r.slide_id in wanted
        ]
        return Manifest(recs, self.dataset_kind, self.class_names, self.root)

    def slide_ids(self) -> list[str]:
        return sorted({r.slide_id for r in self.records})

    def labels(self) -> np.ndarray:
        if self.dataset_kind != "supervised":
            raise ManifestError("labels() requires a supervised manifest")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for r in self.records:
            if r.label is not None:
                counts[r.label] = counts.get(r.label, 0) + 1
        return counts


def _fmt(value) -> str:
    return "" if value is None else str(value)


def write_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write the CSV index; one header line plus one line per record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow(
                [
                    rec.patch_id,
                    rec.slide_id,
                    rec.x,
                    rec.y,
                    rec.mpp,
                    rec.width,
                    rec.height,
                    _fmt(rec.label),
                    _fmt(rec.split),
                    _fmt(rec.fold),
                    _fmt(rec.path),
                ]
            )
    return path


def load_manifest(
    path: str | Path,
    class_names: Sequence[str] | None = None,
    check_files: bool = True,
) -> Manifest:
    """Parse and validate a manifest CSV.

    Raises :class:`ManifestError` naming the offending column, patch id,
    or file for: missing columns, duplicate ids, bad field types, mixed
    labelled/unlabelled rows, and dangling patch files.
    """
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest file") from None
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        idx = {c: header.index(c) for c in MANIFEST_COLUMNS}
        records: list[Patch] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            get = lambda c: row[idx[c]]
            try:
                rec = Patch(
                    patch_id=get("patch_id"),
                    slide_id=get("slide_id"),
                    x=int(get("x")),
                    y=int(get("y")),
                    mpp=float(get("mpp")),
                    width=int(get("width")),
                    height=int(get("height")),
                    label=int(get("label")) if get("label") != "" else None,
                    split=get("split") or None,
                    fold=int(get("fold")) if get("fold") != "" else None,
                    path=get("path") or None,
                )
            except (ValueError, IndexError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)

    labelled = [r for r in records if r.label is not None]
    if labelled and len(labelled) != len(records):
        bad = next(r.patch_id for r in records if r.label is None)
        raise ManifestError(f"{path}: mixed labelled/unlabelled rows (first unlabelled: {bad!r})")
    kind = "supervised" if labelled else "unsupervised"
    manifest = Manifest(records, kind, list(class_names) if class_names else None, root=path.parent)
    if check_files:
        for rec in records:
            if rec.path is None:
                raise ManifestError(f"{path}: row {rec.patch_id!r} has no image path")
            img = path.parent / rec.path
            if not img.exists():
                raise ManifestError(f"{path}: row {rec.patch_id!r} references missing file {img}")
    return manifest


def load_patch_pixels(record: Patch, root: str | Path | None = None) -> np.ndarray:
    """Read a materialized patch image as HxWx3 uint8 RGB."""
    if record.pixels is not None:
        return record.pixels
    if record.path is None:
        raise ManifestError(f"patch {record.patch_id!r} has no stored image")
    full = Path(root) / record.path if root is not None else Path(record.path)
    bgr = cv2.imread(str(full), cv2.IMREAD_COLOR)
    if bgr is None:
        raise IOError(f"could not read patch image {full}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def materialize_patches(
    patches: Sequence[Patch],
    slides: Mapping[str, SlideSource],
    out_dir: str | Path,
    dataset_kind: str,
    class_names: Sequence[str] | None = None,
    manifest_name: str = "manifest.csv",
) -> Manifest:
    """Write patch pixels as PNGs under ``out_dir/images`` and index them.

    Patches lacking in-memory pixels are read back from their source
    slide via ``read_region``.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    stored: list[Patch] = []
    for rec in patches:
        pixels = rec.pixels
        if pixels is None:
            slide = slides.get(rec.slide_id)
            if slide is None:
                raise KeyError(f"no slide source for {rec.slide_id!r}")
            pixels = slide.read_region(rec.mpp, rec.x, rec.y, rec.width, rec.height)
        rel = f"images/{rec.patch_id}.png"
        if not cv2.imwrite(str(out_dir / rel), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)):
            raise IOError(f"failed to write {out_dir / rel}")
        stored.append(replace(rec, path=rel, pixels=None))
    manifest = Manifest(stored, dataset_kind, list(class_names) if class_names else None, out_dir)
    write_manifest(manifest, out_dir / manifest_name)
    return manifest
