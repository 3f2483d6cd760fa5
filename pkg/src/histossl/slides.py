"""Slide sources: multi-level images with physical resolution metadata.

Two concrete sources are provided:

* :class:`ArraySlide` wraps in-memory level arrays.  It also backs the
  on-disk interchange format (a directory of level PNGs plus a
  ``slide.json`` sidecar listing microns-per-pixel per level), which
  stands in for vendor pyramid formats.
* :func:`generate_synthetic_slide` procedurally paints a slide with
  textured, hue-varied tissue regions on a near-white background, plus a
  pixel-exact label mask.  This is the desk-scale stand-in for clinical
  corpora: classes are separable by texture, while hue varies region to
  region so color alone is a poor class cue.

Label masks are integer arrays where ``-1`` is background and values
``0..n_classes-1`` are class indices.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

__all__ = [
    "SlideSource",
    "ArraySlide",
    "ClassStyle",
    "SyntheticSlideSpec",
    "generate_synthetic_slide",
    "save_slide_dir",
    "load_slide_dir",
    "save_label_mask",
    "load_label_mask",
]

BACKGROUND = -1

_MASK_BG_CODE = 255  # background sentinel in uint8 mask PNGs


class SlideSource:
    """A slide exposing pixel levels at known microns-per-pixel.

    ``levels`` lists ``(mpp, width, height)`` in order of strictly
    increasing mpp (finest first).  ``read_region`` returns an exact
    ``h x w x 3`` uint8 RGB array for a region given in pixel coordinates
    at the requested mpp.
    """

    slide_id: str

    @property
    def levels(self) -> list[tuple[float, int, int]]:
        raise NotImplementedError

    def dims_at(self, mpp: float) -> tuple[int, int]:
        """(width, height) of the slide when rendered at ``mpp``."""
        raise NotImplementedError

    def read_region(self, mpp: float, x: int, y: int, w: int, h: int) -> np.ndarray:
        raise NotImplementedError


class ArraySlide(SlideSource):
    """Slide backed by one RGB array per level."""

    def __init__(self, slide_id: str, level_images: dict[float, np.ndarray]):
        if not level_images:
            raise ValueError("slide needs at least one level")
        self.slide_id = slide_id
        self._levels: dict[float, np.ndarray] = {}
        for mpp, img in sorted(level_images.items()):
            img = np.asarray(img)
            if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
                raise ValueError(f"level {mpp}: expected HxWx3 uint8, got {img.shape} {img.dtype}")
            if mpp <= 0:
                raise ValueError(f"mpp must be positive, got {mpp}")
            self._levels[float(mpp)] = img

    @property
    def levels(self) -> list[tuple[float, int, int]]:
        return [(mpp, img.shape[1], img.shape[0]) for mpp, img in self._levels.items()]

    def level_image(self, mpp: float) -> np.ndarray:
        key = self._match_mpp(mpp)
        if key is None:
            raise KeyError(f"slide {self.slide_id} has no level at {mpp} mpp")
        return self._levels[key]

    def _match_mpp(self, mpp: float) -> float | None:
        for key in self._levels:
            if abs(key - mpp) <= 1e-9 * max(key, mpp):
                return key
        return None

    def dims_at(self, mpp: float) -> tuple[int, int]:
        key = self._match_mpp(mpp)
        if key is not None:
            img = self._levels[key]
            return img.shape[1], img.shape[0]
        finest = min(self._levels)
        img = self._levels[finest]
        scale = finest / mpp
        return max(1, int(round(img.shape[1] * scale))), max(1, int(round(img.shape[0] * scale)))

    def read_region(self, mpp: float, x: int, y: int, w: int, h: int) -> np.ndarray:
        if w <= 0 or h <= 0:
            raise ValueError("region must have positive size")
        key = self._match_mpp(mpp)
        if key is not None:
            img = self._levels[key]
            if x < 0 or y < 0 or x + w > img.shape[1] or y + h > img.shape[0]:
                raise ValueError(
                    f"region ({x},{y},{w},{h}) outside level {key} of size "
                    f"{img.shape[1]}x{img.shape[0]}"
                )
            return img[y : y + h, x : x + w].copy()
        # No exact level: render from the finest one.
        finest = min(self._levels)
        scale = mpp / finest
        img = self._levels[finest]
        fx, fy = int(round(x * scale)), int(round(y * scale))
        fw, fh = int(round(w * scale)), int(round(h * scale))
        if fx < 0 or fy < 0 or fx + fw > img.shape[1] or fy + fh > img.shape[0]:
            raise ValueError(f"region ({x},{y},{w},{h}) at {mpp} mpp outside slide bounds")
        region = img[fy : fy + fh, fx : fx + fw]
        out = cv2.resize(region, (w, h), interpolation=cv2.INTER_AREA)
        return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Synthetic slides
# ---------------------------------------------------------------------------

TEXTURES = ("stripes", "checker", "dots")


@dataclass(frozen=True)
class ClassStyle:
    """Procedural texture/colour recipe for one tissue class."""

    texture: str
    wavelength: float = 8.0
    orientation: float = 0.0  # radians; used by stripes
    hue: float = 0.0  # base hue in [0, 1)
    hue_jitter: float = 0.3  # per-region hue spread; makes color a nuisance cue

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")


def default_class_styles(n_classes: int) -> tuple[ClassStyle, ...]:
    """Texture-distinct styles; hues spread over the wheel but heavily jittered."""
    styles = []
    for c in range(n_classes):
        texture = TEXTURES[c % len(TEXTURES)]
        styles.append(
            ClassStyle(
                texture=texture,
                wavelength=6.0 + 3.0 * (c // len(TEXTURES)),
                orientation=(np.pi / 2) * (c % 2) + (np.pi / 6) * (c // len(TEXTURES)),
                hue=c / n_classes,
                hue_jitter=0.3,
            )
        )
    return tuple(styles)


@dataclass(frozen=True)
class SyntheticSlideSpec:
    """Layout and appearance parameters of a procedurally generated slide."""

    n_classes: int = 3
    width: int = 1024
    height: int = 1024
    mpp: float = 1.0
    coarse_factor: int = 4  # second level at mpp * coarse_factor
    tile: int = 128  # layout cell size, px
    margin: int = 16  # background border inside each cell
    tissue_fraction: float = 0.75  # fraction of cells that receive tissue
    background_intensity: int = 245
    noise: float = 4.0
    class_styles: tuple[ClassStyle, ...] | None = None
    layout_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.class_styles is not None and len(self.class_styles) != self.n_classes:
            raise ValueError("class_styles length must equal n_classes")
        if not 0 < self.tissue_fraction <= 1:
            raise ValueError("tissue_fraction must be in (0, 1]")

    def styles(self) -> tuple[ClassStyle, ...]:
        return self.class_styles or default_class_styles(self.n_classes)


def _two_tone(hue: float) -> tuple[np.ndarray, np.ndarray]:
    """Dark and mid tone of one hue, both well below the white background."""
    dark = np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.55, 0.45)) * 255.0
    mid = np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.35, 0.70)) * 255.0
    return dark, mid


def _texture_field(style: ClassStyle, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Boolean texture pattern evaluated on global pixel coordinates."""
    lam = max(style.wavelength, 2.0)
    if style.texture == "stripes":
        proj = xs * np.cos(style.orientation) + ys * np.sin(style.orientation)
        return np.sin(2 * np.pi * proj / lam) > 0
    if style.texture == "checker":
        s = max(int(round(lam / 2)), 1)
        return ((xs // s) + (ys // s)) % 2 == 0
    # dots
    g = np.sin(2 * np.pi * xs / lam) * np.sin(2 * np.pi * ys / lam)
    return g > 0.25


def generate_synthetic_slide(
    spec: SyntheticSlideSpec, seed: int
) -> tuple[ArraySlide, np.ndarray]:
    """Paint a slide and its label mask; bit-identical for fixed (spec, seed).

    The slide is partitioned into layout cells; a random subset receives
    tissue, assigned round-robin over classes so every class gets area
    (raises if the layout leaves any class without pixels).  Each tissue
    cell is textured by its class style with a region-specific hue drawn
    within ``hue_jitter`` of the class base hue.
    """
    rng = np.random.default_rng([int(seed), int(spec.layout_seed)])
    h, w = spec.height, spec.width
    interior = spec.tile - 2 * spec.margin
    if interior <= 0:
        raise ValueError("margin leaves zero-area regions inside layout cells")

    image = np.full((h, w, 3), spec.background_intensity, dtype=np.float64)
    mask = np.full((h, w), BACKGROUND, dtype=np.int16)

    rows, cols = h // spec.tile, w // spec.tile
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    if not cells:
        raise ValueError("slide smaller than one layout cell")
    rng.shuffle(cells)
    n_tissue = max(int(round(len(cells) * spec.tissue_fraction)), 1)
    chosen = cells[:n_tissue]
    if n_tissue < spec.n_classes:
        raise ValueError(
            f"layout yields {n_tissue} tissue regions for {spec.n_classes} classes; "
            "some class would have zero area"
        )

    styles = spec.styles()
    for i, (r, c) in enumerate(chosen):
        cls = i % spec.n_classes
        style = styles[cls]
        y0 = r * spec.tile + spec.margin
        x0 = c * spec.tile + spec.margin
        ys, xs = np.mgrid[y0 : y0 + interior, x0 : x0 + interior]
        pattern = _texture_field(style, ys, xs)
        hue = style.hue + rng.uniform(-style.hue_jitter, style.hue_jitter)
        dark, mid = _two_tone(hue)
        block = np.where(pattern[..., None], dark, mid)
        image[y0 : y0 + interior, x0 : x0 + interior] = block
        mask[y0 : y0 + interior, x0 : x0 + interior] = cls

    image += rng.normal(0.0, spec.noise, size=image.shape)
    base = np.clip(np.round(image), 0, 255).astype(np.uint8)

    present = set(np.unique(mask[mask >= 0]).tolist())
    missing = [c for c in range(spec.n_classes) if c not in present]
    if missing:
        raise ValueError(f"classes {missing} received zero area")

    levels = {spec.mpp: base}
    if spec.coarse_factor > 1:
        coarse = cv2.resize(
            base,
            (max(1, w // spec.coarse_factor), max(1, h // spec.coarse_factor)),
            interpolation=cv2.INTER_AREA,
        )
        levels[spec.mpp * spec.coarse_factor] = coarse
    slide = ArraySlide(f"synthetic_{seed:04d}", levels)
    return slide, mask


# ---------------------------------------------------------------------------
# Directory interchange format
# ---------------------------------------------------------------------------


def save_slide_dir(slide: ArraySlide, path: str | Path) -> Path:
    """Write a slide as level PNGs plus a ``slide.json`` sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (mpp, _, _) in enumerate(slide.levels):
        name = f"level_{i}.png"
        img = slide.level_image(mpp)
        if not cv2.imwrite(str(path / name), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
            raise IOError(f"failed to write {path / name}")
        entries.append({"mpp": mpp, "file": name})
    sidecar = {"slide_id": slide.slide_id, "levels": entries}
    (path / "slide.json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_slide_dir(path: str | Path) -> ArraySlide:
    """Load a slide written by :func:`save_slide_dir`."""
    path = Path(path)
    sidecar_path = path / "slide.json"
    if not sidecar_path.exists():
        raise FileNotFoundError(f"no slide.json in {path}")
    sidecar = json.loads(sidecar_path.read_text())
    for key in ("slide_id", "levels"):
        if key not in sidecar:
            raise ValueError(f"slide.json missing key {key!r}")
    levels = {}
    for entry in sidecar["levels"]:
        img_path = path / entry["file"]
        if not img_path.exists():
            raise FileNotFoundError(f"level image missing: {img_path}")
        bgr = cv2.imread(str(img_path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise IOError(f"could not read {img_path}")
        levels[float(entry["mpp"])] = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return ArraySlide(sidecar["slide_id"], levels)


def save_label_mask(mask: np.ndarray, path: str | Path) -> Path:
    """Store a label mask as PNG (background -1 encoded as 255)."""
    mask = np.asarray(mask)
    if mask.min() < -1 or mask.max() >= _MASK_BG_CODE:
        raise ValueError("label mask values must be in [-1, 254]")
    encoded = np.where(mask == BACKGROUND, _MASK_BG_CODE, mask).astype(np.uint8)
    path = Path(path)
    if not cv2.imwrite(str(path), encoded):
        raise IOError(f"failed to write {path}")
    return path


def load_label_mask(path: str | Path) -> np.ndarray:
    encoded = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if encoded is None:
        raise IOError(f"could not read {path}")
    mask = encoded.astype(np.int16)
    mask[encoded == _MASK_BG_CODE] = BACKGROUND
    return mask
