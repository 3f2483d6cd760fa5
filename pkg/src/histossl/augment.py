"""Stochastic view generation: the augmentation families and named stacks.

Every transform maps uint8 HxWx3 RGB to uint8 RGB and takes an explicit
``numpy.random.Generator``; applying a stack twice to the same patch
with independent draws yields the positive pair for contrastive
training.  The registry holds the named stacks of the augmentation
study: a light "base" recipe (tight crop, flips, quarter-turn
rotations, color jitter) and its combinations with Gaussian blur,
strong scale cropping, grid distortion, and grid shuffling.

Geometric conventions:

* Crops resample to the network input size with bilinear interpolation.
* ``grid_distort`` remaps with bilinear interpolation and mirror
  (no edge repeat) border handling.
* ``grid_shuffle`` permutes equal tiles; when the image size is not
  divisible by the grid, the leftover right/bottom strips stay in
  place, so the pixel multiset is preserved exactly in all cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import cv2
import numpy as np

__all__ = [
    "TransformSpec",
    "AugmentationStack",
    "ViewPair",
    "random_resized_crop",
    "flip_rot90",
    "color_jitter",
    "gaussian_blur",
    "grid_distort",
    "grid_shuffle",
    "apply_transform",
    "apply_stack",
    "compose_stack",
    "stack_names",
    "stack_from_transform_list",
    "generate_views",
]

BASE_SCALE = (0.95, 1.0)
STRONG_SCALE = (0.2, 1.0)
BASE_ASPECT = (1.0, 1.0)
STRONG_ASPECT = (3.0 / 4.0, 4.0 / 3.0)

KINDS = ("crop_resize", "flip", "rot90", "color_jitter", "gaussian_blur", "grid_distort", "grid_shuffle")


# ---------------------------------------------------------------------------
# Deterministic kernels
# ---------------------------------------------------------------------------


def _as_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {image.shape}")
    return image


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return _to_uint8(_as_rgb(image).astype(np.float64) * factor)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    img = _as_rgb(image).astype(np.float64)
    gray_mean = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]).mean()
    return _to_uint8(gray_mean + factor * (img - gray_mean))


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    img = _as_rgb(image).astype(np.float64)
    gray = (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])[..., None]
    return _to_uint8(gray + factor * (img - gray))


def adjust_hue(image: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` (fraction of the full hue circle)."""
    if shift == 0.0:
        return _as_rgb(image).copy()
    img = _as_rgb(image).astype(np.float32) / 255.0
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = (hsv[..., 0] + shift * 360.0) % 360.0
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return _to_uint8(rgb * 255.0)


def resize(image: np.ndarray, out_size: int) -> np.ndarray:
    img = _as_rgb(image)
    if img.shape[0] == out_size and img.shape[1] == out_size:
        return img.copy()
    return cv2.resize(img, (out_size, out_size), interpolation=cv2.INTER_LINEAR)


def shuffle_tiles(image: np.ndarray, grid: tuple[int, int], permutation: np.ndarray) -> np.ndarray:
    """Rearrange the grid's equal tiles by an explicit permutation.

    ``permutation[i] = j`` places the content of source tile ``j``
    (row-major index) at destination tile ``i``.
    """
    img = _as_rgb(image)
    gh, gw = grid
    h, w = img.shape[:2]
    th, tw = h // gh, w // gw
    if th < 1 or tw < 1:
        raise ValueError(f"grid {grid} larger than image {w}x{h}")
    out = img.copy()
    for dst in range(gh * gw):
        src = int(permutation[dst])
        dr, dc = divmod(dst, gw)
        sr, sc = divmod(src, gw)
        out[dr * th : (dr + 1) * th, dc * tw : (dc + 1) * tw] = img[
            sr * th : (sr + 1) * th, sc * tw : (sc + 1) * tw
        ]
    return out


def sample_crop_box(
    h: int,
    w: int,
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rng: np.random.Generator,
    attempts: int = 10,
) -> tuple[int, int, int, int]:
    """Sample a crop box (y, x, ch, cw) of relative area within scale_range.

    Aspect ratios are drawn log-uniformly.  After integer rounding the
    box is nudged so its area fraction stays inside the requested range;
    if no aspect-compatible box fits, falls back to the largest centered
    square.
    """
    smin, smax = scale_range
    amin, amax = aspect_range
    area = h * w
    for _ in range(attempts):
        frac = rng.uniform(smin, smax)
        aspect = math.exp(rng.uniform(math.log(amin), math.log(amax)))
        cw = int(round(math.sqrt(frac * area * aspect)))
        ch = int(round(math.sqrt(frac * area / aspect)))
        # Keep the rounded box's area fraction inside [smin, smax].
        while cw * ch < smin * area and (cw < w or ch < h):
            if cw <= ch and cw < w:
                cw += 1
            elif ch < h:
                ch += 1
            else:
                cw += 1
        while cw * ch > smax * area and (cw > 1 or ch > 1):
            if cw >= ch and cw > 1:
                cw -= 1
            else:
                ch -= 1
        if 0 < cw <= w and 0 < ch <= h:
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            return y, x, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


# ---------------------------------------------------------------------------
# Stochastic transforms
# ---------------------------------------------------------------------------


def random_resized_crop(
    image: np.ndarray,
    scale_min: float,
    scale_max: float,
    out_size: int,
    rng: np.random.Generator,
    aspect_min: float = 1.0,
    aspect_max: float = 1.0,
) -> np.ndarray:
    if not (0.0 < scale_min <= scale_max <= 1.0):
        raise ValueError(f"invalid crop scale range [{scale_min}, {scale_max}]")
    if not (0.0 < aspect_min <= aspect_max):
        raise ValueError(f"invalid aspect range [{aspect_min}, {aspect_max}]")
    img = _as_rgb(image)
    h, w = img.shape[:2]
    y, x, ch, cw = sample_crop_box(h, w, (scale_min, scale_max), (aspect_min, aspect_max), rng)
    return resize(img[y : y + ch, x : x + cw], out_size)


def flip_rot90(
    image: np.ndarray,
    rng: np.random.Generator,
    p_flip: float = 0.5,
    p_rot: float = 0.5,
) -> np.ndarray:
    """Random square symmetry: independent horizontal/vertical flips plus
    a uniformly drawn quarter-turn when the rotation triggers.  A pure
    pixel permutation; the value multiset is untouched."""
    img = _as_rgb(image)
    if rng.random() < p_flip:
        img = img[:, ::-1]
    if rng.random() < p_flip:
        img = img[::-1, :]
    if rng.random() < p_rot:
        img = np.rot90(img, k=int(rng.integers(0, 4)))
    return np.ascontiguousarray(img)


def color_jitter(
    image: np.ndarray,
    rng: np.random.Generator,
    brightness: float = 0.8,
    contrast: float = 0.8,
    saturation: float = 0.8,
    hue: float = 0.2,
    probability: float = 0.8,
) -> np.ndarray:
    """Photometric jitter with factors from [max(0, 1-v), 1+v] and a hue
    rotation from [-hue, +hue], applied in a shuffled order."""
    for name, v in (("brightness", brightness), ("contrast", contrast), ("saturation", saturation)):
        if v < 0:
            raise ValueError(f"{name} strength must be >= 0")
    if not 0.0 <= hue <= 1.0:
        raise ValueError("hue strength must be in [0, 1] (fraction of the hue circle)")
    img = _as_rgb(image)
    if rng.random() >= probability:
        return img.copy()
    ops: list[Callable[[np.ndarray], np.ndarray]] = []
    f_b = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)
    f_c = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)
    f_s = rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)
    d_h = rng.uniform(-hue, hue)
    ops.append(lambda im: adjust_brightness(im, f_b))
    ops.append(lambda im: adjust_contrast(im, f_c))
    ops.append(lambda im: adjust_saturation(im, f_s))
    ops.append(lambda im: adjust_hue(im, d_h))
    for i in rng.permutation(len(ops)):
        img = ops[i](img)
    return img


def gaussian_blur(
    image: np.ndarray,
    rng: np.random.Generator,
    sigma_min: float = 0.1,
    sigma_max: float = 2.0,
    probability: float = 0.5,
) -> np.ndarray:
    """Isotropic Gaussian blur with sigma ~ U[sigma_min, sigma_max] and
    kernel size 2*ceil(3*sigma)+1."""
    if not (0.0 < sigma_min <= sigma_max):
        raise ValueError(f"invalid sigma range [{sigma_min}, {sigma_max}]")
    img = _as_rgb(image)
    if rng.random() >= probability:
        return img.copy()
    sigma = float(rng.uniform(sigma_min, sigma_max))
    k = 2 * int(math.ceil(3.0 * sigma)) + 1
    return cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)


def grid_distort(
    image: np.ndarray,
    rng: np.random.Generator,
    num_steps: int = 9,
    distort_limit: float = 0.2,
    probability: float = 0.5,
) -> np.ndarray:
    """Elastic-style distortion on a num_steps x num_steps cell grid.

    Cell extents are scaled by factors in [1-limit, 1+limit] per axis;
    the image is remapped through the resulting piecewise-linear
    coordinate map (bilinear sampling, mirrored borders).  Output shape
    equals input shape; zero limit is the identity map.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if distort_limit < 0:
        raise ValueError("distort_limit must be >= 0")
    img = _as_rgb(image)
    if rng.random() >= probability:
        return img.copy()
    h, w = img.shape[:2]

    def axis_map(n: int) -> np.ndarray:
        edges_out = np.linspace(0.0, float(n), num_steps + 1)
        steps = np.diff(edges_out) * rng.uniform(1.0 - distort_limit, 1.0 + distort_limit, num_steps)
        edges_src = np.concatenate([[0.0], np.cumsum(steps)])
        return np.interp(np.arange(n, dtype=np.float64), edges_out, edges_src)

    map_x = np.broadcast_to(axis_map(w)[None, :], (h, w)).astype(np.float32)
    map_y = np.broadcast_to(axis_map(h)[:, None], (h, w)).astype(np.float32)
    return cv2.remap(
        img,
        np.ascontiguousarray(map_x),
        np.ascontiguousarray(map_y),
        interpolation=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT_101,
    )


def grid_shuffle(
    image: np.ndarray,
    rng: np.random.Generator,
    grid: tuple[int, int] = (3, 3),
    probability: float = 0.5,
) -> np.ndarray:
    """Permute the image's grid tiles uniformly at random."""
    gh, gw = (grid, grid) if isinstance(grid, int) else grid
    if gh < 1 or gw < 1:
        raise ValueError("grid dimensions must be >= 1")
    img = _as_rgb(image)
    h, w = img.shape[:2]
    if gh > h or gw > w:
        raise ValueError(f"grid {grid} larger than image {w}x{h}")
    if rng.random() >= probability:
        return img.copy()
    perm = rng.permutation(gh * gw)
    return shuffle_tiles(img, (gh, gw), perm)


# ---------------------------------------------------------------------------
# Stacks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    """One parameterized stochastic transform within a stack."""

    kind: str
    params: dict = field(default_factory=dict)
    probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; choose from {KINDS}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


@dataclass(frozen=True)
class AugmentationStack:
    """Named, ordered list of transforms; the first must be the crop that
    produces the network input size."""

    name: str
    transforms: tuple[TransformSpec, ...]

    def __post_init__(self):
        if not self.transforms or self.transforms[0].kind != "crop_resize":
            raise ValueError("a stack must start with a crop_resize transform")

    @property
    def out_size(self) -> int:
        return self.transforms[0].params["out_size"]


@dataclass(frozen=True)
class ViewPair:
    """Two stochastic views of one source patch."""

    anchor_view: np.ndarray
    positive_view: np.ndarray
    patch_id: str


def apply_transform(image: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    p = spec.params
    if spec.kind == "crop_resize":
        return random_resized_crop(
            image,
            p["scale"][0],
            p["scale"][1],
            p["out_size"],
            rng,
            aspect_min=p.get("aspect", (1.0, 1.0))[0],
            aspect_max=p.get("aspect", (1.0, 1.0))[1],
        )
    if spec.kind == "flip":
        img = _as_rgb(image)
        if p.get("horizontal", True) and rng.random() < spec.probability:
            img = img[:, ::-1]
        if p.get("vertical", True) and rng.random() < spec.probability:
            img = img[::-1, :]
        return np.ascontiguousarray(img)
    if spec.kind == "rot90":
        img = _as_rgb(image)
        if rng.random() < spec.probability:
            img = np.rot90(img, k=int(rng.integers(0, 4)))
        return np.ascontiguousarray(img)
    if spec.kind == "color_jitter":
        return color_jitter(
            image,
            rng,
            brightness=p.get("brightness", 0.8),
            contrast=p.get("contrast", 0.8),
            saturation=p.get("saturation", 0.8),
            hue=p.get("hue", 0.2),
            probability=spec.probability,
        )
    if spec.kind == "gaussian_blur":
        return gaussian_blur(
            image,
            rng,
            sigma_min=p.get("sigma_min", 0.1),
            sigma_max=p.get("sigma_max", 2.0),
            probability=spec.probability,
        )
    if spec.kind == "grid_distort":
        return grid_distort(
            image,
            rng,
            num_steps=p.get("num_steps", 9),
            distort_limit=p.get("distort_limit", 0.2),
            probability=spec.probability,
        )
    if spec.kind == "grid_shuffle":
        return grid_shuffle(
            image,
            rng,
            grid=tuple(p.get("grid", (3, 3))),
            probability=spec.probability,
        )
    raise ValueError(f"unknown transform kind {spec.kind!r}")


def apply_stack(image: np.ndarray, stack: AugmentationStack, rng: np.random.Generator) -> np.ndarray:
    out = image
    for spec in stack.transforms:
        out = apply_transform(out, spec, rng)
    return out


def _crop(scale, aspect, out_size) -> TransformSpec:
    return TransformSpec("crop_resize", {"scale": scale, "aspect": aspect, "out_size": out_size})


def _base_transforms(out_size: int, scale, aspect) -> list[TransformSpec]:
    return [
        _crop(scale, aspect, out_size),
        TransformSpec("flip", {"horizontal": True, "vertical": True}, probability=0.5),
        TransformSpec("rot90", probability=0.5),
        TransformSpec(
            "color_jitter",
            {"brightness": 0.8, "contrast": 0.8, "saturation": 0.8, "hue": 0.2},
            probability=0.8,
        ),
    ]


_BLUR = TransformSpec("gaussian_blur", {"sigma_min": 0.1, "sigma_max": 2.0}, probability=0.5)
_DISTORT = TransformSpec("grid_distort", {"num_steps": 9, "distort_limit": 0.2}, probability=0.5)
_SHUFFLE = TransformSpec("grid_shuffle", {"grid": (3, 3)}, probability=0.5)


def _registry(out_size: int) -> dict[str, list[TransformSpec]]:
    base = lambda: _base_transforms(out_size, BASE_SCALE, BASE_ASPECT)
    strong = lambda: _base_transforms(out_size, STRONG_SCALE, STRONG_ASPECT)
    return {
        "base": base(),
        "base_blur": base() + [_BLUR],
        "base_scale": strong(),
        "simclr_original": strong() + [_BLUR],
        "base_scale_distort": strong() + [_DISTORT],
        "base_scale_distort_shuffle": strong() + [_DISTORT, _SHUFFLE],
        "base_shuffle": base() + [_SHUFFLE],
        "base_distort_shuffle": base() + [_DISTORT, _SHUFFLE],
    }


def stack_names() -> list[str]:
    return sorted(_registry(224))


def compose_stack(name: str, out_size: int = 224) -> AugmentationStack:
    """Look up a named augmentation stack at the given network input size."""
    registry = _registry(out_size)
    if name not in registry:
        raise KeyError(f"unknown stack {name!r}; registered stacks: {sorted(registry)}")
    return AugmentationStack(name, tuple(registry[name]))


def stack_from_transform_list(name: str, transforms: list[dict], out_size: int = 224) -> AugmentationStack:
    """Build a custom stack from config-style transform dicts.

    Each dict needs a ``kind`` plus optional ``probability`` and kind
    parameters.  A crop_resize entry missing ``out_size`` inherits the
    stack-level input size.
    """
    specs = []
    for entry in transforms:
        entry = dict(entry)
        kind = entry.pop("kind", None)
        if kind is None:
            raise ValueError("custom transform entry lacks 'kind'")
        probability = entry.pop("probability", 1.0)
        if kind == "crop_resize":
            entry.setdefault("out_size", out_size)
            entry.setdefault("scale", BASE_SCALE)
            entry["scale"] = tuple(entry["scale"])
            if "aspect" in entry:
                entry["aspect"] = tuple(entry["aspect"])
        specs.append(TransformSpec(kind, entry, probability))
    return AugmentationStack(name, tuple(specs))


def generate_views(patch, stack: AugmentationStack, rng: np.random.Generator) -> ViewPair:
    """Two independent stack applications to one source patch."""
    if hasattr(patch, "pixels"):
        pixels = patch.pixels
        patch_id = patch.patch_id
        if pixels is None:
            raise ValueError(f"patch {patch_id!r} has no pixels loaded")
    else:
        pixels = np.asarray(patch)
        patch_id = ""
    anchor = apply_stack(pixels, stack, rng)
    positive = apply_stack(pixels, stack, rng)
    return ViewPair(anchor, positive, patch_id)
