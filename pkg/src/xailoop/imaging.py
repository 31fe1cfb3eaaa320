"""Image and segmentation-mask primitives.

Segmented tissue rasters use a fixed six-color palette. Everything else
in the toolkit (overlays, expert corrections, preprocessing filters,
augmentation, synthetic data) builds on the two container types here.
All pixel math rounds half-up so results are reproducible bit-for-bit.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Hashable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates
from shapely.geometry import Polygon as _ShapelyPolygon

from .errors import (
    BadParameter,
    DimensionMismatch,
    EmptyClass,
    InvalidPolygon,
    PaletteViolation,
)


class TissueClass(IntEnum):
    """Per-pixel tissue label; BACKGROUND covers non-tissue slide area."""

    BACKGROUND = 0
    STROMA = 1
    NECROTIC = 2
    CARCINOMA = 3
    ADIPOSE = 4
    BENIGN_EPITHELIAL = 5


PALETTE: dict[TissueClass, tuple[int, int, int]] = {
    TissueClass.BACKGROUND: (255, 255, 255),
    TissueClass.STROMA: (255, 0, 0),
    TissueClass.NECROTIC: (0, 0, 255),
    TissueClass.CARCINOMA: (255, 255, 0),
    TissueClass.ADIPOSE: (0, 128, 0),
    TissueClass.BENIGN_EPITHELIAL: (255, 165, 0),
}

TISSUE_CLASS_NAMES: dict[TissueClass, str] = {
    TissueClass.BACKGROUND: "Background",
    TissueClass.STROMA: "Stroma",
    TissueClass.NECROTIC: "Necrotic",
    TissueClass.CARCINOMA: "Carcinoma",
    TissueClass.ADIPOSE: "Adipose",
    TissueClass.BENIGN_EPITHELIAL: "BenignEpithelial",
}

_NAME_TO_CLASS = {v: k for k, v in TISSUE_CLASS_NAMES.items()}

# channel threshold separating background white from tissue
BACKGROUND_CHANNEL_MIN = 235
DEFAULT_TISSUE_KEEP_THRESHOLD = 0.10


def tissue_class_from_name(name: str) -> TissueClass:
    try:
        return _NAME_TO_CLASS[name]
    except KeyError:
        raise BadParameter(f"unknown tissue class name {name!r}") from None


def round_half_up(x):
    """Round half-up, elementwise; ties like 0.5 go toward +inf."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB raster stored as an (H, W, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise BadParameter(f"expected (H, W, 3) pixels, got {arr.shape}")
        if arr.shape[0] < 8 or arr.shape[1] < 8:
            raise BadParameter("images must be at least 8x8")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, RgbImage) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class SegmentationMask:
    """Per-pixel tissue labels stored as an (H, W) uint8 array."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise BadParameter(f"expected (H, W) labels, got {arr.shape}")
        if arr.size == 0:
            raise BadParameter("mask must be non-empty")
        valid = {int(c) for c in TissueClass}
        if not set(np.unique(arr).tolist()) <= valid:
            raise BadParameter("mask contains values outside TissueClass")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "labels", arr)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, SegmentationMask) and np.array_equal(
            self.labels, other.labels
        )


@dataclass(frozen=True)
class CorrectionAnnotation:
    """Expert-drawn polygon relabelling the enclosed pixels."""

    polygon: tuple[tuple[float, float], ...]
    new_class: TissueClass

    def __post_init__(self):
        object.__setattr__(
            self,
            "polygon",
            tuple((float(x), float(y)) for x, y in self.polygon),
        )


def _palette_array() -> np.ndarray:
    out = np.zeros((len(TissueClass), 3), dtype=np.uint8)
    for cls, rgb in PALETTE.items():
        out[int(cls)] = rgb
    return out


_PALETTE_ARR = _palette_array()


def mask_to_rgb(mask: SegmentationMask) -> np.ndarray:
    """Render mask labels as their palette colors, as (H, W, 3) uint8."""
    return _PALETTE_ARR[mask.labels]


def encode_image(image: RgbImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_image(data: bytes) -> RgbImage:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RgbImage(arr)


def encode_mask(mask: SegmentationMask) -> bytes:
    """Serialize a mask as an 8-bit RGB PNG in palette colors."""
    buf = io.BytesIO()
    Image.fromarray(mask_to_rgb(mask), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask(data: bytes) -> SegmentationMask:
    """Inverse of :func:`encode_mask`; rejects any off-palette pixel."""
    with Image.open(io.BytesIO(data)) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    labels = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for cls, color in PALETTE.items():
        hit = np.all(rgb == np.asarray(color, dtype=np.uint8), axis=-1)
        labels[hit] = int(cls)
    bad = np.argwhere(labels == 255)
    if bad.size:
        y, x = (int(v) for v in bad[0])
        raise PaletteViolation(x, y, rgb[y, x])
    return SegmentationMask(labels)


def overlay(image: RgbImage, mask: SegmentationMask, alpha: float) -> RgbImage:
    """Blend palette colors over the image; background labels pass through."""
    if not 0.0 <= alpha <= 1.0:
        raise BadParameter(f"alpha must be in [0, 1], got {alpha}")
    if (image.height, image.width) != (mask.height, mask.width):
        raise DimensionMismatch(
            f"image {image.width}x{image.height} vs mask {mask.width}x{mask.height}"
        )
    color = mask_to_rgb(mask).astype(np.float64)
    blended = round_half_up((1.0 - alpha) * image.pixels + alpha * color)
    out = np.clip(blended, 0, 255).astype(np.uint8)
    keep = mask.labels == TissueClass.BACKGROUND
    out[keep] = image.pixels[keep]
    return RgbImage(out)


def _polygon_interior(
    vertices: Sequence[tuple[float, float]], width: int, height: int
) -> np.ndarray:
    """Even-odd point-in-polygon test at pixel centers (x+0.5, y+0.5)."""
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(px, py)
    inside = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        crosses = (y1 > gy) != (y2 > gy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = (x2 - x1) * (gy - y1) / (y2 - y1) + x1
        inside ^= crosses & (gx < xi)
    return inside


def apply_corrections(
    mask: SegmentationMask, corrections: Sequence[CorrectionAnnotation]
) -> SegmentationMask:
    """Relabel polygon interiors; later corrections win on overlap."""
    labels = mask.labels.copy()
    for corr in corrections:
        if len(corr.polygon) < 3:
            raise InvalidPolygon(f"polygon needs >=3 vertices, got {len(corr.polygon)}")
        verts = [
            (min(max(x, 0.0), float(mask.width)), min(max(y, 0.0), float(mask.height)))
            for x, y in corr.polygon
        ]
        if not _ShapelyPolygon(verts).is_valid:
            raise InvalidPolygon("polygon is self-intersecting or degenerate")
        inside = _polygon_interior(verts, mask.width, mask.height)
        labels[inside] = int(corr.new_class)
    return SegmentationMask(labels)


def corrections_to_json(corrections: Sequence[CorrectionAnnotation]) -> str:
    doc = {
        "corrections": [
            {
                "polygon": [[x, y] for x, y in c.polygon],
                "class": TISSUE_CLASS_NAMES[c.new_class],
            }
            for c in corrections
        ]
    }
    return json.dumps(doc)


def corrections_from_json(text: str) -> list[CorrectionAnnotation]:
    doc = json.loads(text)
    out = []
    for entry in doc["corrections"]:
        out.append(
            CorrectionAnnotation(
                polygon=tuple((float(x), float(y)) for x, y in entry["polygon"]),
                new_class=tissue_class_from_name(entry["class"]),
            )
        )
    return out


def tissue_fraction(image: RgbImage) -> float:
    """Fraction of pixels that are not background white (all channels >=235)."""
    white = np.all(image.pixels >= BACKGROUND_CHANNEL_MIN, axis=-1)
    return float(1.0 - white.mean())


def filter_low_tissue(
    images: Sequence[RgbImage], threshold: float = DEFAULT_TISSUE_KEEP_THRESHOLD
) -> list[RgbImage]:
    return [im for im in images if tissue_fraction(im) >= threshold]


def _rgb_to_hsv(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RGB->HSV; hue in degrees [0, 360), s and v in [0, 1]."""
    rgb = pixels.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    hue = np.zeros_like(maxc)
    nz = delta > 0
    rmax = nz & (maxc == r)
    gmax = nz & (maxc == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    hue[rmax] = ((g - b)[rmax] / delta[rmax]) % 6.0
    hue[gmax] = (b - r)[gmax] / delta[gmax] + 2.0
    hue[bmax] = (r - g)[bmax] / delta[bmax] + 4.0
    hue *= 60.0
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return hue, sat, maxc


def pen_mark_pixels(image: RgbImage) -> np.ndarray:
    """Boolean map of pixels inside the marker-pen HSV bands."""
    hue, sat, val = _rgb_to_hsv(image.pixels)
    saturated = (sat >= 0.6) & (val >= 0.4)
    blue = (hue >= 200.0) & (hue <= 260.0)
    green = (hue >= 90.0) & (hue <= 150.0)
    red = ((hue < 15.0) | (hue > 345.0)) & (sat >= 0.85)
    return saturated & (blue | green | red)


def remove_pen_marks(image: RgbImage) -> RgbImage:
    """Replace marker-pen pixels by background white."""
    marks = pen_mark_pixels(image)
    out = image.pixels.copy()
    out[marks] = (255, 255, 255)
    return RgbImage(out)


def flip_h(image: RgbImage) -> RgbImage:
    return RgbImage(image.pixels[:, ::-1].copy())


def flip_v(image: RgbImage) -> RgbImage:
    return RgbImage(image.pixels[::-1].copy())


def flip_h_mask(mask: SegmentationMask) -> SegmentationMask:
    return SegmentationMask(mask.labels[:, ::-1].copy())


def flip_v_mask(mask: SegmentationMask) -> SegmentationMask:
    return SegmentationMask(mask.labels[::-1].copy())


def _zoom_coords(height: int, width: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    y0 = (height - height * scale) / 2.0
    x0 = (width - width * scale) / 2.0
    src_y = y0 + (np.arange(height, dtype=np.float64) + 0.5) * scale - 0.5
    src_x = x0 + (np.arange(width, dtype=np.float64) + 0.5) * scale - 0.5
    return np.meshgrid(src_y, src_x, indexing="ij")


def _sample_rgb(pixels: np.ndarray, sy: np.ndarray, sx: np.ndarray, order: int) -> np.ndarray:
    out = np.empty(sy.shape + (3,), dtype=np.uint8)
    for c in range(3):
        ch = map_coordinates(
            pixels[..., c].astype(np.float64), [sy, sx], order=order, mode="nearest"
        )
        out[..., c] = np.clip(round_half_up(ch), 0, 255).astype(np.uint8)
    return out


def _sample_labels(labels: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    return map_coordinates(labels, [sy, sx], order=0, mode="nearest")


def zoom(image: RgbImage, scale: float) -> RgbImage:
    """Centered crop to side*scale, bilinearly resized back to full size."""
    if not 0.5 <= scale <= 1.0:
        raise BadParameter(f"zoom scale must be in [0.5, 1.0], got {scale}")
    sy, sx = _zoom_coords(image.height, image.width, scale)
    return RgbImage(_sample_rgb(image.pixels, sy, sx, order=1))


def zoom_with_mask(
    image: RgbImage, mask: SegmentationMask, scale: float
) -> tuple[RgbImage, SegmentationMask]:
    if (image.height, image.width) != (mask.height, mask.width):
        raise DimensionMismatch("image and mask dimensions differ")
    out = zoom(image, scale)
    sy, sx = _zoom_coords(image.height, image.width, scale)
    return out, SegmentationMask(_sample_labels(mask.labels, sy, sx))


DEFAULT_ELASTIC_ALPHA = 34.0
DEFAULT_ELASTIC_SIGMA = 4.0


def elastic_displacement(
    height: int, width: int, alpha: float, sigma: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed random displacement field (dy, dx), each (H, W)."""
    if alpha < 0:
        raise BadParameter(f"elastic alpha must be >= 0, got {alpha}")
    if sigma <= 0:
        raise BadParameter(f"elastic sigma must be > 0, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=(2, height, width))
    dy = gaussian_filter(noise[0], sigma) * alpha
    dx = gaussian_filter(noise[1], sigma) * alpha
    return dy, dx


def elastic_deform(
    image: RgbImage,
    alpha: float = DEFAULT_ELASTIC_ALPHA,
    sigma: float = DEFAULT_ELASTIC_SIGMA,
    seed: int = 0,
) -> RgbImage:
    """Warp by a seeded, Gaussian-smoothed random displacement field."""
    dy, dx = elastic_displacement(image.height, image.width, alpha, sigma, seed)
    gy, gx = np.meshgrid(
        np.arange(image.height, dtype=np.float64),
        np.arange(image.width, dtype=np.float64),
        indexing="ij",
    )
    return RgbImage(_sample_rgb(image.pixels, gy + dy, gx + dx, order=1))


def elastic_deform_with_mask(
    image: RgbImage,
    mask: SegmentationMask,
    alpha: float = DEFAULT_ELASTIC_ALPHA,
    sigma: float = DEFAULT_ELASTIC_SIGMA,
    seed: int = 0,
) -> tuple[RgbImage, SegmentationMask]:
    if (image.height, image.width) != (mask.height, mask.width):
        raise DimensionMismatch("image and mask dimensions differ")
    dy, dx = elastic_displacement(image.height, image.width, alpha, sigma, seed)
    gy, gx = np.meshgrid(
        np.arange(image.height, dtype=np.float64),
        np.arange(image.width, dtype=np.float64),
        indexing="ij",
    )
    out_img = RgbImage(_sample_rgb(image.pixels, gy + dy, gx + dx, order=1))
    out_mask = SegmentationMask(_sample_labels(mask.labels, gy + dy, gx + dx))
    return out_img, out_mask


def balance_classes(
    items: Sequence[tuple[RgbImage, Hashable]],
    alpha: float = DEFAULT_ELASTIC_ALPHA,
    sigma: float = DEFAULT_ELASTIC_SIGMA,
    seed: int = 0,
) -> list[tuple[RgbImage, Hashable]]:
    """Pad minority classes with elastic-deformed copies of their images.

    Originals are preserved; deformed copies cycle through each class's
    images with distinct seeds until every class matches the majority count.
    """
    if not items:
        raise EmptyClass("no samples to balance")
    by_label: dict[Hashable, list[RgbImage]] = {}
    for image, label in items:
        by_label.setdefault(label, []).append(image)
    if any(len(v) == 0 for v in by_label.values()):
        raise EmptyClass("a class has no samples")
    target = max(len(v) for v in by_label.values())
    out = list(items)
    counter = 0
    for label in sorted(by_label, key=str):
        originals = by_label[label]
        need = target - len(originals)
        for i in range(need):
            src = originals[i % len(originals)]
            out.append((elastic_deform(src, alpha, sigma, seed=seed + counter), label))
            counter += 1
    return out
