"""Model-agnostic and gradient-based explanation methods.

Superpixel segmentation partitions an image into interpretable units;
a local weighted linear fit over region on/off perturbations yields LIME
attributions, a specially weighted least squares over coalitions yields
Shapley values (with a brute-force oracle for small games), and the
gradient-pooled conv maps yield class activation heat maps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import label as cc_label, map_coordinates

from .errors import (
    BadParameter,
    DimensionMismatch,
    ExplainerBackendError,
    LengthMismatch,
    ShapeMismatch,
    SingularSystem,
    TooManyRegions,
)
from .imaging import RgbImage, round_half_up
from .refmodel import ModelAdapter

MIN_COEF_THRESHOLD = 1e-4


@dataclass(frozen=True)
class SuperpixelMap:
    """Partition of an image into contiguous regions."""

    region_of: np.ndarray  # (H, W) int region ids in [0, region_count)
    region_count: int

    def __post_init__(self):
        arr = np.asarray(self.region_of)
        if arr.ndim != 2:
            raise BadParameter("region map must be 2-D")
        ids = np.unique(arr)
        if ids.min() < 0 or ids.max() >= self.region_count:
            raise BadParameter("region ids must lie in [0, region_count)")
        if len(ids) != self.region_count:
            raise BadParameter("every region id must occupy at least one pixel")
        object.__setattr__(self, "region_of", arr.astype(np.int32))

    @property
    def width(self) -> int:
        return self.region_of.shape[1]

    @property
    def height(self) -> int:
        return self.region_of.shape[0]


def _seed_grid(height: int, width: int, m: int) -> tuple[int, int]:
    step = math.sqrt(height * width / m)
    rows = max(1, round(height / step))
    cols = max(1, round(width / step))
    while rows * cols < m:
        if rows <= cols:
            rows += 1
        else:
            cols += 1
    return rows, cols


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge orphan components into the largest adjacent region.

    Each region keeps its largest connected component; every other
    component joins whichever adjacent region currently has the most
    pixels (ties to the lowest id).
    """
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    n_regions = int(labels.max()) + 1
    comp = np.zeros(labels.shape, dtype=np.int32)
    comp_region: list[int] = [-1]  # comp ids are 1-based
    offset = 0
    for rid in range(n_regions):
        sel = labels == rid
        if not sel.any():
            continue
        c, n = cc_label(sel, structure=structure)
        comp[sel] = c[sel] + offset
        comp_region.extend([rid] * n)
        offset += n
    comp_region_arr = np.array(comp_region, dtype=np.int32)
    comp_sizes = np.bincount(comp.ravel(), minlength=offset + 1)

    # component adjacency from 4-neighbor pixel pairs
    vert = np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1)
    horz = np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1)
    pairs = np.concatenate([vert, horz])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    neighbors: dict[int, list[int]] = {}
    for a, b in pairs:
        neighbors.setdefault(int(a), []).append(int(b))
        neighbors.setdefault(int(b), []).append(int(a))

    region_counts = np.bincount(labels.ravel(), minlength=n_regions).astype(np.int64)
    keepers = set()
    for rid in range(n_regions):
        members = np.flatnonzero(comp_region_arr == rid)
        if len(members):
            keepers.add(int(members[np.argmax(comp_sizes[members])]))
    for cid in range(1, offset + 1):
        if cid in keepers:
            continue
        own = int(comp_region_arr[cid])
        cand: dict[int, int] = {}
        for nc in neighbors.get(cid, ()):
            r = int(comp_region_arr[nc])
            if r != own:
                cand[r] = region_counts[r]
        if not cand:
            continue
        target = min(cand, key=lambda r: (-cand[r], r))
        size = int(comp_sizes[cid])
        region_counts[own] -= size
        region_counts[target] += size
        comp_region_arr[cid] = target
    out = comp_region_arr[comp]
    survivors = np.unique(out)
    remap = np.zeros(survivors.max() + 1, dtype=np.int32)
    remap[survivors] = np.arange(len(survivors), dtype=np.int32)
    return remap[out]


def superpixels(
    image: RgbImage,
    target_regions: int,
    compactness: float = 10.0,
    iters: int = 10,
    seed: int = 0,
) -> SuperpixelMap:
    """SLIC-style local k-means over (r, g, b, scaled x, scaled y).

    Seeds start on a jittered grid; after clustering, orphan connected
    components are merged into the largest adjacent region, so the final
    region count can differ slightly from ``target_regions``.
    """
    h, w = image.height, image.width
    m = target_regions
    if m < 2 or m > h * w:
        raise BadParameter(f"target_regions must be in [2, {h * w}], got {m}")
    if compactness <= 0 or iters < 0:
        raise BadParameter("compactness must be > 0 and iters >= 0")
    rows, cols = _seed_grid(h, w, m)
    step = math.sqrt(h * w / m)
    spatial_scale = compactness / step

    rng = np.random.default_rng(seed)
    cy = np.repeat((np.arange(rows) + 0.5) * h / rows, cols)[:m]
    cx = np.tile((np.arange(cols) + 0.5) * w / cols, rows)[:m]
    jitter = rng.uniform(-0.25, 0.25, size=(2, m)) * step
    cy = np.clip(cy + jitter[0], 0, h - 1)
    cx = np.clip(cx + jitter[1], 0, w - 1)
    pix = image.pixels.astype(np.float64)
    centers_color = pix[cy.astype(int), cx.astype(int)]  # (m, 3)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    labels = np.zeros((h, w), dtype=np.int32)
    window = max(2, int(round(2 * step)))

    for sweep in range(iters + 1):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for k in range(m):
            y0 = max(0, int(cy[k]) - window)
            y1 = min(h, int(cy[k]) + window + 1)
            x0 = max(0, int(cx[k]) - window)
            x1 = min(w, int(cx[k]) + window + 1)
            dc = ((pix[y0:y1, x0:x1] - centers_color[k]) ** 2).sum(axis=-1)
            ds = ((ys[y0:y1, x0:x1] - cy[k]) * spatial_scale) ** 2 + (
                (xs[y0:y1, x0:x1] - cx[k]) * spatial_scale
            ) ** 2
            d = dc + ds
            closer = d < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][closer] = d[closer]
            labels[y0:y1, x0:x1][closer] = k
        missed = labels < 0
        if missed.any():
            my, mx = np.nonzero(missed)
            d_all = (
                ((pix[my, mx][:, None, :] - centers_color[None]) ** 2).sum(axis=-1)
                + ((my[:, None] - cy[None]) * spatial_scale) ** 2
                + ((mx[:, None] - cx[None]) * spatial_scale) ** 2
            )
            labels[my, mx] = d_all.argmin(axis=1)
        if sweep == iters:
            break
        for k in range(m):
            sel = labels == k
            if not sel.any():
                continue
            cy[k] = ys[sel].mean()
            cx[k] = xs[sel].mean()
            centers_color[k] = pix[sel].mean(axis=0)

    final = _enforce_connectivity(labels)
    return SuperpixelMap(region_of=final, region_count=int(final.max()) + 1)


def grid_map(height: int, width: int, rows: int, cols: int) -> SuperpixelMap:
    """Exact rows x cols block partition, handy for planted-region tests."""
    ys = np.minimum((np.arange(height) * rows) // height, rows - 1)
    xs = np.minimum((np.arange(width) * cols) // width, cols - 1)
    region = ys[:, None] * cols + xs[None, :]
    return SuperpixelMap(region_of=region.astype(np.int32), region_count=rows * cols)


def perturbation_set(m: int, n_samples: int, seed: int = 0) -> np.ndarray:
    """Binary on/off vectors; row 0 is all-ones (the original instance)."""
    if n_samples < 2:
        raise BadParameter(f"n_samples must be >= 2, got {n_samples}")
    if m < 1:
        raise BadParameter(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, size=(n_samples, m), dtype=np.uint8)
    z[0] = 1
    return z


def region_mean_colors(image: RgbImage, spmap: SuperpixelMap) -> np.ndarray:
    """(M, 3) uint8 mean color per region, rounded half-up."""
    if (image.height, image.width) != (spmap.height, spmap.width):
        raise DimensionMismatch("image and superpixel map dimensions differ")
    flat = spmap.region_of.ravel()
    sums = np.zeros((spmap.region_count, 3))
    for c in range(3):
        sums[:, c] = np.bincount(
            flat, weights=image.pixels[..., c].ravel(), minlength=spmap.region_count
        )
    counts = np.bincount(flat, minlength=spmap.region_count)
    return np.clip(round_half_up(sums / counts[:, None]), 0, 255).astype(np.uint8)


def apply_perturbation(
    image: RgbImage,
    spmap: SuperpixelMap,
    z: np.ndarray,
    mean_colors: np.ndarray | None = None,
) -> RgbImage:
    """Hide the "off" regions by flattening them to their mean color."""
    z = np.asarray(z)
    if len(z) != spmap.region_count:
        raise LengthMismatch(f"z has {len(z)} entries for {spmap.region_count} regions")
    if mean_colors is None:
        mean_colors = region_mean_colors(image, spmap)
    off = z == 0
    if not off.any():
        return RgbImage(image.pixels.copy())
    out = image.pixels.copy()
    hide = off[spmap.region_of]
    out[hide] = mean_colors[spmap.region_of[hide]]
    return RgbImage(out)


def lime_weight(z: np.ndarray, kernel_width: float = 0.25) -> float:
    """Proximity weight exp(-d^2 / width^2) with d = 1 - sqrt(|z| / M)."""
    z = np.asarray(z)
    m = len(z)
    on = float(np.count_nonzero(z))
    cos = math.sqrt(on / m) if on > 0 else 0.0
    d = 1.0 - cos
    return math.exp(-(d * d) / (kernel_width * kernel_width))


def fit_weighted_linear(
    z: np.ndarray, y: np.ndarray, weights: np.ndarray, ridge_lambda: float
) -> tuple[np.ndarray, float]:
    """Weighted ridge regression; the intercept is unpenalized."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(z) != len(y) or len(y) != len(weights):
        raise LengthMismatch("z, y and weights must have equal lengths")
    n, m = z.shape
    x = np.hstack([np.ones((n, 1)), z])
    wx = x * weights[:, None]
    a = x.T @ wx
    a[1:, 1:] += ridge_lambda * np.eye(m)
    b = wx.T @ y
    try:
        beta = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        if ridge_lambda == 0:
            raise SingularSystem("Gram matrix is singular and ridge_lambda is 0") from None
        beta = np.linalg.lstsq(a, b, rcond=None)[0]
    return beta[1:], float(beta[0])


@dataclass
class Explanation:
    """Renderable attribution record for one prediction."""

    method: str  # "LIME" | "KernelSHAP" | "GradCAM"
    target_class: str
    attributions: np.ndarray  # (M,) region weights, or (H, W) heat in [0, 1]
    highlight: tuple[int, ...] = ()
    base_value: float | None = None
    region_count: int | None = None

    def to_json(self) -> str:
        doc = {
            "method": self.method,
            "targetClass": self.target_class,
            "attributions": np.asarray(self.attributions).tolist(),
            "highlight": list(self.highlight),
        }
        if self.base_value is not None:
            doc["baseValue"] = self.base_value
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Explanation":
        doc = json.loads(text)
        attr = np.asarray(doc["attributions"], dtype=np.float64)
        return cls(
            method=doc["method"],
            target_class=doc["targetClass"],
            attributions=attr,
            highlight=tuple(doc["highlight"]),
            base_value=doc.get("baseValue"),
            region_count=len(attr) if attr.ndim == 1 else None,
        )


def _top_positive(coefs: np.ndarray, top_k: int, min_coef: float) -> tuple[int, ...]:
    order = sorted(range(len(coefs)), key=lambda i: (-coefs[i], i))
    picked = [i for i in order[:top_k] if coefs[i] > min_coef]
    return tuple(sorted(picked))


def _predict(adapter: ModelAdapter, images: Sequence[RgbImage]) -> np.ndarray:
    try:
        probs = np.asarray(adapter.predict_proba(images), dtype=np.float64)
    except Exception as exc:
        if isinstance(exc, ExplainerBackendError):
            raise
        raise ExplainerBackendError(f"adapter prediction failed: {exc}") from exc
    if probs.ndim != 2 or probs.shape[0] != len(images):
        raise ExplainerBackendError(f"bad probability shape {probs.shape}")
    return probs


def explain_lime(
    adapter: ModelAdapter,
    image: RgbImage,
    target_class: str | int | None = None,
    *,
    regions: int = 40,
    n_samples: int = 200,
    kernel_width: float = 0.25,
    ridge_lambda: float = 1.0,
    top_k: int = 5,
    min_coef: float = MIN_COEF_THRESHOLD,
    compactness: float = 10.0,
    slic_iters: int = 10,
    seed: int = 0,
    spmap: SuperpixelMap | None = None,
) -> tuple[Explanation, SuperpixelMap]:
    """Local weighted linear surrogate over region on/off perturbations.

    The explained class defaults to the most likely prediction on the
    unperturbed image. Highlight keeps the ``top_k`` largest positive
    coefficients above ``min_coef`` (ties broken by lower region id).
    """
    if spmap is None:
        spmap = superpixels(image, regions, compactness, slic_iters, seed)
    m = spmap.region_count
    z = perturbation_set(m, n_samples, seed)
    means = region_mean_colors(image, spmap)
    images = [apply_perturbation(image, spmap, row, means) for row in z]
    probs = _predict(adapter, images)
    t = _resolve_target(adapter, target_class, probs[0])
    y = probs[:, t]
    weights = np.array([lime_weight(row, kernel_width) for row in z])
    coefs, _intercept = fit_weighted_linear(z, y, weights, ridge_lambda)
    return (
        Explanation(
            method="LIME",
            target_class=str(adapter.classes[t]),
            attributions=coefs,
            highlight=_top_positive(coefs, top_k, min_coef),
            region_count=m,
        ),
        spmap,
    )


def _resolve_target(adapter: ModelAdapter, target_class, probs_row: np.ndarray) -> int:
    if target_class is None:
        return int(probs_row.argmax())
    if isinstance(target_class, int):
        if not 0 <= target_class < len(adapter.classes):
            raise BadParameter(f"class index {target_class} out of range")
        return target_class
    names = [str(c) for c in adapter.classes]
    if str(target_class) not in names:
        raise BadParameter(f"unknown class {target_class!r}")
    return names.index(str(target_class))


def shapley_kernel_weight(m: int, s: int) -> float:
    """Coalition weight (M-1) / (C(M,s) * s * (M-s)) for 1 <= s <= M-1."""
    if not 1 <= s <= m - 1:
        raise BadParameter(f"coalition size must be in [1, {m - 1}], got {s}")
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _solve_constrained_wls(
    z: np.ndarray, values: np.ndarray, weights: np.ndarray, base: float, full: float
) -> np.ndarray:
    """WLS over coalitions with phi(empty)=base and sum(phi)=full-base.

    The efficiency constraint is eliminated by substituting the last
    player's value, leaving an unconstrained weighted least squares.
    """
    z = np.asarray(z, dtype=np.float64)
    gap = full - base
    b = z[:, :-1] - z[:, -1:]
    t = values - base - z[:, -1] * gap
    bw = b * weights[:, None]
    a = b.T @ bw
    rhs = bw.T @ t
    try:
        phi_head = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        phi_head = np.linalg.lstsq(a, rhs, rcond=None)[0]
    return np.append(phi_head, gap - phi_head.sum())


def kernel_shap_game(
    value_fn: Callable[[np.ndarray], np.ndarray],
    m: int,
    *,
    exhaustive: bool = True,
    n_samples: int | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, float, float]:
    """Shapley values of a set game via the kernel-weighted regression.

    ``value_fn`` maps a (n, M) binary coalition matrix to n real values.
    Returns (phi, base, full) with base = v(empty) and full = v(all).
    Exhaustive mode enumerates every proper coalition; sampling mode draws
    coalition sizes from the kernel mass and pairs each draw with its
    complement.
    """
    if m < 1:
        raise BadParameter("need at least one player")
    base = float(value_fn(np.zeros((1, m), dtype=np.uint8))[0])
    full = float(value_fn(np.ones((1, m), dtype=np.uint8))[0])
    if m == 1:
        return np.array([full - base]), base, full
    if exhaustive:
        if m > 20:
            raise TooManyRegions(f"exhaustive mode supports M <= 20, got {m}")
        masks = np.arange(1, 2**m - 1, dtype=np.uint64)
        z = (masks[:, None] >> np.arange(m, dtype=np.uint64)) & 1
        z = z.astype(np.uint8)
        sizes = z.sum(axis=1)
        weights = np.array([shapley_kernel_weight(m, int(s)) for s in sizes])
    else:
        if n_samples is None or n_samples < 2:
            raise BadParameter("sampling mode needs n_samples >= 2")
        rng = np.random.default_rng(seed)
        size_mass = np.array([shapley_kernel_weight(m, s) * math.comb(m, s) for s in range(1, m)])
        size_p = size_mass / size_mass.sum()
        rows = []
        for _ in range((n_samples + 1) // 2):
            s = int(rng.choice(np.arange(1, m), p=size_p))
            members = rng.choice(m, size=s, replace=False)
            row = np.zeros(m, dtype=np.uint8)
            row[members] = 1
            rows.append(row)
            rows.append(1 - row)
        z = np.array(rows[:n_samples], dtype=np.uint8)
        # drop degenerate all-on/all-off rows produced by complements of
        # near-full coalitions; constraints already carry their information
        keep = (z.sum(axis=1) > 0) & (z.sum(axis=1) < m)
        z = z[keep]
        weights = np.ones(len(z))
    values = np.asarray(value_fn(z), dtype=np.float64)
    phi = _solve_constrained_wls(z, values, weights, base, full)
    return phi, base, full


def exact_shapley(value_fn: Callable[[np.ndarray], float], m: int) -> np.ndarray:
    """Brute-force Shapley values by full coalition enumeration (M <= 12)."""
    if m > 12:
        raise TooManyRegions(f"exact enumeration supports M <= 12, got {m}")
    if m < 1:
        raise BadParameter("need at least one player")
    values = np.empty(2**m)
    for mask in range(2**m):
        z = np.array([(mask >> j) & 1 for j in range(m)], dtype=np.uint8)
        values[mask] = float(value_fn(z))
    fact = [math.factorial(k) for k in range(m + 1)]
    phi = np.zeros(m)
    for i in range(m):
        for mask in range(2**m):
            if mask & (1 << i):
                continue
            s = bin(mask).count("1")
            w = fact[s] * fact[m - s - 1] / fact[m]
            phi[i] += w * (values[mask | (1 << i)] - values[mask])
    return phi


def kernel_shap(
    adapter: ModelAdapter,
    image: RgbImage,
    spmap: SuperpixelMap,
    target_class: str | int | None = None,
    *,
    exhaustive: bool = True,
    n_samples: int | None = None,
    seed: int = 0,
    top_k: int = 5,
    min_coef: float = MIN_COEF_THRESHOLD,
) -> Explanation:
    """KernelSHAP over superpixel coalitions with mean-color masking."""
    m = spmap.region_count
    means = region_mean_colors(image, spmap)
    probs_on = _predict(adapter, [image])
    t = _resolve_target(adapter, target_class, probs_on[0])

    def value_fn(z: np.ndarray) -> np.ndarray:
        out = np.empty(len(z))
        chunk = 64
        for start in range(0, len(z), chunk):
            rows = z[start : start + chunk]
            imgs = [apply_perturbation(image, spmap, r, means) for r in rows]
            out[start : start + chunk] = _predict(adapter, imgs)[:, t]
        return out

    phi, base, _full = kernel_shap_game(
        value_fn, m, exhaustive=exhaustive, n_samples=n_samples, seed=seed
    )
    return Explanation(
        method="KernelSHAP",
        target_class=str(adapter.classes[t]),
        attributions=phi,
        highlight=_top_positive(phi, top_k, min_coef),
        base_value=base,
        region_count=m,
    )


def grad_cam(
    activations: np.ndarray, gradients: np.ndarray, output_size: tuple[int, int]
) -> np.ndarray:
    """Heat map: ReLU of the gradient-pooled weighted map sum, max-normalized.

    Each map's weight is the spatial mean of its gradient; the weighted sum
    passes through ReLU, upsamples bilinearly to ``output_size`` and scales
    by the maximum when positive (else the map is identically zero).
    """
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ShapeMismatch(
            f"activations {activations.shape} vs gradients {gradients.shape}"
        )
    alphas = gradients.mean(axis=(1, 2))
    cam = np.maximum((alphas[:, None, None] * activations).sum(axis=0), 0.0)
    out_h, out_w = output_size
    h, w = cam.shape
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    up = map_coordinates(cam, [gy, gx], order=1, mode="nearest")
    peak = up.max()
    if peak <= 0:
        return np.zeros((out_h, out_w))
    return np.clip(up / peak, 0.0, 1.0)


def explain_grad_cam(
    adapter: ModelAdapter, image: RgbImage, target_class: str | int | None = None
) -> Explanation:
    if getattr(adapter, "grad_cam_tap", None) is None:
        raise ExplainerBackendError("adapter declares no grad-cam capability")
    probs = _predict(adapter, [image])
    t = _resolve_target(adapter, target_class, probs[0])
    act, grads = adapter.grad_cam_tap(image, t)
    heat = grad_cam(act, grads, (image.height, image.width))
    return Explanation(
        method="GradCAM",
        target_class=str(adapter.classes[t]),
        attributions=heat,
    )


_HIGHLIGHT_GREEN = np.array([0, 200, 0], dtype=np.float64)
_POSITIVE_RED = np.array([220, 0, 0], dtype=np.float64)
_NEGATIVE_BLUE = np.array([0, 0, 220], dtype=np.float64)
_TINT_ALPHA = 0.45
_HEAT_ALPHA = 0.5


def _tint(pixels: np.ndarray, where: np.ndarray, color: np.ndarray, alpha: float) -> None:
    blended = round_half_up((1 - alpha) * pixels[where] + alpha * color)
    pixels[where] = np.clip(blended, 0, 255).astype(np.uint8)


def _heat_ramp(heat: np.ndarray) -> np.ndarray:
    """Blue -> green -> red color ramp over heat in [0, 1]."""
    t = np.clip(heat, 0.0, 1.0)
    lo = np.clip(t * 2.0, 0.0, 1.0)
    hi = np.clip(t * 2.0 - 1.0, 0.0, 1.0)
    r = hi * 255.0
    g = np.where(t <= 0.5, lo * 255.0, (1.0 - hi) * 255.0)
    b = (1.0 - lo) * 255.0
    return np.stack([r, g, b], axis=-1)


def render_explanation(
    image: RgbImage,
    spmap: SuperpixelMap | None,
    explanation: Explanation,
    mode: str | None = None,
    min_coef: float = MIN_COEF_THRESHOLD,
) -> RgbImage:
    """Overlay an explanation: green highlights (plus red/blue signed
    regions for Shapley values) or a heat-map color ramp."""
    mode = (mode or explanation.method).upper()
    out = image.pixels.copy()
    if mode == "GRADCAM":
        heat = np.asarray(explanation.attributions, dtype=np.float64)
        if heat.shape != (image.height, image.width):
            raise DimensionMismatch("heat map does not match image dimensions")
        ramp = _heat_ramp(heat)
        blended = round_half_up((1 - _HEAT_ALPHA) * out + _HEAT_ALPHA * ramp)
        return RgbImage(np.clip(blended, 0, 255).astype(np.uint8))
    if spmap is None:
        raise BadParameter("region render modes need a superpixel map")
    if (image.height, image.width) != (spmap.height, spmap.width):
        raise DimensionMismatch("image and superpixel map dimensions differ")
    coefs = np.asarray(explanation.attributions, dtype=np.float64)
    highlight = set(explanation.highlight)
    if mode == "KERNELSHAP":
        pos = {i for i in range(len(coefs)) if coefs[i] > min_coef} - highlight
        neg = {i for i in range(len(coefs)) if coefs[i] < -min_coef}
        for ids, color in ((pos, _POSITIVE_RED), (neg, _NEGATIVE_BLUE)):
            if ids:
                sel = np.isin(spmap.region_of, sorted(ids))
                _tint(out, sel, color, _TINT_ALPHA)
    if highlight:
        sel = np.isin(spmap.region_of, sorted(highlight))
        _tint(out, sel, _HIGHLIGHT_GREEN, _TINT_ALPHA)
    return RgbImage(out)


def highlight_pixels(spmap: SuperpixelMap, highlight: Sequence[int]) -> np.ndarray:
    """Boolean (H, W) map of the highlighted regions' pixels."""
    if not len(highlight):
        return np.zeros((spmap.height, spmap.width), dtype=bool)
    return np.isin(spmap.region_of, sorted(set(int(i) for i in highlight)))
