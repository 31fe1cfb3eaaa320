"""Synthetic corpus, stratified splits, metrics and the five-phase loop.

Each outer iteration (1) runs Bayesian optimization over the current
hyperparameter ranges maximizing validation accuracy, (2) keeps the top
models by accuracy, (3) builds a blind rating session from test images,
(4) collects rubric grades through a rater, and (5) selects the
best-graded model and shrinks the ranges around its point. With the
simulated rater the whole run is a pure function of (config, seed).
"""
from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    AlreadyGraded,
    BadConfig,
    BadParameter,
    LengthMismatch,
    NonFiniteLoss,
    RaterTimeout,
    TooFewSamples,
)
from .imaging import (
    RgbImage,
    SegmentationMask,
    TissueClass,
    apply_corrections,
    corrections_from_json,
    decode_image,
    decode_mask,
    encode_image,
    encode_mask,
    flip_h,
    flip_h_mask,
    flip_v,
    flip_v_mask,
    mask_to_rgb,
    zoom_with_mask,
)
from .optimizer import (
    BoLoop,
    HyperparamSpace,
    TrialRecord,
    default_space,
    select_top_by_accuracy,
    shrink_space,
)
from .rating import aggregate_grades, build_session, select_best
from .refmodel import (
    RefModelAdapter,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .runstore import RunDir

CARCINOMA_SPECKLE_COLOR = (128, 96, 0)
CARCINOMA_SPECKLE_RATE = 0.12


def _seed_for(*keys) -> tuple[int, ...]:
    """Stable derived seed: ints pass through, strings hash via crc32."""
    out = []
    for k in keys:
        out.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return tuple(out)


@dataclass(frozen=True)
class ClassSignature:
    """Blob composition ranges that make a class visually identifiable."""

    carcinoma_fraction: tuple[float, float]
    carcinoma_blobs: tuple[int, int]
    stroma_fraction: tuple[float, float] = (0.15, 0.30)
    adipose_fraction: tuple[float, float] = (0.05, 0.15)
    necrotic_fraction: tuple[float, float] = (0.00, 0.05)
    benign_fraction: tuple[float, float] = (0.00, 0.05)


DEFAULT_SIGNATURES: dict[str, ClassSignature] = {
    "Normal": ClassSignature((0.00, 0.01), (0, 1)),
    "LuminalA": ClassSignature((0.06, 0.13), (1, 3)),
    "LuminalB": ClassSignature((0.18, 0.28), (2, 5)),
    "Basal": ClassSignature((0.33, 0.43), (3, 7)),
    "Her2": ClassSignature((0.48, 0.58), (4, 8)),
}

MIN_FRACTION_GAP = 0.05


@dataclass
class SynthDatasetConfig:
    active_classes: tuple[str, ...]
    per_class_count: int
    image_side: int = 128
    signatures: Mapping[str, ClassSignature] = field(
        default_factory=lambda: dict(DEFAULT_SIGNATURES)
    )
    seed: int = 0

    def __post_init__(self):
        if self.per_class_count < 1 or self.image_side < 16:
            raise BadConfig("per_class_count must be >= 1 and image_side >= 16")
        missing = [c for c in self.active_classes if c not in self.signatures]
        if missing:
            raise BadConfig(f"no signature for classes {missing}")
        ranges = sorted(self.signatures[c].carcinoma_fraction for c in self.active_classes)
        for (lo1, hi1), (lo2, hi2) in zip(ranges, ranges[1:]):
            if lo2 - hi1 < MIN_FRACTION_GAP - 1e-9:
                raise BadConfig(
                    f"carcinoma ranges ({lo1}, {hi1}) and ({lo2}, {hi2}) closer than "
                    f"{MIN_FRACTION_GAP}"
                )


@dataclass
class Sample:
    index: int
    image: RgbImage
    mask: SegmentationMask
    label: str


def _ellipse(side: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    dy, dx = ys - cy, xs - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _paint_carcinoma(
    mask: np.ndarray, sig: ClassSignature, rng: np.random.Generator
) -> None:
    side = mask.shape[0]
    total = side * side
    lo, hi = sig.carcinoma_fraction
    bmin, bmax = sig.carcinoma_blobs
    planned = int(rng.integers(bmin, bmax + 1)) if bmax > 0 else 0
    if hi <= 0 or planned == 0:
        return
    target = rng.uniform(lo + 0.25 * (hi - lo), lo + 0.7 * (hi - lo))
    carc = int(TissueClass.CARCINOMA)
    count = 0
    last_blob: np.ndarray | None = None
    last_center = (0.0, 0.0)
    remaining = planned
    for _attempt in range(300):
        frac = count / total
        if frac >= target and frac >= lo:
            break
        goal = max(target - frac, 0.002)
        if remaining > 1:
            goal = max(goal / remaining, 0.002)
        goal = min(goal, 0.7 * (hi - frac))
        if goal <= 0:
            break
        area = goal * total
        aspect = rng.uniform(0.5, 1.0)
        a = max(1.0, math.sqrt(area / (math.pi * aspect)))
        b = max(1.0, a * aspect)
        theta = rng.uniform(0, math.pi)
        free = np.flatnonzero(mask.ravel() != carc)
        pos = int(rng.choice(free))
        cy, cx = divmod(pos, side)
        blob = _ellipse(side, cy, cx, a, b, theta) & (mask != carc)
        mask[blob] = carc
        count = int((mask == carc).sum())
        last_blob, last_center = blob, (cy, cx)
        remaining = max(0, remaining - 1)
    hi_count = math.floor(hi * total)
    if count > hi_count and last_blob is not None:
        # trim the last blob's rim, farthest pixels first
        ys, xs = np.nonzero(last_blob)
        d = (ys - last_center[0]) ** 2 + (xs - last_center[1]) ** 2
        order = np.argsort(-d, kind="stable")
        excess = count - hi_count
        mask[ys[order[:excess]], xs[order[:excess]]] = int(TissueClass.BACKGROUND)
        count = hi_count
    if count / total < lo:
        raise BadConfig("carcinoma painting failed to reach the configured range")


def _paint_soft(
    mask: np.ndarray,
    tissue: TissueClass,
    frange: tuple[float, float],
    rng: np.random.Generator,
) -> None:
    side = mask.shape[0]
    total = side * side
    target = rng.uniform(*frange)
    if target <= 0:
        return
    painted = 0
    for _ in range(12):
        if painted / total >= 0.8 * target:
            break
        area = max(9.0, (target - painted / total) * total / 2.0)
        aspect = rng.uniform(0.4, 1.0)
        a = max(1.5, math.sqrt(area / (math.pi * aspect)))
        b = max(1.5, a * aspect)
        theta = rng.uniform(0, math.pi)
        free = np.flatnonzero(mask.ravel() == 0)
        if len(free) == 0:
            break
        pos = int(rng.choice(free))
        cy, cx = divmod(pos, side)
        blob = _ellipse(side, cy, cx, a, b, theta) & (mask == 0)
        mask[blob] = int(tissue)
        painted += int(blob.sum())


def render_mask_image(
    mask: SegmentationMask, rng: np.random.Generator, noise: int = 8
) -> RgbImage:
    """Palette render with speckled carcinoma texture and seeded noise."""
    img = mask_to_rgb(mask).astype(np.int16)
    carc = mask.labels == int(TissueClass.CARCINOMA)
    if carc.any():
        speckle = carc & (rng.random(mask.labels.shape) < CARCINOMA_SPECKLE_RATE)
        img[speckle] = CARCINOMA_SPECKLE_COLOR
    img = img + rng.integers(-noise, noise + 1, size=img.shape, dtype=np.int16)
    return RgbImage(np.clip(img, 0, 255).astype(np.uint8))


def synthesize_dataset(config: SynthDatasetConfig) -> list[Sample]:
    """Seeded corpus of (image, exact mask, label) triples."""
    samples = []
    index = 0
    for ci, label in enumerate(config.active_classes):
        sig = config.signatures[label]
        for i in range(config.per_class_count):
            rng = np.random.default_rng(_seed_for(config.seed, ci, i, "synth"))
            mask_arr = np.zeros((config.image_side, config.image_side), dtype=np.uint8)
            _paint_carcinoma(mask_arr, sig, rng)
            _paint_soft(mask_arr, TissueClass.STROMA, sig.stroma_fraction, rng)
            _paint_soft(mask_arr, TissueClass.ADIPOSE, sig.adipose_fraction, rng)
            _paint_soft(mask_arr, TissueClass.NECROTIC, sig.necrotic_fraction, rng)
            _paint_soft(mask_arr, TissueClass.BENIGN_EPITHELIAL, sig.benign_fraction, rng)
            mask = SegmentationMask(mask_arr)
            image = render_mask_image(mask, rng)
            samples.append(Sample(index=index, image=image, mask=mask, label=label))
            index += 1
    return samples


def carcinoma_fraction(mask: SegmentationMask) -> float:
    return float((mask.labels == int(TissueClass.CARCINOMA)).mean())


def save_dataset(samples: Sequence[Sample], out_dir: str | Path, classes: Sequence[str]) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for s in samples:
        image_rel = f"images/{s.index:05d}.png"
        mask_rel = f"masks/{s.index:05d}.png"
        (out / image_rel).write_bytes(encode_image(s.image))
        (out / mask_rel).write_bytes(encode_mask(s.mask))
        items.append({"image": image_rel, "mask": mask_rel, "label": s.label})
    doc = {"classes": list(classes), "items": items}
    (out / "labels.json").write_text(json.dumps(doc, indent=1))


def load_dataset(data_dir: str | Path) -> tuple[list[Sample], list[str]]:
    root = Path(data_dir)
    doc = json.loads((root / "labels.json").read_text())
    samples = []
    for i, item in enumerate(doc["items"]):
        samples.append(
            Sample(
                index=i,
                image=decode_image((root / item["image"]).read_bytes()),
                mask=decode_mask((root / item["mask"]).read_bytes()),
                label=item["label"],
            )
        )
    return samples, list(doc["classes"])


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]


def split_dataset(
    samples: Sequence[Sample],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Stratified seeded split with largest-remainder allocation per class."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadParameter(f"ratios must sum to 1, got {ratios}")
    if not samples:
        raise TooFewSamples("empty dataset")
    by_class: dict[str, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    for label, group in by_class.items():
        if len(group) < 5:
            raise TooFewSamples(f"class {label} has {len(group)} samples, need >= 5")
    parts: tuple[list[Sample], list[Sample], list[Sample]] = ([], [], [])
    for label in sorted(by_class):
        group = by_class[label]
        rng = np.random.default_rng(_seed_for(seed, label, "split"))
        order = rng.permutation(len(group))
        n = len(group)
        exact = [n * r for r in ratios]
        counts = [math.floor(e) for e in exact]
        remainders = [e - c for e, c in zip(exact, counts)]
        short = n - sum(counts)
        for idx in sorted(range(3), key=lambda i: (-remainders[i], i))[:short]:
            counts[idx] += 1
        start = 0
        for part, cnt in zip(parts, counts):
            part.extend(group[int(i)] for i in order[start : start + cnt])
            start += cnt
    return DatasetSplit(train=parts[0], validation=parts[1], test=parts[2])


def compute_metrics(
    predictions: np.ndarray, labels: Sequence[int | str], active_classes: Sequence[str]
) -> dict:
    """Accuracy, macro F1 and mean cross-entropy from probability rows."""
    probs = np.asarray(predictions, dtype=np.float64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise LengthMismatch("predictions and labels must align")
    names = [str(c) for c in active_classes]
    y = np.array(
        [names.index(str(l)) if not isinstance(l, (int, np.integer)) else int(l) for l in labels]
    )
    pred = probs.argmax(axis=1)
    accuracy = float((pred == y).mean()) if len(y) else 0.0
    f1s = []
    for c in range(len(names)):
        tp = int(((pred == c) & (y == c)).sum())
        fp = int(((pred == c) & (y != c)).sum())
        fn = int(((pred != c) & (y == c)).sum())
        if tp + fp + fn == 0:
            f1s.append(0.0)
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    p_true = np.clip(probs[np.arange(len(y)), y], 1e-12, None) if len(y) else np.array([1.0])
    return {
        "accuracy": accuracy,
        "macroF1": float(np.mean(f1s)) if f1s else 0.0,
        "meanLoss": float(-np.log(p_true).mean()),
    }


@dataclass
class LoopConfig:
    """Experiment configuration for one optimization run."""

    iterations: int = 3
    trials_per_iteration: int = 12
    top_n: int = 3
    images_per_class: int = 3
    shrink_factor: float = 0.5
    rater_kind: str = "simulated"
    seed: int = 0
    epochs: int = 12
    classes: tuple[str, ...] | None = None
    include_corrected_masks: bool = False
    corrections_dir: str | None = None
    augment_flips: bool = False
    augment_zoom: bool = False
    zoom_range: tuple[float, float] = (0.8, 1.0)
    carry_incumbent: bool = True
    initial_design: int = 5
    shrunk_initial_design: int = 3
    feature_maps: int = 8
    input_side: int = 32
    explain: dict = field(
        default_factory=lambda: {
            "regions": 40,
            "n_samples": 150,
            "kernel_width": 0.25,
            "ridge_lambda": 1.0,
            "top_k": 5,
        }
    )
    space: HyperparamSpace = field(default_factory=default_space)
    rater_timeout: float | None = None
    poll_interval: float = 0.5

    def __post_init__(self):
        if self.top_n > self.trials_per_iteration:
            raise BadConfig("topN must be <= trialsPerIteration")
        if self.rater_kind not in ("simulated", "interactive", "file"):
            raise BadConfig(f"unknown raterKind {self.rater_kind!r}")
        if self.iterations < 0:
            raise BadConfig("iterations must be >= 0")

    def to_json_dict(self) -> dict:
        doc = {
            "iterations": self.iterations,
            "trialsPerIteration": self.trials_per_iteration,
            "topN": self.top_n,
            "imagesPerClass": self.images_per_class,
            "shrinkFactor": self.shrink_factor,
            "space": self.space.to_json_dict(),
            "raterKind": self.rater_kind,
            "seed": self.seed,
            "epochs": self.epochs,
            "carryIncumbent": self.carry_incumbent,
            "initialDesign": self.initial_design,
            "shrunkInitialDesign": self.shrunk_initial_design,
            "featureMaps": self.feature_maps,
            "inputSide": self.input_side,
            "explain": dict(self.explain),
            "augmentFlips": self.augment_flips,
            "augmentZoom": self.augment_zoom,
            "zoomRange": list(self.zoom_range),
            "includeCorrectedMasks": self.include_corrected_masks,
        }
        if self.classes is not None:
            doc["classes"] = list(self.classes)
        if self.corrections_dir is not None:
            doc["correctionsDir"] = self.corrections_dir
        if self.rater_timeout is not None:
            doc["raterTimeoutSec"] = self.rater_timeout
        return doc

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "LoopConfig":
        kwargs = dict(
            iterations=doc.get("iterations", 3),
            trials_per_iteration=doc.get("trialsPerIteration", 12),
            top_n=doc.get("topN", 3),
            images_per_class=doc.get("imagesPerClass", 3),
            shrink_factor=doc.get("shrinkFactor", 0.5),
            rater_kind=doc.get("raterKind", "simulated"),
            seed=doc.get("seed", 0),
            epochs=doc.get("epochs", 12),
            carry_incumbent=doc.get("carryIncumbent", True),
            initial_design=doc.get("initialDesign", 5),
            shrunk_initial_design=doc.get("shrunkInitialDesign", 3),
            feature_maps=doc.get("featureMaps", 8),
            input_side=doc.get("inputSide", 32),
            augment_flips=doc.get("augmentFlips", False),
            augment_zoom=doc.get("augmentZoom", False),
            zoom_range=tuple(doc.get("zoomRange", (0.8, 1.0))),
            include_corrected_masks=doc.get("includeCorrectedMasks", False),
        )
        if "space" in doc:
            kwargs["space"] = HyperparamSpace.from_json_dict(doc["space"])
        if "explain" in doc:
            kwargs["explain"] = dict(doc["explain"])
        if "classes" in doc:
            kwargs["classes"] = tuple(doc["classes"])
        if "correctionsDir" in doc:
            kwargs["corrections_dir"] = doc["correctionsDir"]
        if "raterTimeoutSec" in doc:
            kwargs["rater_timeout"] = doc["raterTimeoutSec"]
        if "pollIntervalSec" in doc:
            kwargs["poll_interval"] = doc["pollIntervalSec"]
        return cls(**kwargs)


def apply_corrections_to_samples(
    samples: Sequence[Sample], corrections_dir: str | Path, seed: int = 0
) -> list[Sample]:
    """Corrected-mask variants of any sample with a matching corrections file.

    A file ``<corrections_dir>/<index:05d>.json`` holds the expert polygons
    for sample ``index``; the corrected mask is re-rendered to an image with
    the standard conventions.
    """
    root = Path(corrections_dir)
    out = []
    next_index = max((s.index for s in samples), default=-1) + 1
    for s in samples:
        path = root / f"{s.index:05d}.json"
        if not path.exists():
            continue
        corrected = apply_corrections(s.mask, corrections_from_json(path.read_text()))
        rng = np.random.default_rng(_seed_for(seed, s.index, "corrected"))
        out.append(
            Sample(
                index=next_index,
                image=render_mask_image(corrected, rng),
                mask=corrected,
                label=s.label,
            )
        )
        next_index += 1
    return out


def _augment_flips(samples: Sequence[Sample]) -> list[Sample]:
    out = []
    next_index = max((s.index for s in samples), default=-1) + 1
    for s in samples:
        for img, msk in (
            (flip_h(s.image), flip_h_mask(s.mask)),
            (flip_v(s.image), flip_v_mask(s.mask)),
        ):
            out.append(Sample(index=next_index, image=img, mask=msk, label=s.label))
            next_index += 1
    return out


def _augment_zoom(
    samples: Sequence[Sample], zoom_range: tuple[float, float], seed: int
) -> list[Sample]:
    out = []
    next_index = max((s.index for s in samples), default=-1) + 1
    for s in samples:
        rng = np.random.default_rng(_seed_for(seed, s.index, "zoomaug"))
        scale = float(rng.uniform(*zoom_range))
        img, msk = zoom_with_mask(s.image, s.mask, scale)
        out.append(Sample(index=next_index, image=img, mask=msk, label=s.label))
        next_index += 1
    return out


class SimulatedRater:
    kind = "simulated"

    def collect(self, run: RunDir, session_id: str):
        from .rating import decode_binary, simulated_rater

        session = run.load_session(session_id)
        for item in session.items:
            if item.grade is not None:
                continue
            hl = decode_binary((run.renders_dir / item.highlight_ref).read_bytes())
            mask = decode_mask((run.renders_dir / item.mask_ref).read_bytes())
            run.record_grade(session_id, item.item_id, simulated_rater(hl, mask))
        return run.load_session(session_id)


class PollingRater:
    """Waits for grades to arrive through the service or grade files."""

    kind = "interactive"

    def __init__(self, timeout: float | None = None, poll_interval: float = 0.5):
        self.timeout = timeout
        self.poll_interval = poll_interval

    def _apply_external(self, run: RunDir, session_id: str) -> None:
        pass

    def collect(self, run: RunDir, session_id: str):
        last_progress = time.monotonic()
        last_count = -1
        while True:
            self._apply_external(run, session_id)
            session = run.load_session(session_id)
            graded = sum(1 for i in session.items if i.grade is not None)
            if graded != last_count:
                last_count = graded
                last_progress = time.monotonic()
            if session.status == "complete":
                return session
            if self.timeout is not None and time.monotonic() - last_progress > self.timeout:
                raise RaterTimeout(
                    f"no grades for {self.timeout}s on session {session_id}"
                )
            time.sleep(self.poll_interval)


class FileRater(PollingRater):
    """Reads grades from ``sessions/<id>.grades.json`` as they appear."""

    kind = "file"

    def _apply_external(self, run: RunDir, session_id: str) -> None:
        path = run.sessions_dir / f"{session_id}.grades.json"
        if not path.exists():
            return
        doc = json.loads(path.read_text())
        session = run.load_session(session_id)
        pending = {i.item_id for i in session.items if i.grade is None}
        for item_id, grade in doc.get("grades", {}).items():
            if item_id in pending:
                try:
                    run.record_grade(session_id, item_id, grade)
                except AlreadyGraded:
                    pass


def make_rater(config: LoopConfig):
    if config.rater_kind == "simulated":
        return SimulatedRater()
    if config.rater_kind == "file":
        return FileRater(config.rater_timeout, config.poll_interval)
    return PollingRater(config.rater_timeout, config.poll_interval)


def _space_brief(space: HyperparamSpace) -> str:
    bits = []
    for d in space.dimensions:
        tag = "" if d.scale == "linear" else f", {d.scale}"
        tag += ", integral" if d.integral else ""
        bits.append(f"{d.name} [{d.lower:g}, {d.upper:g}{tag}]")
    return "; ".join(bits)


def run_hitl_loop(
    samples: Sequence[Sample],
    classes: Sequence[str],
    config: LoopConfig,
    run_dir: str | Path,
    rater=None,
) -> dict:
    """Execute (or resume) a run; returns the report document.

    Completed phases found on disk are replayed rather than recomputed, so
    a run interrupted while awaiting grades resumes with grades intact.
    """
    rater = rater or make_rater(config)
    run = RunDir(run_dir).init()
    if not run.config_path.exists():
        run.write_json(run.config_path, config.to_json_dict())
    try:
        return _run_loop(samples, classes, config, run, rater)
    except RaterTimeout:
        raise  # awaiting-grades checkpoint stays resumable
    except Exception:
        state = run.load_state() or {}
        state.update({"runId": run.run_id, "state": "failed"})
        run.save_state(state)
        raise


def _run_loop(samples, classes, config: LoopConfig, run: RunDir, rater) -> dict:
    if config.classes:
        classes = [c for c in classes if c in set(config.classes)]
        samples = [s for s in samples if s.label in set(config.classes)]
    classes = sorted(set(classes))

    split = split_dataset(samples, seed=config.seed)
    train_samples = list(split.train)
    if config.include_corrected_masks and config.corrections_dir:
        train_samples += apply_corrections_to_samples(
            split.train, config.corrections_dir, seed=config.seed
        )
    if config.augment_flips:
        train_samples += _augment_flips(train_samples)
    if config.augment_zoom:
        train_samples += _augment_zoom(train_samples, config.zoom_range, config.seed)
    train_set = [(s.image, s.label) for s in train_samples]
    val_set = [(s.image, s.label) for s in split.validation]
    images_by_class: dict[str, list] = {c: [] for c in classes}
    for s in split.test:
        images_by_class[s.label].append((s.image, s.mask))

    existing = run.load_trials()
    phases = max(1, config.iterations)
    total_trials = phases * config.trials_per_iteration
    space = config.space
    incumbent: TrialRecord | None = None
    iteration_reports: list[dict] = []
    trajectory: list[float] = []

    def save_state(state: str, session_id: str | None = None, trials_done: int = 0):
        run.save_state(
            {
                "runId": run.run_id,
                "state": state,
                "sessionId": session_id,
                "progress": {
                    "iteration": len(iteration_reports),
                    "totalIterations": config.iterations,
                    "trialsDone": trials_done,
                    "totalTrials": total_trials,
                },
            }
        )

    for k in range(phases):
        iter_existing = [t for t in existing if t.iteration == k]
        if len(iter_existing) == config.trials_per_iteration:
            iter_trials = iter_existing
        elif iter_existing:
            raise BadConfig(
                "run directory holds a partial optimization phase; resume is "
                "only supported from the awaiting-grades checkpoint"
            )
        else:
            iter_trials = _bo_phase(
                run, k, space, config, train_set, val_set, classes, save_state
            )

        report_trials = [t.to_json_dict() for t in iter_trials]
        if k >= config.iterations:
            # degenerate loop: a single optimization phase, no rating
            best_by_acc = select_top_by_accuracy(iter_trials, 1)[0]
            incumbent = best_by_acc
            iteration_reports.append(
                {
                    "iteration": k + 1,
                    "space": space.to_json_dict(),
                    "trials": report_trials,
                    "sessionId": None,
                    "meanGrades": {},
                    "selected": best_by_acc.to_json_dict(),
                    "nextSpace": None,
                }
            )
            break

        top = select_top_by_accuracy(iter_trials, config.top_n)
        session_id = f"{k + 1:03d}"
        session = run.load_session(session_id)
        if session is None:
            adapters = {
                f"trial-{t.index}": RefModelAdapter(load_checkpoint(run.root / t.model_ref))
                for t in top
            }
            session = build_session(
                models=top,
                adapters=adapters,
                images_by_class=images_by_class,
                images_per_class=config.images_per_class,
                session_id=session_id,
                render_dir=run.renders_dir,
                seed=int(np.random.default_rng(_seed_for(config.seed, k, "shuffle")).integers(2**31)),
                image_seed=config.seed,
                explain_params=config.explain,
            )
            run.save_session(session)
        save_state("awaitingGrades", session_id, trials_done=(k + 1) * config.trials_per_iteration)
        session = rater.collect(run, session_id)
        grades = aggregate_grades(session)
        for t in top:
            t.mean_grade = grades["models"][f"trial-{t.index}"]
        candidates = list(top)
        carried = None
        if (
            config.carry_incumbent
            and incumbent is not None
            and incumbent.index not in {t.index for t in top}
        ):
            carried = incumbent
            candidates.append(incumbent)
        selected = select_best(candidates)
        incumbent = selected
        trajectory.append(float(selected.mean_grade))
        next_space = shrink_space(space, selected.point, config.shrink_factor)
        report_trials = [t.to_json_dict() for t in iter_trials]
        if carried is not None:
            doc = carried.to_json_dict()
            doc["carried"] = True
            report_trials.append(doc)
        iteration_reports.append(
            {
                "iteration": k + 1,
                "space": space.to_json_dict(),
                "trials": report_trials,
                "sessionId": session_id,
                "meanGrades": grades["models"],
                "gradesByClass": grades["byClass"],
                "selected": selected.to_json_dict(),
                "nextSpace": next_space.to_json_dict(),
            }
        )
        space = next_space

    assert incumbent is not None
    final_model = load_checkpoint(run.root / incumbent.model_ref)
    adapter = RefModelAdapter(final_model)
    test_probs = adapter.predict_proba([s.image for s in split.test])
    test_metrics = compute_metrics(test_probs, [s.label for s in split.test], classes)
    report = {
        "runId": run.run_id,
        "config": config.to_json_dict(),
        "classes": list(classes),
        "splitSizes": {
            "train": len(split.train),
            "validation": len(split.validation),
            "test": len(split.test),
        },
        "iterations": iteration_reports,
        "gradeTrajectory": trajectory,
        "final": {"trial": incumbent.to_json_dict(), "testMetrics": test_metrics},
        "artifacts": {
            "trials": "trials.jsonl",
            "sessions": [it["sessionId"] for it in iteration_reports if it["sessionId"]],
            "models": sorted(p.name for p in run.models_dir.glob("*.json")),
        },
    }
    run.write_json(run.report_json_path, report)
    run.report_md_path.write_text(render_report(report))
    save_state("complete", trials_done=total_trials)
    return report


def _bo_phase(
    run: RunDir,
    iteration: int,
    space: HyperparamSpace,
    config: LoopConfig,
    train_set,
    val_set,
    classes,
    save_state,
) -> list[TrialRecord]:
    n_init = config.initial_design if iteration == 0 else config.shrunk_initial_design
    loop = BoLoop(
        space,
        seed=int(np.random.default_rng(_seed_for(config.seed, iteration, "bo")).integers(2**31)),
        initial_design=n_init,
    )
    trials = []
    base_index = iteration * config.trials_per_iteration
    for t in range(config.trials_per_iteration):
        save_state("optimizing", trials_done=base_index + t)
        point = loop.ask()
        trial = _run_trial(run, iteration, base_index + t, point, config, train_set, val_set, classes)
        loop.tell(point, trial.objective)
        run.append_trial(trial)
        trials.append(trial)
    return trials


def _run_trial(
    run: RunDir,
    iteration: int,
    index: int,
    point,
    config: LoopConfig,
    train_set,
    val_set,
    classes,
) -> TrialRecord:
    model_ref = f"models/t{index:03d}.json"
    train_config = TrainConfig(
        dropout_rate=float(point["dropout"]),
        learning_rate=float(point["learningRate"]),
        batch_size=min(int(point["batchSize"]), len(train_set)),
        epochs=config.epochs,
        seed=int(np.random.default_rng(_seed_for(config.seed, index, "train")).integers(2**31)),
    )
    try:
        model, _history = train_model(
            train_set,
            val_set,
            train_config,
            classes,
            feature_maps=config.feature_maps,
            input_side=config.input_side,
        )
    except NonFiniteLoss:
        return TrialRecord(
            index=index,
            iteration=iteration,
            point=point,
            accuracy=0.0,
            f1=0.0,
            loss=None,
            model_ref=None,
            diverged=True,
        )
    adapter = RefModelAdapter(model)
    probs = adapter.predict_proba([img for img, _ in val_set])
    metrics = compute_metrics(probs, [lbl for _, lbl in val_set], classes)
    save_checkpoint(model, run.root / model_ref)
    return TrialRecord(
        index=index,
        iteration=iteration,
        point=point,
        accuracy=metrics["accuracy"],
        f1=metrics["macroF1"],
        loss=metrics["meanLoss"],
        model_ref=model_ref,
    )


def _fmt(value, digits: int) -> str:
    if value is None:
        return "-"
    return f"{round(float(value), digits):.{digits}f}"


def render_report(report: Mapping) -> str:
    """Markdown tables of trials and final metrics, stable column order."""
    lines = [f"# Run report: {report['runId']}", ""]
    lines.append(f"Classes: {', '.join(report.get('classes', []))}")
    sizes = report.get("splitSizes")
    if sizes:
        lines.append(
            f"Split: {sizes['train']} train / {sizes['validation']} validation / "
            f"{sizes['test']} test"
        )
    lines.append("")
    for it in report.get("iterations", []):
        lines.append(f"## Iteration {it['iteration']}")
        space = HyperparamSpace.from_json_dict(it["space"])
        lines.append(f"Search space: {_space_brief(space)}")
        lines.append("")
        lines.append(
            "| Model | Batch size | Dropout rate | Learning rate | Accuracy | "
            "Macro F1 | Loss | Mean grade |"
        )
        lines.append("|---|---|---|---|---|---|---|---|")
        for row, trial in enumerate(it.get("trials", []), start=1):
            point = trial["point"]
            name = f"Model {row}" + (" (carried)" if trial.get("carried") else "")
            lines.append(
                f"| {name} | {int(point['batchSize'])} | {_fmt(point['dropout'], 3)} | "
                f"{_fmt(point['learningRate'], 5)} | {_fmt(trial['accuracy'], 4)} | "
                f"{_fmt(trial['f1'], 4)} | {_fmt(trial['loss'], 4)} | "
                f"{_fmt(trial.get('meanGrade'), 2)} |"
            )
        lines.append("")
        selected = it.get("selected")
        if selected is not None:
            grade = selected.get("meanGrade")
            suffix = f" with mean grade {_fmt(grade, 2)}" if grade is not None else ""
            row = next(
                (
                    r
                    for r, t in enumerate(it.get("trials", []), start=1)
                    if t["index"] == selected["index"]
                ),
                None,
            )
            name = f"Model {row}" if row is not None else f"trial {selected['index']}"
            lines.append(
                f"Selected: {name} (accuracy {_fmt(selected['accuracy'], 4)}{suffix})"
            )
            lines.append("")
    final = report.get("final")
    if final:
        lines.append("## Final model")
        metrics = final["testMetrics"]
        lines.append("")
        lines.append("| Accuracy | Macro F1 | Mean loss |")
        lines.append("|---|---|---|")
        lines.append(
            f"| {_fmt(metrics['accuracy'], 4)} | {_fmt(metrics['macroF1'], 4)} | "
            f"{_fmt(metrics['meanLoss'], 4)} |"
        )
        lines.append("")
    if report.get("gradeTrajectory"):
        lines.append(
            "Grade trajectory: "
            + " -> ".join(_fmt(g, 2) for g in report["gradeTrajectory"])
        )
        lines.append("")
    return "\n".join(lines)
