"""Expert rating: rubric, blind sessions, aggregation and model selection.

A session shows the rater one item per (model, class, image): the original
image, its segmentation overlay and one explanation render. Items are
shuffled and carry no model identity; the mapping lives only in the
server-side session document. A simulated rater grades highlights against
the ground-truth mask so whole runs can execute unattended.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    AlreadyGraded,
    BadParameter,
    DimensionMismatch,
    EmptyCandidates,
    GradeOutOfRange,
    InsufficientImages,
    SessionIncomplete,
    UnknownItem,
)
from .explainers import explain_lime, highlight_pixels, render_explanation
from .imaging import (
    RgbImage,
    SegmentationMask,
    TissueClass,
    encode_image,
    overlay,
)
from .optimizer import TrialRecord
from .refmodel import ModelAdapter

RUBRIC: tuple[tuple[int, str], ...] = (
    (0, "The area of interest, highlighted in green, does not appear or is completely outside the biopsy."),
    (1, "The area of interest is almost entirely outside of the biopsy."),
    (2, "The area of interest is both inside and outside the biopsy, but without matching to the shape of the tissue."),
    (3, "The area of interest is mostly within the biopsy and matches the shape of tissues of little relevance to tumor staging"),
    (4, "The area of interest is mostly within the biopsy and matches the shape of relevant tissues, although also some less relevant ones."),
    (5, "The area of interest is completely within the biopsy and fits perfectly with relevant areas such as the carcinoma."),
)

# quantified thresholds for the rubric rows
IN_TISSUE_LOW = 0.25
IN_TISSUE_MID = 0.60
IN_TISSUE_FULL = 0.95
RELEVANT_LOW = 0.25
RELEVANT_HIGH = 0.75


def simulated_rater(highlight: np.ndarray, mask: SegmentationMask) -> int:
    """Grade a highlighted pixel set against the tissue mask.

    ``highlight`` is a boolean (H, W) map of the explanation's area of
    interest; relevance is measured against carcinoma pixels only.
    """
    highlight = np.asarray(highlight, dtype=bool)
    if highlight.shape != mask.labels.shape:
        raise DimensionMismatch(
            f"highlight {highlight.shape} vs mask {mask.labels.shape}"
        )
    total = int(highlight.sum())
    if total == 0:
        return 0
    tissue = mask.labels != TissueClass.BACKGROUND
    carcinoma = mask.labels == TissueClass.CARCINOMA
    in_tissue_count = int((highlight & tissue).sum())
    in_tissue = in_tissue_count / total
    relevant = int((highlight & carcinoma).sum()) / max(1, in_tissue_count)
    if in_tissue == 0.0:
        return 0
    if in_tissue < IN_TISSUE_LOW:
        return 1
    if in_tissue < IN_TISSUE_MID:
        return 2
    if relevant < RELEVANT_LOW:
        return 3
    if relevant >= RELEVANT_HIGH and in_tissue >= IN_TISSUE_FULL:
        return 5
    return 4


@dataclass
class RatingItem:
    """One explanation awaiting a grade.

    ``model_id``, ``mask_ref`` and ``highlight_ref`` are server-side only
    and never enter the wire payload (blind rating).
    """

    item_id: str
    original_ref: str
    segmentation_ref: str
    explanation_ref: str
    class_label: str
    model_id: str
    mask_ref: str
    highlight_ref: str
    grade: int | None = None
    comment: str | None = None
    graded_at: str | None = None

    def payload(self) -> dict:
        return {
            "itemId": self.item_id,
            "originalUrl": self.original_ref,
            "segmentationUrl": self.segmentation_ref,
            "explanationUrl": self.explanation_ref,
            "classLabel": self.class_label,
            "graded": self.grade is not None,
        }


@dataclass
class RatingSession:
    session_id: str
    items: list[RatingItem]
    created_at: str

    @property
    def status(self) -> str:
        return "complete" if all(i.grade is not None for i in self.items) else "open"

    def find(self, item_id: str) -> RatingItem:
        for item in self.items:
            if item.item_id == item_id:
                return item
        raise UnknownItem(f"no item {item_id!r} in session {self.session_id}")

    def to_json_dict(self) -> dict:
        return {
            "sessionId": self.session_id,
            "createdAt": self.created_at,
            "status": self.status,
            "items": [
                {
                    "itemId": i.item_id,
                    "originalRef": i.original_ref,
                    "segmentationRef": i.segmentation_ref,
                    "explanationRef": i.explanation_ref,
                    "classLabel": i.class_label,
                    "modelId": i.model_id,
                    "maskRef": i.mask_ref,
                    "highlightRef": i.highlight_ref,
                    "grade": i.grade,
                    "comment": i.comment,
                    "gradedAt": i.graded_at,
                }
                for i in self.items
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RatingSession":
        return cls(
            session_id=doc["sessionId"],
            created_at=doc["createdAt"],
            items=[
                RatingItem(
                    item_id=d["itemId"],
                    original_ref=d["originalRef"],
                    segmentation_ref=d["segmentationRef"],
                    explanation_ref=d["explanationRef"],
                    class_label=d["classLabel"],
                    model_id=d["modelId"],
                    mask_ref=d["maskRef"],
                    highlight_ref=d["highlightRef"],
                    grade=d.get("grade"),
                    comment=d.get("comment"),
                    graded_at=d.get("gradedAt"),
                )
                for d in doc["items"]
            ],
        )


def submit_grade(
    session: RatingSession, item_id: str, grade: int, comment: str | None = None
) -> RatingSession:
    """Record one grade; grades are immutable once accepted."""
    if isinstance(grade, bool) or not isinstance(grade, int):
        raise GradeOutOfRange(f"grade must be an integer 0..5, got {grade!r}")
    if not 0 <= grade <= 5:
        raise GradeOutOfRange(f"grade must be in 0..5, got {grade}")
    item = session.find(item_id)
    if item.grade is not None:
        raise AlreadyGraded(f"item {item_id} already graded {item.grade}")
    item.grade = grade
    item.comment = comment
    item.graded_at = datetime.now(timezone.utc).isoformat()
    return session


def build_session(
    models: Sequence[TrialRecord],
    adapters: Mapping[str, ModelAdapter],
    images_by_class: Mapping[str, Sequence[tuple[RgbImage, SegmentationMask]]],
    images_per_class: int,
    session_id: str,
    render_dir: Path,
    seed: int = 0,
    image_seed: int | None = None,
    explain_params: Mapping | None = None,
) -> RatingSession:
    """Assemble a blind session: one LIME render per (model, class, image).

    Image choice is seeded by ``image_seed`` (defaults to ``seed``) so
    successive sessions can rate the same images; item order is shuffled
    by ``seed`` so position never reveals the model.
    """
    if not models:
        raise BadParameter("need at least one model under review")
    if images_per_class < 1:
        raise BadParameter("images_per_class must be >= 1")
    params = dict(explain_params or {})
    render_dir = Path(render_dir)
    render_dir.mkdir(parents=True, exist_ok=True)
    pick_rng = np.random.default_rng((image_seed if image_seed is not None else seed, 11))
    shuffle_rng = np.random.default_rng((seed, 12))

    chosen: list[tuple[str, int, RgbImage, SegmentationMask]] = []
    for label in sorted(images_by_class):
        pool = images_by_class[label]
        if len(pool) < images_per_class:
            raise InsufficientImages(
                f"class {label} has {len(pool)} images, need {images_per_class}"
            )
        for idx in sorted(pick_rng.choice(len(pool), size=images_per_class, replace=False)):
            chosen.append((label, int(idx), pool[int(idx)][0], pool[int(idx)][1]))

    eval_refs: dict[tuple[str, int], tuple[str, str, str]] = {}
    for label, idx, image, mask in chosen:
        stem = f"eval_{label}_{idx:03d}"
        orig = render_dir / f"{stem}.png"
        seg = render_dir / f"{stem}_seg.png"
        mask_png = render_dir / f"{stem}_mask.png"
        if not orig.exists():
            orig.write_bytes(encode_image(image))
            seg.write_bytes(encode_image(overlay(image, mask, 0.6)))
            from .imaging import encode_mask

            mask_png.write_bytes(encode_mask(mask))
        eval_refs[(label, idx)] = (orig.name, seg.name, mask_png.name)

    spmap_cache: dict[tuple[str, int], object] = {}
    items: list[RatingItem] = []
    for trial in models:
        model_id = f"trial-{trial.index}"
        adapter = adapters[model_id]
        for label, idx, image, mask in chosen:
            explain_seed = _derive_seed(
                image_seed if image_seed is not None else seed, label, idx
            )
            explanation, spmap = explain_lime(
                adapter,
                image,
                seed=explain_seed,
                spmap=spmap_cache.get((label, idx)),
                **params,
            )
            spmap_cache[(label, idx)] = spmap
            render = render_explanation(image, spmap, explanation)
            hl = highlight_pixels(spmap, explanation.highlight)
            stem = f"{session_id}_t{trial.index}_{label}_{idx:03d}"
            explain_png = render_dir / f"{stem}_lime.png"
            explain_png.write_bytes(encode_image(render))
            hl_png = render_dir / f"{stem}_highlight.png"
            hl_png.write_bytes(_encode_binary(hl))
            orig_ref, seg_ref, mask_ref = eval_refs[(label, idx)]
            items.append(
                RatingItem(
                    item_id="",
                    original_ref=orig_ref,
                    segmentation_ref=seg_ref,
                    explanation_ref=explain_png.name,
                    class_label=label,
                    model_id=model_id,
                    mask_ref=mask_ref,
                    highlight_ref=hl_png.name,
                )
            )

    order = shuffle_rng.permutation(len(items))
    shuffled = [items[int(i)] for i in order]
    for pos, item in enumerate(shuffled):
        item.item_id = f"item-{pos:03d}"
    return RatingSession(
        session_id=session_id,
        items=shuffled,
        created_at=datetime.now(timezone.utc).isoformat(),
    )


def _derive_seed(seed: int, label: str, idx: int) -> int:
    import zlib

    return (int(seed) * 1000003 + zlib.crc32(label.encode()) + idx) % (2**31)


def _encode_binary(mask: np.ndarray) -> bytes:
    import io

    from PIL import Image

    arr = (mask.astype(np.uint8)) * 255
    buf = io.BytesIO()
    Image.fromarray(np.stack([arr] * 3, axis=-1), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_binary(data: bytes) -> np.ndarray:
    import io

    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr[..., 0] > 127


def aggregate_grades(session: RatingSession) -> dict:
    """Per-model mean grade with a per-class breakdown."""
    if session.status != "complete":
        raise SessionIncomplete(f"session {session.session_id} has ungraded items")
    by_model: dict[str, list[int]] = {}
    by_model_class: dict[str, dict[str, list[int]]] = {}
    for item in session.items:
        by_model.setdefault(item.model_id, []).append(item.grade)
        by_model_class.setdefault(item.model_id, {}).setdefault(
            item.class_label, []
        ).append(item.grade)
    return {
        "models": {m: float(np.mean(g)) for m, g in sorted(by_model.items())},
        "byClass": {
            m: {c: float(np.mean(g)) for c, g in sorted(cls.items())}
            for m, cls in sorted(by_model_class.items())
        },
    }


def select_best(trials: Sequence[TrialRecord]) -> TrialRecord:
    """Max mean grade; ties by accuracy, then lower loss, then earlier index."""
    if not trials:
        raise EmptyCandidates("no candidates to select from")
    for t in trials:
        if t.mean_grade is None:
            raise BadParameter(f"trial {t.index} has no mean grade")
    import math

    def key(t: TrialRecord):
        loss = t.loss if t.loss is not None else math.inf
        return (-t.mean_grade, -t.accuracy, loss, t.index)

    return sorted(trials, key=key)[0]
