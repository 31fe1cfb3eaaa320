import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xailoop.errors import (
    AlreadyGraded,
    BadParameter,
    DimensionMismatch,
    EmptyCandidates,
    GradeOutOfRange,
    InsufficientImages,
    SessionIncomplete,
    UnknownItem,
)
from xailoop.imaging import SegmentationMask, TissueClass
from xailoop.optimizer import TrialRecord
from xailoop.rating import (
    RUBRIC,
    RatingItem,
    RatingSession,
    aggregate_grades,
    build_session,
    select_best,
    simulated_rater,
    submit_grade,
)


def make_mask(side, fill=TissueClass.BACKGROUND):
    return SegmentationMask(np.full((side, side), int(fill), dtype=np.uint8))


def make_item(i, model="m0", grade=None, label="Basal"):
    return RatingItem(
        item_id=f"item-{i:03d}",
        original_ref="o.png",
        segmentation_ref="s.png",
        explanation_ref="e.png",
        class_label=label,
        model_id=model,
        mask_ref="m.png",
        highlight_ref="h.png",
        grade=grade,
    )


def make_session(items):
    return RatingSession(session_id="001", items=items, created_at="t0")


class TestRubric:
    def test_six_rows_zero_to_five(self):
        grades = [g for g, _ in RUBRIC]
        assert grades == [0, 1, 2, 3, 4, 5]
        assert all(isinstance(c, str) and c for _, c in RUBRIC)


class TestSimulatedRater:
    def test_empty_highlight_grades_zero(self):
        mask = make_mask(16, TissueClass.CARCINOMA)
        assert simulated_rater(np.zeros((16, 16), dtype=bool), mask) == 0

    def test_fully_outside_tissue_grades_zero(self):
        mask = make_mask(16, TissueClass.BACKGROUND)
        highlight = np.zeros((16, 16), dtype=bool)
        highlight[2:6, 2:6] = True
        assert simulated_rater(highlight, mask) == 0

    def test_pure_carcinoma_highlight_grades_five(self):
        labels = np.zeros((16, 16), dtype=np.uint8)
        labels[4:12, 4:12] = int(TissueClass.CARCINOMA)
        mask = SegmentationMask(labels)
        highlight = np.zeros((16, 16), dtype=bool)
        highlight[5:10, 5:10] = True
        assert simulated_rater(highlight, mask) == 5

    def test_half_background_half_stroma_grades_two(self):
        labels = np.zeros((16, 16), dtype=np.uint8)
        labels[:8] = int(TissueClass.STROMA)
        mask = SegmentationMask(labels)
        highlight = np.zeros((16, 16), dtype=bool)
        highlight[6:10, :] = True  # two rows stroma, two rows background
        assert simulated_rater(highlight, mask) == 2

    def test_in_tissue_but_irrelevant_grades_three(self):
        mask = make_mask(16, TissueClass.STROMA)
        highlight = np.zeros((16, 16), dtype=bool)
        highlight[2:10, 2:10] = True
        assert simulated_rater(highlight, mask) == 3

    def test_mostly_relevant_grades_four(self):
        labels = np.full((16, 16), int(TissueClass.CARCINOMA), dtype=np.uint8)
        labels[:, :8] = int(TissueClass.STROMA)
        mask = SegmentationMask(labels)
        highlight = np.ones((16, 16), dtype=bool)  # 50% carcinoma, all tissue
        assert simulated_rater(highlight, mask) == 4

    def test_exactly_75_percent_carcinoma_in_full_tissue_grades_five(self):
        labels = np.full((16, 16), int(TissueClass.CARCINOMA), dtype=np.uint8)
        labels[:, :4] = int(TissueClass.STROMA)
        mask = SegmentationMask(labels)
        assert simulated_rater(np.ones((16, 16), dtype=bool), mask) == 5

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            simulated_rater(np.zeros((4, 4), dtype=bool), make_mask(8))

    @given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
    @settings(max_examples=80, deadline=None)
    def test_monotone_in_carcinoma_overlap(self, n_carc, n_stroma, n_back):
        # grid of highlight compositions: with in-tissue >= 0.6 fixed by
        # construction, more carcinoma never lowers the grade
        total = n_carc + n_stroma + n_back
        if total == 0 or total > 400:
            return
        labels = np.zeros((20, 20), dtype=np.uint8)
        flat = labels.ravel()
        flat[:n_carc] = int(TissueClass.CARCINOMA)
        flat[n_carc : n_carc + n_stroma] = int(TissueClass.STROMA)
        mask = SegmentationMask(flat.reshape(20, 20))
        highlight = np.zeros(400, dtype=bool)
        highlight[:total] = True
        in_tissue = (n_carc + n_stroma) / total
        if in_tissue < 0.6:
            return
        grade = simulated_rater(highlight.reshape(20, 20), mask)
        if n_stroma > 0:
            flat2 = flat.copy()
            flat2[n_carc] = int(TissueClass.CARCINOMA)  # one more carcinoma pixel
            grade_up = simulated_rater(
                highlight.reshape(20, 20), SegmentationMask(flat2.reshape(20, 20))
            )
            assert grade_up >= grade

    def test_total_function_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            labels = rng.integers(0, 6, (12, 12)).astype(np.uint8)
            highlight = rng.random((12, 12)) < 0.3
            assert 0 <= simulated_rater(highlight, SegmentationMask(labels)) <= 5


class TestSubmitGrade:
    def test_grade_seven_rejected(self):
        session = make_session([make_item(0)])
        with pytest.raises(GradeOutOfRange):
            submit_grade(session, "item-000", 7)

    def test_non_integer_grade_rejected(self):
        session = make_session([make_item(0)])
        with pytest.raises(GradeOutOfRange):
            submit_grade(session, "item-000", 3.5)
        with pytest.raises(GradeOutOfRange):
            submit_grade(session, "item-000", True)

    def test_grading_only_item_completes_session(self):
        session = make_session([make_item(0)])
        assert session.status == "open"
        submit_grade(session, "item-000", 4)
        assert session.status == "complete"

    def test_resubmission_rejected_and_original_kept(self):
        session = make_session([make_item(0)])
        submit_grade(session, "item-000", 2, comment="first")
        with pytest.raises(AlreadyGraded):
            submit_grade(session, "item-000", 5)
        item = session.find("item-000")
        assert item.grade == 2 and item.comment == "first"

    def test_unknown_item(self):
        session = make_session([make_item(0)])
        with pytest.raises(UnknownItem):
            submit_grade(session, "nope", 3)

    def test_timestamp_recorded(self):
        session = make_session([make_item(0)])
        submit_grade(session, "item-000", 1)
        assert session.find("item-000").graded_at is not None


class TestSessionSerialization:
    def test_round_trip(self):
        session = make_session([make_item(0, grade=3), make_item(1)])
        back = RatingSession.from_json_dict(session.to_json_dict())
        assert back.session_id == session.session_id
        assert [i.item_id for i in back.items] == ["item-000", "item-001"]
        assert back.items[0].grade == 3 and back.items[1].grade is None

    def test_payload_is_blind(self):
        item = make_item(0, model="secret-model")
        payload = item.payload()
        text = json.dumps(payload)
        assert "secret-model" not in text
        assert "modelId" not in payload
        assert set(payload) == {
            "itemId",
            "originalUrl",
            "segmentationUrl",
            "explanationUrl",
            "classLabel",
            "graded",
        }


class FakeAdapter:
    """Deterministic stand-in for a trained model."""

    def __init__(self, bias):
        self.classes = ("Basal", "LuminalA", "LuminalB")
        self.grad_cam_tap = None
        self._bias = bias

    def predict_proba(self, images):
        rows = []
        for image in images:
            m = float(image.pixels.mean()) / 255.0
            logits = np.array([m, self._bias, 1.0 - m])
            e = np.exp(logits - logits.max())
            rows.append(e / e.sum())
        return np.array(rows)


def class_images(small_split):
    by_class = {}
    for s in small_split.test:
        by_class.setdefault(s.label, []).append((s.image, s.mask))
    return by_class


def make_trials(n):
    return [
        TrialRecord(
            index=i,
            iteration=0,
            point={"dropout": 0.2, "learningRate": 1e-3, "batchSize": 4},
            accuracy=0.4,
            f1=0.3,
            loss=1.0,
            model_ref=f"models/t{i:03d}.json",
        )
        for i in range(n)
    ]


class TestBuildSession:
    def test_three_by_three_by_three_gives_27_items(self, small_split, tmp_path):
        trials = make_trials(3)
        adapters = {f"trial-{t.index}": FakeAdapter(0.1 * t.index) for t in trials}
        session = build_session(
            trials,
            adapters,
            class_images(small_split),
            images_per_class=3,
            session_id="001",
            render_dir=tmp_path,
            seed=0,
            explain_params={"regions": 8, "n_samples": 30},
        )
        assert len(session.items) == 27

    def test_minimal_session_single_item(self, small_split, tmp_path):
        trials = make_trials(1)
        adapters = {"trial-0": FakeAdapter(0.0)}
        images = {"Basal": class_images(small_split)["Basal"][:1]}
        session = build_session(
            trials,
            adapters,
            images,
            images_per_class=1,
            session_id="002",
            render_dir=tmp_path,
            seed=0,
            explain_params={"regions": 6, "n_samples": 20},
        )
        assert len(session.items) == 1

    def test_same_seed_same_composition(self, small_split, tmp_path):
        trials = make_trials(2)
        adapters = {f"trial-{t.index}": FakeAdapter(0.2) for t in trials}
        kwargs = dict(
            models=trials,
            adapters=adapters,
            images_by_class=class_images(small_split),
            images_per_class=2,
            render_dir=tmp_path,
            seed=5,
            explain_params={"regions": 6, "n_samples": 20},
        )
        a = build_session(session_id="a", **kwargs)
        b = build_session(session_id="b", **kwargs)
        assert [i.class_label for i in a.items] == [i.class_label for i in b.items]
        assert [i.original_ref for i in a.items] == [i.original_ref for i in b.items]
        assert [i.model_id for i in a.items] == [i.model_id for i in b.items]

    def test_insufficient_images(self, small_split, tmp_path):
        trials = make_trials(1)
        adapters = {"trial-0": FakeAdapter(0.0)}
        with pytest.raises(InsufficientImages):
            build_session(
                trials,
                adapters,
                class_images(small_split),
                images_per_class=99,
                session_id="003",
                render_dir=tmp_path,
                seed=0,
            )

    def test_renders_written_and_item_order_shuffled(self, small_split, tmp_path):
        trials = make_trials(3)
        adapters = {f"trial-{t.index}": FakeAdapter(0.1 * t.index) for t in trials}
        session = build_session(
            trials,
            adapters,
            class_images(small_split),
            images_per_class=2,
            session_id="004",
            render_dir=tmp_path,
            seed=1,
            explain_params={"regions": 6, "n_samples": 20},
        )
        for item in session.items:
            assert (tmp_path / item.explanation_ref).exists()
            assert (tmp_path / item.highlight_ref).exists()
        models_in_order = [i.model_id for i in session.items]
        assert models_in_order != sorted(models_in_order)


class TestAggregateAndSelect:
    def test_recorded_grading_outcome(self):
        # one item per model with grades 3, 1, 1
        items = [
            make_item(0, model="m1", grade=3),
            make_item(1, model="m2", grade=1),
            make_item(2, model="m5", grade=1),
        ]
        session = make_session(items)
        agg = aggregate_grades(session)
        assert agg["models"] == {"m1": 3.0, "m2": 1.0, "m5": 1.0}

    def test_constant_grades(self):
        items = [make_item(i, model=f"m{i % 2}", grade=4) for i in range(6)]
        agg = aggregate_grades(make_session(items))
        assert set(agg["models"].values()) == {4.0}

    def test_hand_built_table(self):
        grades = {("m0", "Basal"): [5, 3], ("m0", "LuminalA"): [2], ("m1", "Basal"): [1, 1], ("m1", "LuminalA"): [4]}
        items = []
        i = 0
        for (model, label), gs in grades.items():
            for g in gs:
                items.append(make_item(i, model=model, grade=g, label=label))
                i += 1
        agg = aggregate_grades(make_session(items))
        assert agg["models"]["m0"] == pytest.approx((5 + 3 + 2) / 3)
        assert agg["models"]["m1"] == pytest.approx(2.0)
        assert agg["byClass"]["m0"]["Basal"] == pytest.approx(4.0)
        assert agg["byClass"]["m1"]["LuminalA"] == pytest.approx(4.0)

    def test_incomplete_session_rejected(self):
        session = make_session([make_item(0)])
        with pytest.raises(SessionIncomplete):
            aggregate_grades(session)

    def test_select_best_recorded_outcome(self):
        trials = make_trials(3)
        trials[0].mean_grade = 3.0
        trials[1].mean_grade = 1.0
        trials[2].mean_grade = 1.0
        assert select_best(trials).index == 0

    def test_select_best_tie_by_accuracy(self):
        trials = make_trials(2)
        trials[0].mean_grade = trials[1].mean_grade = 2.0
        trials[0].accuracy = 0.36
        trials[1].accuracy = 0.38
        assert select_best(trials).index == 1

    def test_select_best_tie_by_loss(self):
        trials = make_trials(2)
        for t in trials:
            t.mean_grade, t.accuracy = 2.0, 0.38
        trials[0].loss = 0.9
        trials[1].loss = 1.1
        assert select_best(trials).index == 0

    def test_select_best_empty(self):
        with pytest.raises(EmptyCandidates):
            select_best([])

    def test_select_best_requires_grades(self):
        with pytest.raises(BadParameter):
            select_best(make_trials(1))
