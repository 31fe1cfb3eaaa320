import json

import pytest
from fastapi.testclient import TestClient

from xailoop.harness import LoopConfig, SynthDatasetConfig, run_hitl_loop, synthesize_dataset
from xailoop.errors import RaterTimeout
from xailoop.runstore import RunDir
from xailoop.service import create_app

THREE = ("Basal", "LuminalA", "LuminalB")


@pytest.fixture(scope="module")
def awaiting_run(tmp_path_factory):
    """A run checkpointed at awaitingGrades with one open session."""
    out = tmp_path_factory.mktemp("svc") / "run"
    corpus = synthesize_dataset(
        SynthDatasetConfig(active_classes=THREE, per_class_count=10, image_side=96, seed=8)
    )
    config = LoopConfig(
        seed=6,
        iterations=1,
        trials_per_iteration=3,
        top_n=2,
        images_per_class=2,
        epochs=4,
        rater_kind="interactive",
        rater_timeout=0.2,
        poll_interval=0.05,
        explain={"regions": 12, "n_samples": 40},
    )
    with pytest.raises(RaterTimeout):
        run_hitl_loop(corpus, list(THREE), config, out)
    return out


@pytest.fixture()
def client(awaiting_run):
    return TestClient(create_app(awaiting_run))


class TestEndpoints:
    def test_rubric_rows(self, client):
        rows = client.get("/api/v1/rubric").json()
        assert [r["grade"] for r in rows] == [0, 1, 2, 3, 4, 5]
        assert all(r["criterion"] for r in rows)

    def test_open_sessions(self, client):
        assert client.get("/api/v1/sessions/open").json() == ["001"]

    def test_session_document(self, client):
        doc = client.get("/api/v1/sessions/001").json()
        assert doc["sessionId"] == "001"
        assert doc["status"] == "open"
        assert len(doc["items"]) == 2 * 3 * 2
        assert len(doc["rubric"]) == 6

    def test_unknown_session_404(self, client):
        r = client.get("/api/v1/sessions/zzz")
        assert r.status_code == 404
        assert r.json()["error"] == "UnknownSession"

    def test_item_payload(self, client):
        doc = client.get("/api/v1/sessions/001").json()
        item_id = doc["items"][0]["itemId"]
        item = client.get(f"/api/v1/sessions/001/items/{item_id}").json()
        assert set(item) == {
            "itemId",
            "originalUrl",
            "segmentationUrl",
            "explanationUrl",
            "classLabel",
            "graded",
        }

    def test_no_model_identity_anywhere(self, client):
        for path in ("/api/v1/rubric", "/api/v1/sessions/open", "/api/v1/sessions/001"):
            text = client.get(path).text
            assert "modelId" not in text
            assert "trial-" not in text

    def test_images_served(self, client):
        doc = client.get("/api/v1/sessions/001").json()
        url = doc["items"][0]["originalUrl"]
        r = client.get(url)
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"

    def test_image_traversal_blocked(self, client):
        assert client.get("/images/../config.json").status_code == 404
        assert client.get("/images/renders/missing.png").status_code == 404

    def test_run_state(self, client, awaiting_run):
        run_id = awaiting_run.name
        state = client.get(f"/api/v1/runs/{run_id}").json()
        assert state["state"] == "awaitingGrades"
        assert state["sessionId"] == "001"
        assert client.get("/api/v1/runs/other").status_code == 404


class TestGrading:
    def test_grade_out_of_range_422(self, client):
        doc = client.get("/api/v1/sessions/001").json()
        item_id = next(i["itemId"] for i in doc["items"] if not i["graded"])
        r = client.post(f"/api/v1/sessions/001/items/{item_id}/grade", json={"grade": 7})
        assert r.status_code == 422
        assert r.json()["error"] == "GradeOutOfRange"

    def test_unknown_item_404(self, client):
        r = client.post("/api/v1/sessions/001/items/nope/grade", json={"grade": 3})
        assert r.status_code == 404

    def test_grade_then_conflict_on_retry(self, client):
        doc = client.get("/api/v1/sessions/001").json()
        item_id = next(i["itemId"] for i in doc["items"] if not i["graded"])
        first = client.post(
            f"/api/v1/sessions/001/items/{item_id}/grade",
            json={"grade": 4, "comment": "solid"},
        )
        assert first.status_code == 200
        retry = client.post(f"/api/v1/sessions/001/items/{item_id}/grade", json={"grade": 2})
        assert retry.status_code == 409
        assert retry.json()["error"] == "AlreadyGraded"
        item = client.get(f"/api/v1/sessions/001/items/{item_id}").json()
        assert item["graded"] is True

    def test_restart_preserves_grades(self, awaiting_run):
        # a brand-new app instance over the same directory sees prior grades
        app = create_app(awaiting_run)
        client = TestClient(app)
        doc = client.get("/api/v1/sessions/001").json()
        assert any(i["graded"] for i in doc["items"])
        state = client.get(f"/api/v1/runs/{awaiting_run.name}").json()
        assert state["state"] == "awaitingGrades"

    def test_completing_session_flips_status(self, awaiting_run):
        client = TestClient(create_app(awaiting_run))
        doc = client.get("/api/v1/sessions/001").json()
        for item in doc["items"]:
            if not item["graded"]:
                r = client.post(
                    f"/api/v1/sessions/001/items/{item['itemId']}/grade", json={"grade": 3}
                )
                assert r.status_code == 200
        assert client.get("/api/v1/sessions/001").json()["status"] == "complete"
        assert client.get("/api/v1/sessions/open").json() == []
        # grades audit log records every submission
        run = RunDir(awaiting_run)
        lines = [json.loads(l) for l in run.grades_path.read_text().splitlines()]
        assert len(lines) == len(doc["items"])
