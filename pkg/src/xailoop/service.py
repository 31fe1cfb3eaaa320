"""HTTP service hosting rating sessions for the interactive rater.

The service is read-mostly over a single run directory: sessions and run
state are JSON files written atomically by the optimization loop, grades
are the only mutation and serialize through the run store. Error bodies
are ``{"error": code, "detail": text}`` with conventional status codes.
"""
from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .errors import AlreadyGraded, GradeOutOfRange, UnknownItem, XailoopError
from .rating import RUBRIC, RatingSession
from .runstore import RunDir


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "detail": detail})


def _api_session(session: RatingSession) -> dict:
    return {
        "sessionId": session.session_id,
        "status": session.status,
        "createdAt": session.created_at,
        "rubric": [{"grade": g, "criterion": c} for g, c in RUBRIC],
        "items": [_api_item(session, item.item_id) for item in session.items],
    }


def _api_item(session: RatingSession, item_id: str) -> dict:
    item = session.find(item_id)
    return {
        "itemId": item.item_id,
        "originalUrl": f"/images/renders/{item.original_ref}",
        "segmentationUrl": f"/images/renders/{item.segmentation_ref}",
        "explanationUrl": f"/images/renders/{item.explanation_ref}",
        "classLabel": item.class_label,
        "graded": item.grade is not None,
    }


def create_app(run_dir: str | Path, ui_dir: str | Path | None = None) -> FastAPI:
    run = RunDir(run_dir)
    app = FastAPI(title="rating service", version="1")

    @app.exception_handler(XailoopError)
    async def _domain_error(_request: Request, exc: XailoopError):
        if isinstance(exc, GradeOutOfRange):
            return _error(422, "GradeOutOfRange", str(exc))
        if isinstance(exc, AlreadyGraded):
            return _error(409, "AlreadyGraded", str(exc))
        if isinstance(exc, UnknownItem):
            return _error(404, "UnknownItem", str(exc))
        return _error(500, type(exc).__name__, str(exc))

    @app.get("/api/v1/rubric")
    def rubric():
        return [{"grade": g, "criterion": c} for g, c in RUBRIC]

    @app.get("/api/v1/sessions/open")
    def open_sessions():
        return run.open_session_ids()

    @app.get("/api/v1/sessions/{session_id}")
    def get_session(session_id: str):
        session = run.load_session(session_id)
        if session is None:
            return _error(404, "UnknownSession", f"no session {session_id!r}")
        return _api_session(session)

    @app.get("/api/v1/sessions/{session_id}/items/{item_id}")
    def get_item(session_id: str, item_id: str):
        session = run.load_session(session_id)
        if session is None:
            return _error(404, "UnknownSession", f"no session {session_id!r}")
        return _api_item(session, item_id)

    @app.post("/api/v1/sessions/{session_id}/items/{item_id}/grade")
    async def post_grade(session_id: str, item_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(422, "BadBody", "body must be JSON")
        if not isinstance(body, dict) or "grade" not in body:
            return _error(422, "GradeOutOfRange", 'body must carry {"grade": 0..5}')
        session = run.load_session(session_id)
        if session is None:
            return _error(404, "UnknownSession", f"no session {session_id!r}")
        run.record_grade(session_id, item_id, body["grade"], body.get("comment"))
        return {"ok": True, "itemId": item_id}

    @app.get("/api/v1/runs/{run_id}")
    def run_state(run_id: str):
        state = run.load_state()
        if state is None or state.get("runId") != run_id:
            return _error(404, "UnknownRun", f"no run {run_id!r}")
        return state

    @app.get("/images/{path:path}")
    def image(path: str):
        target = (run.root / path).resolve()
        if run.root.resolve() not in target.parents:
            return _error(404, "UnknownImage", "outside the run directory")
        if not target.exists() or target.suffix != ".png":
            return _error(404, "UnknownImage", f"no image {path!r}")
        return FileResponse(target, media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def start_in_thread(
    run_dir: str | Path, port: int, ui_dir: str | Path | None = None
) -> tuple[threading.Thread, "uvicorn.Server"]:
    """Serve in a daemon thread; stop with ``server.should_exit = True``."""
    import uvicorn

    app = create_app(run_dir, ui_dir)
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    return thread, server


def serve_blocking(run_dir: str | Path, port: int, ui_dir: str | Path | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(run_dir, ui_dir), host="127.0.0.1", port=port, log_level="info")
