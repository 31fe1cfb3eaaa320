"""Run-directory layout and persistence shared by the loop and the service.

One optimization run owns one directory: config.json, trials.jsonl,
sessions/NNN.json, grades.jsonl, models/*.json, renders/*.png, state.json,
report.json and report.md. All writes go through write-temp-then-rename so
a service process and the optimizing process can share the directory, and
grade submissions serialize through a per-store lock.
"""
from __future__ import annotations

import json
import os
import threading
from pathlib import Path

from .optimizer import TrialRecord
from .rating import RatingSession, submit_grade


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    @property
    def run_id(self) -> str:
        return self.root.name

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def state_path(self) -> Path:
        return self.root / "state.json"

    @property
    def trials_path(self) -> Path:
        return self.root / "trials.jsonl"

    @property
    def grades_path(self) -> Path:
        return self.root / "grades.jsonl"

    @property
    def report_json_path(self) -> Path:
        return self.root / "report.json"

    @property
    def report_md_path(self) -> Path:
        return self.root / "report.md"

    @property
    def sessions_dir(self) -> Path:
        return self.root / "sessions"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def renders_dir(self) -> Path:
        return self.root / "renders"

    def init(self) -> "RunDir":
        for d in (self.root, self.sessions_dir, self.models_dir, self.renders_dir):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def atomic_write(self, path: Path, text: str) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)

    def write_json(self, path: Path, doc) -> None:
        self.atomic_write(path, json.dumps(doc, indent=1))

    def append_jsonl(self, path: Path, doc) -> None:
        with path.open("a") as fh:
            fh.write(json.dumps(doc) + "\n")

    # --- state -----------------------------------------------------------
    def save_state(self, state: dict) -> None:
        self.write_json(self.state_path, state)

    def load_state(self) -> dict | None:
        if not self.state_path.exists():
            return None
        return json.loads(self.state_path.read_text())

    # --- trials ----------------------------------------------------------
    def append_trial(self, trial: TrialRecord) -> None:
        self.append_jsonl(self.trials_path, trial.to_json_dict())

    def load_trials(self) -> list[TrialRecord]:
        if not self.trials_path.exists():
            return []
        out = []
        for line in self.trials_path.read_text().splitlines():
            if line.strip():
                out.append(TrialRecord.from_json_dict(json.loads(line)))
        return out

    # --- sessions --------------------------------------------------------
    def session_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.json"

    def save_session(self, session: RatingSession) -> None:
        self.write_json(self.session_path(session.session_id), session.to_json_dict())

    def load_session(self, session_id: str) -> RatingSession | None:
        path = self.session_path(session_id)
        if not path.exists():
            return None
        return RatingSession.from_json_dict(json.loads(path.read_text()))

    def session_ids(self) -> list[str]:
        if not self.sessions_dir.exists():
            return []
        return sorted(p.stem for p in self.sessions_dir.glob("*.json"))

    def open_session_ids(self) -> list[str]:
        out = []
        for sid in self.session_ids():
            session = self.load_session(sid)
            if session is not None and session.status == "open":
                out.append(sid)
        return out

    def record_grade(
        self, session_id: str, item_id: str, grade: int, comment: str | None = None
    ) -> RatingSession:
        """Submit one grade with first-writer-wins semantics and persist it."""
        from .errors import UnknownItem

        with self._lock:
            session = self.load_session(session_id)
            if session is None:
                raise UnknownItem(f"no session {session_id!r}")
            submit_grade(session, item_id, grade, comment)
            self.save_session(session)
            item = session.find(item_id)
            self.append_jsonl(
                self.grades_path,
                {
                    "sessionId": session_id,
                    "itemId": item_id,
                    "grade": grade,
                    "comment": comment,
                    "at": item.graded_at,
                },
            )
        return session
