"""Flat-file scenario store: one JSON document per scenario.

Writes go through a temp file and :func:`os.replace` so a crash mid-write
never leaves a torn document, and a lock serializes read-modify-write
sequences from concurrent service handlers.
"""

from __future__ import annotations

import json
import os
import re
import threading
from datetime import datetime, timezone
from pathlib import Path

from .serialize import Scenario, ScenarioError, scenario_from_doc, scenario_to_doc

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_-]*$")


class UnknownScenarioError(KeyError):
    def __init__(self, scenario_id: str):
        super().__init__(scenario_id)
        self.scenario_id = scenario_id

    def __str__(self):
        return f"no scenario {self.scenario_id!r}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


class ScenarioStore:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, scenario_id: str) -> Path:
        if not _ID_RE.match(scenario_id):
            raise ScenarioError(f"invalid scenario id {scenario_id!r}")
        return self.root / f"{scenario_id}.json"

    def _write(self, scenario: Scenario) -> None:
        path = self._path(scenario.id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(scenario_to_doc(scenario), indent=2) + "\n")
        os.replace(tmp, path)

    def create(self, scenario: Scenario) -> Scenario:
        with self._lock:
            path = self._path(scenario.id)
            if path.exists():
                raise ScenarioError(f"scenario {scenario.id!r} already exists")
            stamp = _now()
            scenario = scenario.with_fields(created=stamp, modified=stamp)
            self._write(scenario)
            return scenario

    def update(self, scenario: Scenario) -> Scenario:
        with self._lock:
            path = self._path(scenario.id)
            if not path.exists():
                raise UnknownScenarioError(scenario.id)
            created = scenario_from_doc(json.loads(path.read_text())).created
            scenario = scenario.with_fields(created=created, modified=_now())
            self._write(scenario)
            return scenario

    def get(self, scenario_id: str) -> Scenario:
        with self._lock:
            path = self._path(scenario_id)
            if not path.exists():
                raise UnknownScenarioError(scenario_id)
            return scenario_from_doc(json.loads(path.read_text()))

    def delete(self, scenario_id: str) -> None:
        with self._lock:
            path = self._path(scenario_id)
            if not path.exists():
                raise UnknownScenarioError(scenario_id)
            path.unlink()

    def list_ids(self) -> list[str]:
        with self._lock:
            return sorted(p.stem for p in self.root.glob("*.json"))
