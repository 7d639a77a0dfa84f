"""
Pipeline event log: one JSON object per line.

Every record carries ``iteration``, ``stage`` and ``event`` plus an event
specific payload. Records are kept in memory as well so callers can assert on
them after a run.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from src.utils.logger import CustomJSONEncoder, get_logger

logger = get_logger(__name__)


class EventLog:
    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        self._handle = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("w", encoding="utf-8")

    def record(self, event: str, iteration: int, stage: str, **payload) -> Dict[str, Any]:
        entry = {"iteration": int(iteration), "stage": stage, "event": event, **payload}
        self.records.append(entry)
        if self._handle is not None:
            self._handle.write(json.dumps(entry, sort_keys=True, cls=CustomJSONEncoder) + "\n")
            self._handle.flush()
        log_fields = {("event_kind" if k == "event" else k): v for k, v in entry.items()}
        logger.debug("Pipeline event", **log_fields)
        return entry

    def of_kind(self, event: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["event"] == event]

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def read_events(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
