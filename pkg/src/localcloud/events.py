"""Append-only event log shared by agents and the harness (JSON lines)."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional


@dataclass(frozen=True)
class Event:
    seq: int
    at_ns: int
    actor: str
    step: str
    endpoint: str = ""
    outcome: str = "ok"
    detail: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class EventLog:
    """Thread-safe log with strictly increasing timestamps.

    Timestamps come from ``time.time_ns`` but are nudged forward when two
    events land on the same tick, so ordering by time and by sequence agree.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self._events: list[Event] = []
        self._lock = threading.Lock()
        self._last = 0

    def emit(self, actor: str, step: str, endpoint: str = "", outcome: str = "ok", **detail: Any) -> Event:
        with self._lock:
            now = max(time.time_ns(), self._last + 1)
            self._last = now
            event = Event(len(self._events), now, actor, step, endpoint, outcome, detail)
            self._events.append(event)
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(event.to_json() + "\n")
        return event

    def __iter__(self) -> Iterator[Event]:
        with self._lock:
            return iter(list(self._events))

    def __len__(self) -> int:
        return len(self._events)

    def events(self, actor: Optional[str] = None, step: Optional[str] = None) -> list[Event]:
        return [e for e in self if (actor is None or e.actor == actor) and (step is None or e.step == step)]

    def index_of(self, step: str, actor: Optional[str] = None) -> int:
        for e in self:
            if e.step == step and (actor is None or e.actor == actor):
                return e.seq
        return -1
