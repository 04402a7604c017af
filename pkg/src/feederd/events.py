"""Append-only, sequence-numbered event log.

Every reading, decision, dispense, command, and alert becomes one immutable
event with a strictly increasing seq. The log is the single source of truth:
status counters are rebuilt from it after a restart. On disk it is one JSON
object per line; a torn final line from a hard kill is dropped on open so
replay always sees a clean prefix.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    FOOD_LEVEL = "food_level"
    PRESENCE = "presence"
    DISPENSE = "dispense"
    ALERT = "alert"
    COMMAND = "command"
    CAMERA_UNAVAILABLE = "camera_unavailable"


READING_KINDS = frozenset({EventKind.FOOD_LEVEL, EventKind.PRESENCE})


@dataclass(frozen=True)
class FeederEvent:
    seq: int
    ts_ms: int
    kind: EventKind
    payload: dict

    def to_json_line(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts_ms, "kind": self.kind.value, "payload": self.payload},
            separators=(",", ":"),
            sort_keys=True,
        )

    @classmethod
    def from_json_line(cls, line: str) -> "FeederEvent":
        raw = json.loads(line)
        return cls(
            seq=int(raw["seq"]),
            ts_ms=int(raw["ts"]),
            kind=EventKind(raw["kind"]),
            payload=raw["payload"],
        )


class EventLog:
    """Thread-safe event log with optional JSONL persistence.

    retain_readings=False keeps per-tick reading events out of memory (they
    still count toward seq and the digest); long simulation runs use that to
    stay small while everything else keeps full history.
    """

    def __init__(
        self,
        path: Optional[Path] = None,
        retain_readings: bool = True,
        track_digest: bool = False,
    ):
        self._path = Path(path) if path is not None else None
        self._retain_readings = retain_readings
        self._digest = hashlib.sha256() if track_digest else None
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._events: list[FeederEvent] = []
        self._last_seq = 0
        self._counts: dict[str, int] = {k.value: 0 for k in EventKind}
        self._fh = None
        if self._path is not None:
            self._open_file()

    # ------------------------------------------------------------- persistence

    def _open_file(self) -> None:
        existing = self._recover_existing()
        for event in existing:
            self._events.append(event)
            self._counts[event.kind.value] += 1
            if self._digest is not None:
                self._digest.update((event.to_json_line() + "\n").encode())
        if existing:
            self._last_seq = existing[-1].seq
        self._fh = open(self._path, "a", encoding="utf-8")

    def _recover_existing(self) -> list[FeederEvent]:
        """Load persisted events, truncating a torn trailing line if found."""
        if not self._path.exists():
            return []
        events: list[FeederEvent] = []
        good_bytes = 0
        data = self._path.read_bytes()
        for line in data.splitlines(keepends=True):
            stripped = line.strip()
            if not stripped:
                good_bytes += len(line)
                continue
            try:
                event = FeederEvent.from_json_line(stripped.decode("utf-8"))
            except (ValueError, KeyError, UnicodeDecodeError):
                logger.warning(
                    "dropping torn tail of %s (%d bytes)", self._path, len(data) - good_bytes
                )
                with open(self._path, "rb+") as fh:
                    fh.truncate(good_bytes)
                return events
            if event.seq != (events[-1].seq if events else 0) + 1:
                raise ValueError(
                    f"event log {self._path} has a seq gap at {event.seq}"
                )
            events.append(event)
            good_bytes += len(line)
        return events

    # ------------------------------------------------------------- append/read

    def append(self, kind: EventKind, payload: dict, ts_ms: int) -> FeederEvent:
        with self._cond:
            self._last_seq += 1
            event = FeederEvent(seq=self._last_seq, ts_ms=ts_ms, kind=kind, payload=payload)
            line = event.to_json_line()
            if self._digest is not None:
                self._digest.update((line + "\n").encode())
            self._counts[kind.value] += 1
            if self._retain_readings or kind not in READING_KINDS:
                self._events.append(event)
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()
            self._cond.notify_all()
            return event

    @property
    def last_seq(self) -> int:
        with self._lock:
            return self._last_seq

    @property
    def counts(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def trace_sha256(self) -> Optional[str]:
        with self._lock:
            return self._digest.copy().hexdigest() if self._digest is not None else None

    def events_since(self, since_seq: int) -> list[FeederEvent]:
        """Retained events with seq > since_seq, in order."""
        with self._lock:
            return [e for e in self._events if e.seq > since_seq]

    def events(self) -> list[FeederEvent]:
        return self.events_since(0)

    def wait_for_seq(self, seq_after: int, timeout: float) -> bool:
        """Block until an event with seq > seq_after exists (or timeout)."""
        with self._cond:
            if self._last_seq > seq_after:
                return True
            return self._cond.wait_for(lambda: self._last_seq > seq_after, timeout=timeout)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_log_file(path: Path) -> Iterator[FeederEvent]:
    """Parse a JSONL event log, ignoring a torn trailing line."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped:
                continue
            try:
                yield FeederEvent.from_json_line(stripped)
            except (ValueError, KeyError):
                return
