"""Clock sources used for timestamping mergelogs and spans.

Two implementations share one interface: a wall clock for realistic runs
and a logical clock that advances by a fixed quantum per reading, which
keeps deterministic simulations reproducible down to the timestamp.
"""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime:
        """Return the current instant as an aware UTC datetime."""
        ...


class WallClock:
    """System time in UTC."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class LogicalClock:
    """Deterministic clock that ticks forward on every reading.

    Each ``now()`` call advances time by ``quantum`` so that consecutive
    readings are strictly increasing; ``advance()`` models explicit waits
    (for example a simulated kubelet startup delay).  Thread-safe.
    """

    #: Arbitrary fixed origin so deterministic runs produce identical stamps.
    DEFAULT_START = datetime(2024, 1, 1, tzinfo=timezone.utc)

    def __init__(self, start: datetime | None = None, quantum: timedelta = timedelta(microseconds=100)):
        self._current = start if start is not None else self.DEFAULT_START
        self._quantum = quantum
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            self._current += self._quantum
            return self._current

    def advance(self, delta: timedelta) -> None:
        with self._lock:
            self._current += delta

    def advance_seconds(self, seconds: float) -> None:
        """Drop-in replacement for time.sleep in simulated components."""
        self.advance(timedelta(seconds=seconds))
