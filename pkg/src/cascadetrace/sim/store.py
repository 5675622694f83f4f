"""Versioned object store with optimistic concurrency and watches.

The store is the simulated control plane's single source of truth.
Every write bumps the object's resource version; updates must present
the version they read, so concurrent writers lose with Conflict and
retry against fresh state.  Watchers receive every committed event for
their kinds, in commit order, so per-object delivery is ordered by
resource version.
"""

from __future__ import annotations

import copy
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

from ..errors import CascadeTraceError

KINDS = ("Deployment", "ReplicaSet", "Pod", "Service", "Endpoints")

ADDED = "Added"
MODIFIED = "Modified"
DELETED = "Deleted"


class Conflict(CascadeTraceError):
    """The write raced another writer (stale resource version), or the
    object already exists."""


class NotFound(CascadeTraceError):
    """No such object."""


@dataclass
class SimObject:
    kind: str
    name: str
    spec: dict = field(default_factory=dict)
    annotations: dict[str, str] = field(default_factory=dict)
    resource_version: int = 0


@dataclass(frozen=True)
class WatchEvent:
    type: str  # Added | Modified | Deleted
    object: SimObject


class Watch:
    """Buffered subscription to one or more kinds."""

    def __init__(self, kinds: tuple[str, ...]):
        self.kinds = kinds
        self._buffer: deque[WatchEvent] = deque()
        self._cond = threading.Condition()

    def _deliver(self, event: WatchEvent) -> None:
        with self._cond:
            self._buffer.append(event)
            self._cond.notify()

    def get(self, block: bool = False, timeout: float | None = None) -> WatchEvent | None:
        with self._cond:
            if not self._buffer and block:
                self._cond.wait(timeout)
            return self._buffer.popleft() if self._buffer else None

    def pending(self) -> int:
        with self._cond:
            return len(self._buffer)


class ObjectStore:
    def __init__(self) -> None:
        self._objects: dict[tuple[str, str], SimObject] = {}
        self._watches: list[Watch] = []
        self._audits: list[Callable[[SimObject], None]] = []
        self._lock = threading.Lock()

    # -- reads ----------------------------------------------------------

    def get(self, kind: str, name: str) -> SimObject:
        obj = self.try_get(kind, name)
        if obj is None:
            raise NotFound(f"{kind}/{name}")
        return obj

    def try_get(self, kind: str, name: str) -> SimObject | None:
        with self._lock:
            obj = self._objects.get((kind, name))
            return copy.deepcopy(obj) if obj is not None else None

    def list(self, kind: str) -> list[SimObject]:
        """All objects of ``kind`` as snapshots, in name order."""
        with self._lock:
            objs = [o for (k, _), o in self._objects.items() if k == kind]
            return [copy.deepcopy(o) for o in sorted(objs, key=lambda o: o.name)]

    def __iter__(self) -> Iterator[SimObject]:
        with self._lock:
            return iter([copy.deepcopy(o) for o in self._objects.values()])

    # -- writes ---------------------------------------------------------

    def create(self, obj: SimObject) -> SimObject:
        stored = copy.deepcopy(obj)
        stored.resource_version = 1
        with self._lock:
            key = (obj.kind, obj.name)
            if key in self._objects:
                raise Conflict(f"{obj.kind}/{obj.name} already exists")
            self._objects[key] = stored
            self._fanout(WatchEvent(ADDED, copy.deepcopy(stored)))
        self._run_audits(stored)
        return copy.deepcopy(stored)

    def update(self, obj: SimObject, expected_version: int) -> SimObject:
        stored = copy.deepcopy(obj)
        with self._lock:
            key = (obj.kind, obj.name)
            current = self._objects.get(key)
            if current is None:
                raise NotFound(f"{obj.kind}/{obj.name}")
            if current.resource_version != expected_version:
                raise Conflict(
                    f"{obj.kind}/{obj.name}: expected version {expected_version}, "
                    f"at {current.resource_version}"
                )
            stored.resource_version = expected_version + 1
            self._objects[key] = stored
            self._fanout(WatchEvent(MODIFIED, copy.deepcopy(stored)))
        self._run_audits(stored)
        return copy.deepcopy(stored)

    def delete(self, kind: str, name: str) -> None:
        with self._lock:
            obj = self._objects.pop((kind, name), None)
            if obj is None:
                raise NotFound(f"{kind}/{name}")
            self._fanout(WatchEvent(DELETED, copy.deepcopy(obj)))

    # -- watches and audits ----------------------------------------------

    def watch(self, *kinds: str) -> Watch:
        w = Watch(kinds)
        with self._lock:
            self._watches.append(w)
        return w

    def pending_events(self) -> int:
        with self._lock:
            return sum(w.pending() for w in self._watches)

    def add_audit(self, fn: Callable[[SimObject], None]) -> None:
        """Register a hook called with a snapshot after every successful
        create/update.  Hooks run outside the store lock."""
        self._audits.append(fn)

    def _fanout(self, event: WatchEvent) -> None:
        # Called under the lock: buffering under the commit lock is what
        # guarantees per-object resource-version order for every watcher.
        for w in self._watches:
            if event.object.kind in w.kinds:
                w._deliver(event)

    def _run_audits(self, stored: SimObject) -> None:
        for fn in self._audits:
            fn(copy.deepcopy(stored))
