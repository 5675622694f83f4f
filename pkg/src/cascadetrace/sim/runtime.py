"""Drives controllers against the object store's watch streams.

Two execution modes with one controller contract (reconcile one event):

- DeterministicRuntime steps a single thread through pending events in
  controller registration order, so a seeded run replays exactly.
- ThreadedRuntime gives each controller its own thread, real watch
  blocking, and wall-clock timing; ordering is whatever the scheduler
  does, which is the point.
"""

from __future__ import annotations

import threading
import time
from typing import Callable

from ..errors import CascadeTraceError
from .controllers import Controller
from .store import ObjectStore, Watch


class ScenarioTimeout(CascadeTraceError):
    """A wait condition did not hold within its budget."""


class DeterministicRuntime:
    """Single-threaded event pump with a fixed service order.

    step() delivers exactly one event: the first registered controller
    with anything pending processes its oldest event.  Writes made
    during that reconcile enqueue further events, so a cascade plays out
    breadth-first by controller priority until no watch has anything
    left.
    """

    def __init__(self, store: ObjectStore):
        self.store = store
        self._entries: list[tuple[Controller, Watch]] = []

    def register(self, controller: Controller) -> None:
        self._entries.append((controller, self.store.watch(*controller.kinds)))

    def step(self) -> bool:
        """Process one pending event.  False when fully quiescent."""
        for controller, watch in self._entries:
            event = watch.get(block=False)
            if event is not None:
                controller.reconcile(event)
                return True
        return False

    def run_until_quiescent(self, max_steps: int = 200_000) -> int:
        steps = 0
        while self.step():
            steps += 1
            if steps > max_steps:
                raise ScenarioTimeout(f"no quiescence after {max_steps} steps")
        return steps

    def run_until(self, predicate: Callable[[], bool], max_steps: int = 200_000) -> int:
        """Step until the predicate holds.  Quiescence with the predicate
        still false means no further event can ever satisfy it."""
        steps = 0
        while not predicate():
            if not self.step():
                raise ScenarioTimeout(
                    "quiescent but wait condition still unsatisfied"
                )
            steps += 1
            if steps > max_steps:
                raise ScenarioTimeout(f"wait condition unmet after {max_steps} steps")
        return steps


class ThreadedRuntime:
    """One thread per controller, each blocking on its own watch."""

    POLL_SECONDS = 0.1

    def __init__(self, store: ObjectStore):
        self.store = store
        self._controllers: list[Controller] = []
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def register(self, controller: Controller) -> None:
        self._controllers.append(controller)

    def start(self) -> None:
        self._stop.clear()
        for controller in self._controllers:
            watch = self.store.watch(*controller.kinds)
            thread = threading.Thread(
                target=self._loop,
                args=(controller, watch),
                name=f"ctrl-{controller.name}",
                daemon=True,
            )
            self._threads.append(thread)
            thread.start()

    def _loop(self, controller: Controller, watch: Watch) -> None:
        while not self._stop.is_set():
            event = watch.get(block=True, timeout=self.POLL_SECONDS)
            if event is not None:
                controller.reconcile(event)

    def wait_until(
        self,
        predicate: Callable[[], bool],
        timeout: float = 30.0,
        poll: float = 0.1,
    ) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if predicate():
                return
            time.sleep(poll)
        raise ScenarioTimeout(f"wait condition unmet after {timeout:.1f}s")

    def wait_quiescent(self, timeout: float = 30.0, poll: float = 0.1) -> None:
        """Wait until no watch has pending events twice in a row, which
        gives in-flight reconciles a window to enqueue follow-ups."""
        calm = 0

        def settled() -> bool:
            nonlocal calm
            calm = calm + 1 if self.store.pending_events() == 0 else 0
            return calm >= 2

        self.wait_until(settled, timeout=timeout, poll=poll)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5.0)
        self._threads.clear()
