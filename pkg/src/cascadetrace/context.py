"""Change-propagation trace contexts.

A change propagation ID (CPID) is a UUIDv4 string stamped onto an object
when an operator or a controller changes it.  Alongside its own CPID an
object carries a short, newest-first list of ancestor CPIDs: the most
recent changes that led to this one.  Both travel in object annotations
so that an uninstrumented component copying annotations verbatim keeps
the trace intact.

This module is the client-side library: context creation, the ancestry
graph reduction used to decide between *replacing* a context and
*merging* several of them, annotation encode/decode, and span timing.
Nothing here talks to the trace server; emission is the caller's job.
"""

from __future__ import annotations

import random
import re
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .clocks import Clock, WallClock
from .errors import CascadeTraceError

#: Annotation key carrying an object's own CPID.
CPID_ANNOTATION = "cascade-trace/cpid"
#: Annotation key carrying the comma-joined, newest-first ancestor list.
ANCESTORS_ANNOTATION = "cascade-trace/ancestors"

#: Default bound on how many ancestor CPIDs an object carries.
DEFAULT_ANCESTOR_LIMIT = 5

_CPID_RE = re.compile(
    r"^[0-9a-f]{8}-[0-9a-f]{4}-4[0-9a-f]{3}-[89ab][0-9a-f]{3}-[0-9a-f]{12}$"
)


class MalformedContext(CascadeTraceError):
    """Annotations claim to carry a trace context but it does not parse."""


class EmptyMergeInput(CascadeTraceError):
    """merge() was called with no trace contexts."""


def is_cpid(value: object) -> bool:
    """Return True if ``value`` is a canonical lowercase UUIDv4 string."""
    return isinstance(value, str) and _CPID_RE.match(value) is not None


class CpidGenerator:
    """Source of fresh CPIDs (and span IDs).

    Unseeded, it draws from the process RNG seeded with OS entropy; with a
    seed it produces a reproducible UUIDv4 stream for deterministic runs.
    Safe to share between threads.  Generation never consults the trace
    server: uniqueness rests on the UUIDv4 collision bound.
    """

    def __init__(self, seed: int | None = None):
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def new_cpid(self) -> str:
        with self._lock:
            bits = self._rng.getrandbits(128)
        return str(uuid.UUID(int=bits, version=4))


@dataclass(frozen=True)
class TraceContext:
    """A CPID plus its bounded, newest-first ancestor window."""

    cpid: str
    ancestors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not is_cpid(self.cpid):
            raise MalformedContext(f"not a CPID: {self.cpid!r}")
        seen = set()
        for anc in self.ancestors:
            if not is_cpid(anc):
                raise MalformedContext(f"not a CPID: {anc!r}")
            if anc in seen:
                raise MalformedContext(f"duplicate ancestor: {anc}")
            seen.add(anc)
        if self.cpid in seen:
            raise MalformedContext("cpid listed among its own ancestors")


@dataclass(frozen=True)
class Mergelog:
    """Record that ``new_cpid`` was minted, naming the CPIDs it merged.

    An empty ``source_cpids`` registers a brand-new root (an operator
    action with no traced cause).  Timestamps are UTC with millisecond
    precision.
    """

    new_cpid: str
    source_cpids: tuple[str, ...]
    timestamp: datetime

    def __post_init__(self) -> None:
        if not is_cpid(self.new_cpid):
            raise MalformedContext(f"not a CPID: {self.new_cpid!r}")
        seen = set()
        for src in self.source_cpids:
            if not is_cpid(src):
                raise MalformedContext(f"not a CPID: {src!r}")
            if src in seen:
                raise MalformedContext(f"duplicate source: {src}")
            seen.add(src)
        if self.new_cpid in seen:
            raise MalformedContext("new_cpid listed among its own sources")


@dataclass(frozen=True)
class Span:
    """One timed unit of controller work, tagged with the CPID that caused it."""

    cpid: str
    span_id: str
    parent_id: str | None
    service: str
    name: str
    start_time: datetime
    end_time: datetime

    def __post_init__(self) -> None:
        if not is_cpid(self.cpid):
            raise MalformedContext(f"not a CPID: {self.cpid!r}")
        if not is_cpid(self.span_id):
            raise MalformedContext(f"not a span id: {self.span_id!r}")
        if self.parent_id is not None and not is_cpid(self.parent_id):
            raise MalformedContext(f"not a span id: {self.parent_id!r}")
        if self.end_time < self.start_time:
            raise ValueError("span ends before it starts")

    @property
    def duration_us(self) -> int:
        return (self.end_time - self.start_time) // _ONE_MICROSECOND


_ONE_MICROSECOND = datetime.min.resolution


def _now_millis(clock: Clock | None) -> datetime:
    dt = (clock or _WALL).now().astimezone(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


_WALL = WallClock()
_DEFAULT_GEN = CpidGenerator()


def build_cpid_graph(contexts: list[TraceContext]) -> dict[str, list[str]]:
    """Reduce trace contexts to a mapping of root CPIDs to their ancestors.

    A *root* is a CPID that, given the ancestor windows in ``contexts``,
    is not known to be an ancestor of any other input CPID.  One root
    means every context descends from it and the caller can simply
    replace contexts; several roots are genuinely concurrent histories
    that must be merged under a fresh CPID.

    Contexts are folded in one at a time.  For each incoming context:

    1. Any current root found in the incoming ancestor list is subsumed
       by it: the root's recorded ancestors are appended to the incoming
       list (the tail is the older side) and the root entry is dropped.
    2. If the incoming CPID is already a root, or appears in some root's
       ancestor list, its ancestors are added to the front of that list
       (the head is the newer side), skipping ones already present.
       Otherwise the incoming CPID becomes a new root.

    The returned mapping preserves root insertion order, no root appears
    in any ancestor list, and ancestor lists are duplicate-free.
    """
    graph: dict[str, list[str]] = {}
    for tctx in contexts:
        ancestors = list(tctx.ancestors)
        for key in list(graph):
            if key in ancestors:
                for val in graph[key]:
                    if val not in ancestors:
                        ancestors.append(val)
                del graph[key]
        included = False
        for key, values in graph.items():
            if key == tctx.cpid or tctx.cpid in values:
                for anc in reversed(ancestors):
                    if anc not in values:
                        values.insert(0, anc)
                included = True
        if not included:
            graph[tctx.cpid] = ancestors
    return graph


def new_root_context(
    *,
    gen: CpidGenerator | None = None,
    clock: Clock | None = None,
) -> tuple[TraceContext, Mergelog]:
    """Mint a root context for an operator-initiated change.

    Returns the fresh context plus a registration mergelog (empty source
    list) that the caller must forward to the trace server.
    """
    cpid = (gen or _DEFAULT_GEN).new_cpid()
    return TraceContext(cpid), Mergelog(cpid, (), _now_millis(clock))


def merge(
    contexts: list[TraceContext],
    *,
    limit: int = DEFAULT_ANCESTOR_LIMIT,
    gen: CpidGenerator | None = None,
    clock: Clock | None = None,
) -> tuple[TraceContext, Mergelog | None]:
    """Combine the contexts of the objects observed in one reconcile pass.

    With a single root the result reuses that CPID (no mergelog): the
    change is a plain continuation.  With ``k >= 2`` roots a fresh CPID
    is minted whose ancestors are the roots (newest information first)
    followed by their recorded ancestors, deduplicated and truncated to
    ``limit``; the accompanying mergelog names the roots as sources.

    Deterministic given the input order and the injected generator.

    Raises:
        EmptyMergeInput: if ``contexts`` is empty.
    """
    if not contexts:
        raise EmptyMergeInput("merge() needs at least one trace context")
    graph = build_cpid_graph(contexts)
    roots = list(graph)
    if len(roots) == 1:
        root = roots[0]
        return TraceContext(root, tuple(graph[root][:limit])), None
    cpid = (gen or _DEFAULT_GEN).new_cpid()
    ancestors = list(roots)
    for root in roots:
        for anc in graph[root]:
            if anc not in ancestors:
                ancestors.append(anc)
    ctx = TraceContext(cpid, tuple(ancestors[:limit]))
    return ctx, Mergelog(cpid, tuple(roots), _now_millis(clock))


def inject(annotations: dict[str, str], tctx: TraceContext) -> dict[str, str]:
    """Return a copy of ``annotations`` carrying ``tctx``.

    Both trace keys are always written; an empty ancestor list encodes as
    an empty string.  Unrelated annotation entries pass through untouched.
    """
    out = dict(annotations)
    out[CPID_ANNOTATION] = tctx.cpid
    out[ANCESTORS_ANNOTATION] = ",".join(tctx.ancestors)
    return out


def extract(
    annotations: dict[str, str],
    *,
    limit: int = DEFAULT_ANCESTOR_LIMIT,
) -> TraceContext | None:
    """Decode the trace context carried in object annotations.

    Returns None when the CPID key is absent (an untraced object).  A
    missing ancestors key counts as an empty list.  Anything that fails
    validation (a malformed UUID, duplicate ancestors, more than
    ``limit`` entries, or the CPID listed as its own ancestor) raises
    MalformedContext; callers are expected to treat such objects as
    untraced rather than abort their reconcile pass.
    """
    if CPID_ANNOTATION not in annotations:
        return None
    raw = annotations.get(ANCESTORS_ANNOTATION, "")
    ancestors = tuple(raw.split(",")) if raw else ()
    if len(ancestors) > limit:
        raise MalformedContext(
            f"ancestor list has {len(ancestors)} entries, limit is {limit}"
        )
    return TraceContext(annotations[CPID_ANNOTATION], ancestors)


@dataclass
class ActiveSpan:
    """A started span waiting for :func:`end_span`."""

    cpid: str
    service: str
    name: str
    span_id: str
    parent_id: str | None
    start_time: datetime
    _clock: Clock = field(repr=False, default_factory=WallClock)


def start_span(
    cpid: str,
    service: str,
    name: str,
    parent_id: str | None = None,
    *,
    gen: CpidGenerator | None = None,
    clock: Clock | None = None,
) -> ActiveSpan:
    """Open a span for a unit of work attributed to ``cpid``."""
    clock = clock or _WALL
    return ActiveSpan(
        cpid=cpid,
        service=service,
        name=name,
        span_id=(gen or _DEFAULT_GEN).new_cpid(),
        parent_id=parent_id,
        start_time=clock.now().astimezone(timezone.utc),
        _clock=clock,
    )


def end_span(active: ActiveSpan) -> Span:
    """Close ``active`` and return the immutable span record.

    The end time is clamped to the start time so a non-monotonic wall
    clock cannot produce a negative duration.
    """
    end = active._clock.now().astimezone(timezone.utc)
    if end < active.start_time:
        end = active.start_time
    return Span(
        cpid=active.cpid,
        span_id=active.span_id,
        parent_id=active.parent_id,
        service=active.service,
        name=active.name,
        start_time=active.start_time,
        end_time=end,
    )
