"""Server-side CPID merge graph.

Mergelogs accumulate into a directed acyclic graph: one node per CPID,
one edge from each source CPID to the CPID minted by the merge.  The
graph answers the operator's core question, "which CPIDs descend from
this change?", and supports bounded-memory operation through pruning.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from datetime import datetime

from .context import Mergelog
from .errors import CascadeTraceError


class UnknownCpid(CascadeTraceError):
    """The queried CPID has never been seen by this graph."""


class CycleRejected(CascadeTraceError):
    """Applying the mergelog would create a cycle; the graph is unchanged.

    Honest producers mint fresh UUIDv4 CPIDs, so this only fires on
    corrupt or adversarial input.
    """


class ApplyResult(enum.Enum):
    APPLIED = "applied"
    DUPLICATE = "duplicate"


@dataclass
class _Node:
    timestamp: datetime
    merge_created: bool


@dataclass(frozen=True)
class GraphSnapshot:
    """Consistent point-in-time copy of the graph structure."""

    nodes: tuple[tuple[str, datetime, bool], ...]  # (cpid, timestamp, merge_created)
    edges: tuple[tuple[str, str], ...]  # (source, target)


class MergeGraph:
    """Mutable merge DAG with reachability queries and pruning.

    All operations take one internal lock, so mutations are serialized
    and every reader observes a consistent graph.
    """

    def __init__(self) -> None:
        self._nodes: dict[str, _Node] = {}
        self._out: dict[str, set[str]] = {}
        self._in_degree: dict[str, int] = {}
        self._edge_order: list[tuple[str, str]] = []
        self._applied: set[tuple[str, tuple[str, ...]]] = set()
        self._lock = threading.Lock()

    # -- ingestion ----------------------------------------------------

    def apply_mergelog(self, log: Mergelog) -> ApplyResult:
        """Fold one mergelog into the graph.

        Unknown source CPIDs are auto-created (merges can arrive out of
        order), and a node first seen as a source is upgraded to
        merge-created when its own mergelog shows up.  A log identical to
        one already applied (same new CPID and sources) is idempotently
        ignored, which makes at-least-once delivery safe.

        Raises:
            CycleRejected: if the edges would close a cycle; no change
                is made in that case.
        """
        key = (log.new_cpid, tuple(log.source_cpids))
        with self._lock:
            if key in self._applied:
                return ApplyResult.DUPLICATE
            # Reject before mutating: a cycle needs a path from the new
            # CPID back to a source, which only involves existing nodes.
            if log.new_cpid in self._nodes and log.source_cpids:
                reach = self._reachable_from(log.new_cpid)
                bad = reach.intersection(log.source_cpids)
                if bad:
                    raise CycleRejected(
                        f"{log.new_cpid} already reaches {sorted(bad)}"
                    )
            self._ensure_node(log.new_cpid, log.timestamp)
            node = self._nodes[log.new_cpid]
            node.timestamp = log.timestamp
            if log.source_cpids:
                node.merge_created = True
            for src in log.source_cpids:
                self._ensure_node(src, log.timestamp)
                if log.new_cpid not in self._out[src]:
                    self._out[src].add(log.new_cpid)
                    self._in_degree[log.new_cpid] += 1
                    self._edge_order.append((src, log.new_cpid))
            self._applied.add(key)
            return ApplyResult.APPLIED

    def _ensure_node(self, cpid: str, timestamp: datetime) -> None:
        if cpid not in self._nodes:
            self._nodes[cpid] = _Node(timestamp=timestamp, merge_created=False)
            self._out[cpid] = set()
            self._in_degree[cpid] = 0

    # -- queries ------------------------------------------------------

    def related_cpids(self, cpid: str) -> list[str]:
        """Every CPID reachable from ``cpid``, including itself.

        Order is deterministic: breadth-first layers outward from the
        query CPID, lexicographic within each layer.

        Raises:
            UnknownCpid: if ``cpid`` is not (or no longer) in the graph.
        """
        with self._lock:
            if cpid not in self._nodes:
                raise UnknownCpid(cpid)
            order = [cpid]
            seen = {cpid}
            frontier = [cpid]
            while frontier:
                layer: set[str] = set()
                for node in frontier:
                    layer.update(
                        nxt for nxt in self._out[node] if nxt not in seen
                    )
                frontier = sorted(layer)
                seen.update(frontier)
                order.extend(frontier)
            return order

    def __contains__(self, cpid: str) -> bool:
        with self._lock:
            return cpid in self._nodes

    def __len__(self) -> int:
        with self._lock:
            return len(self._nodes)

    def snapshot(self) -> GraphSnapshot:
        with self._lock:
            nodes = tuple(
                (cpid, node.timestamp, node.merge_created)
                for cpid, node in self._nodes.items()
            )
            return GraphSnapshot(nodes=nodes, edges=tuple(self._edge_order))

    def _reachable_from(self, cpid: str) -> set[str]:
        seen = {cpid}
        stack = [cpid]
        while stack:
            for nxt in self._out.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    # -- pruning ------------------------------------------------------

    def prune(self, max_nodes: int) -> list[str]:
        """Shrink the graph to at most ``max_nodes`` nodes.

        Only nodes with in-degree zero are ever deleted directly - a node
        some surviving CPID still points at stays queryable.  Victims are
        chosen oldest-timestamp-first (ties broken by CPID) and removing
        one cascades into any merge-created child whose in-degree drops
        to zero, since such a node is unreachable from every surviving
        root.  Returns the removed CPIDs in deletion order.
        """
        if max_nodes < 0:
            raise ValueError("max_nodes must be >= 0")
        removed: list[str] = []
        with self._lock:
            while len(self._nodes) > max_nodes:
                candidates = [
                    cpid for cpid, deg in self._in_degree.items() if deg == 0
                ]
                if not candidates:
                    break
                victim = min(
                    candidates, key=lambda c: (self._nodes[c].timestamp, c)
                )
                queue = [victim]
                while queue:
                    cpid = queue.pop(0)
                    for target in sorted(self._out[cpid]):
                        self._in_degree[target] -= 1
                        if (
                            self._in_degree[target] == 0
                            and self._nodes[target].merge_created
                        ):
                            queue.append(target)
                    del self._nodes[cpid]
                    del self._out[cpid]
                    del self._in_degree[cpid]
                    self._edge_order = [
                        (a, b)
                        for a, b in self._edge_order
                        if a != cpid and b != cpid
                    ]
                    removed.append(cpid)
            if removed:
                # Drop dedup keys for removed CPIDs so pruning actually
                # bounds memory; a pruned log resent later re-applies.
                gone = set(removed)
                self._applied = {
                    key for key in self._applied if key[0] not in gone
                }
        return removed
