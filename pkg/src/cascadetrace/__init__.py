"""Distributed tracing for cascading object changes in control planes.

Changes propagate through declarative systems as chains of object
writes, each made by a different controller reacting to the last.  This
package threads a change-propagation identity through such cascades via
object annotations, merges identities where cascades meet, and serves
the resulting provenance graph over HTTP for querying, flame-graph
export, and pruning.  A small control-plane simulator exercises the
whole pipeline end to end.
"""

from .clocks import Clock, LogicalClock, WallClock
from .client import TraceClient, TraceEmitter, TransportError
from .context import (
    ANCESTORS_ANNOTATION,
    CPID_ANNOTATION,
    DEFAULT_ANCESTOR_LIMIT,
    ActiveSpan,
    CpidGenerator,
    EmptyMergeInput,
    MalformedContext,
    Mergelog,
    Span,
    TraceContext,
    build_cpid_graph,
    end_span,
    extract,
    inject,
    is_cpid,
    merge,
    new_root_context,
    start_span,
)
from .errors import CascadeTraceError
from .graph import ApplyResult, CycleRejected, GraphSnapshot, MergeGraph, UnknownCpid
from .render import build_span_forest, folded_lines, graph_to_dot, span_forest_json
from .server import ServerConfig, TraceServer, TraceStore
from .wire import MalformedPayload, format_rfc3339, parse_rfc3339

__version__ = "0.1.0"

__all__ = [
    "ANCESTORS_ANNOTATION",
    "CPID_ANNOTATION",
    "DEFAULT_ANCESTOR_LIMIT",
    "ActiveSpan",
    "ApplyResult",
    "CascadeTraceError",
    "Clock",
    "CpidGenerator",
    "CycleRejected",
    "EmptyMergeInput",
    "GraphSnapshot",
    "LogicalClock",
    "MalformedContext",
    "MalformedPayload",
    "MergeGraph",
    "Mergelog",
    "ServerConfig",
    "Span",
    "TraceClient",
    "TraceContext",
    "TraceEmitter",
    "TraceServer",
    "TraceStore",
    "TransportError",
    "UnknownCpid",
    "WallClock",
    "build_cpid_graph",
    "build_span_forest",
    "end_span",
    "extract",
    "folded_lines",
    "format_rfc3339",
    "graph_to_dot",
    "inject",
    "is_cpid",
    "merge",
    "new_root_context",
    "parse_rfc3339",
    "span_forest_json",
    "start_span",
    "__version__",
]
