"""In-memory trace server speaking HTTP + JSON.

Holds three things: the merge graph, the raw mergelog list, and the span
list.  State lives for the life of the process; a restart starts empty
by design (the tracer is an investigation aid, not a system of record).

Ingestion endpoints apply synchronously and then return, so a 2xx means
the record is queryable; asynchrony is the client's concern.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .context import DEFAULT_ANCESTOR_LIMIT, Mergelog, Span, is_cpid
from .graph import ApplyResult, GraphSnapshot, MergeGraph, UnknownCpid, CycleRejected
from .wire import (
    MalformedPayload,
    format_rfc3339,
    mergelog_from_json,
    mergelog_to_json,
    span_from_json,
    span_to_json,
)

log = logging.getLogger(__name__)


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 9411
    #: Echoed to clients in the X-Ancestor-Limit header for diagnostics.
    ancestor_limit: int = DEFAULT_ANCESTOR_LIMIT
    #: When set, ingestion keeps the graph at or under this many nodes
    #: by pruning whenever the budget is exceeded.
    max_graph_nodes: int | None = None


class TraceStore:
    """The server's state, usable directly in-process as an ingest target."""

    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig()
        self.graph = MergeGraph()
        self._mergelogs: list[Mergelog] = []
        self._spans: list[Span] = []
        self._lock = threading.Lock()

    # -- ingestion ----------------------------------------------------

    def post_mergelog(self, mlog: Mergelog) -> ApplyResult:
        with self._lock:
            result = self.graph.apply_mergelog(mlog)
            if result is ApplyResult.APPLIED:
                self._mergelogs.append(mlog)
                budget = self.config.max_graph_nodes
                if budget is not None and len(self.graph) > budget:
                    self._prune_locked(budget)
            return result

    def post_span(self, span: Span) -> None:
        with self._lock:
            self._spans.append(span)

    # -- queries ------------------------------------------------------

    def related(self, cpid: str) -> list[str]:
        return self.graph.related_cpids(cpid)

    def mergelogs(self, cpid: str | None = None) -> list[Mergelog]:
        """Stored mergelogs in ingestion order, optionally narrowed to
        those whose new CPID is related to ``cpid``."""
        with self._lock:
            if cpid is None:
                return list(self._mergelogs)
            related = set(self.graph.related_cpids(cpid))
            return [m for m in self._mergelogs if m.new_cpid in related]

    def spans(self, cpid: str | None = None) -> list[Span]:
        with self._lock:
            if cpid is None:
                return list(self._spans)
            related = set(self.graph.related_cpids(cpid))
            return [s for s in self._spans if s.cpid in related]

    def prune(self, max_nodes: int) -> list[str]:
        with self._lock:
            return self._prune_locked(max_nodes)

    def _prune_locked(self, max_nodes: int) -> list[str]:
        removed = self.graph.prune(max_nodes)
        if removed:
            gone = set(removed)
            self._mergelogs = [
                m for m in self._mergelogs if m.new_cpid not in gone
            ]
        return removed

    def graph_snapshot(self) -> GraphSnapshot:
        return self.graph.snapshot()


class _Handler(BaseHTTPRequestHandler):
    server: "TraceHTTPServer"
    protocol_version = "HTTP/1.1"

    # -- plumbing -----------------------------------------------------

    def log_message(self, fmt: str, *args) -> None:  # noqa: A002
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _reply(self, status: int, payload: object | None) -> None:
        body = b"" if payload is None else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("X-Ancestor-Limit", str(self.server.store.config.ancestor_limit))
        if status != 204:
            if body:
                self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._reply(status, {"error": message})

    def _read_json(self) -> object:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except (ValueError, UnicodeDecodeError):
            raise MalformedPayload("request body is not valid JSON") from None

    def _cpid_param(self, query: dict[str, list[str]]) -> str | None:
        """Validated optional ?cpid= filter; raises MalformedPayload."""
        values = query.get("cpid")
        if values is None:
            return None
        if len(values) != 1 or not is_cpid(values[0]):
            raise MalformedPayload(f"cpid parameter must be one UUIDv4, got {values!r}")
        return values[0]

    # -- routing ------------------------------------------------------

    def do_GET(self) -> None:  # noqa: N802
        url = urlparse(self.path)
        query = parse_qs(url.query)
        store = self.server.store
        try:
            if url.path == "/v1/mergelogs":
                cpid = self._cpid_param(query)
                self._reply(200, [mergelog_to_json(m) for m in store.mergelogs(cpid)])
            elif url.path == "/v1/spans":
                cpid = self._cpid_param(query)
                self._reply(200, [span_to_json(s) for s in store.spans(cpid)])
            elif url.path == "/v1/related":
                cpid = self._cpid_param(query)
                if cpid is None:
                    raise MalformedPayload("cpid parameter is required")
                self._reply(200, {"cpids": store.related(cpid)})
            elif url.path == "/v1/graph":
                snap = store.graph_snapshot()
                self._reply(
                    200,
                    {
                        "nodes": [
                            {
                                "cpid": cpid,
                                "timestamp": format_rfc3339(ts, millis=True),
                                "merge_created": created,
                            }
                            for cpid, ts, created in snap.nodes
                        ],
                        "edges": [
                            {"from": src, "to": dst} for src, dst in snap.edges
                        ],
                    },
                )
            else:
                self._error(404, f"no such resource: {url.path}")
        except MalformedPayload as exc:
            self._error(400, str(exc))
        except UnknownCpid as exc:
            self._error(404, f"unknown cpid: {exc}")

    def do_POST(self) -> None:  # noqa: N802
        url = urlparse(self.path)
        store = self.server.store
        try:
            if url.path == "/v1/mergelogs":
                store.post_mergelog(mergelog_from_json(self._read_json()))
                self._reply(204, None)
            elif url.path == "/v1/spans":
                store.post_span(span_from_json(self._read_json()))
                self._reply(204, None)
            elif url.path == "/v1/prune":
                body = self._read_json()
                if not isinstance(body, dict) or not isinstance(
                    body.get("max_nodes"), int
                ) or isinstance(body.get("max_nodes"), bool) or body["max_nodes"] < 0:
                    raise MalformedPayload("body must be {\"max_nodes\": <int >= 0>}")
                self._reply(200, {"removed": store.prune(body["max_nodes"])})
            else:
                self._error(404, f"no such resource: {url.path}")
        except MalformedPayload as exc:
            self._error(400, str(exc))
        except CycleRejected as exc:
            self._error(409, str(exc))


class TraceHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: ServerConfig, store: TraceStore):
        self.store = store
        super().__init__((config.host, config.port), _Handler)


class TraceServer:
    """Lifecycle wrapper: bind, serve (foreground or background), stop."""

    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig()
        self.store = TraceStore(self.config)
        self._httpd = TraceHTTPServer(self.config, self.store)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.config.host}:{self.port}"

    def start(self) -> "TraceServer":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="trace-server", daemon=True
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
