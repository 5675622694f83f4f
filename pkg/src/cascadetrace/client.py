"""HTTP client for the trace server, plus the controllers' async emitter.

TraceClient mirrors TraceStore's method names, so scenario code can run
against a live server or an in-process store interchangeably.
"""

from __future__ import annotations

import logging
import queue
import threading
from typing import Union

import requests

from .context import Mergelog, Span
from .errors import CascadeTraceError
from .graph import UnknownCpid
from .server import TraceStore
from .wire import (
    MalformedPayload,
    mergelog_from_json,
    mergelog_to_json,
    span_from_json,
    span_to_json,
)

log = logging.getLogger(__name__)


class TransportError(CascadeTraceError):
    """The trace server could not be reached or answered unexpectedly."""


class TraceClient:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def _request(self, method: str, path: str, **kwargs) -> requests.Response:
        try:
            resp = self._session.request(
                method, f"{self.base_url}{path}", timeout=self.timeout, **kwargs
            )
        except requests.RequestException as exc:
            raise TransportError(f"{method} {path}: {exc}") from exc
        if resp.status_code == 404:
            detail = _error_detail(resp)
            if "cpid" in detail:
                raise UnknownCpid(detail)
            raise TransportError(f"{method} {path}: 404 {detail}")
        if resp.status_code >= 400:
            raise TransportError(
                f"{method} {path}: {resp.status_code} {_error_detail(resp)}"
            )
        return resp

    def post_mergelog(self, mlog: Mergelog) -> None:
        self._request("POST", "/v1/mergelogs", json=mergelog_to_json(mlog))

    def post_span(self, span: Span) -> None:
        self._request("POST", "/v1/spans", json=span_to_json(span))

    def mergelogs(self, cpid: str | None = None) -> list[Mergelog]:
        params = {"cpid": cpid} if cpid else None
        data = self._request("GET", "/v1/mergelogs", params=params).json()
        return [mergelog_from_json(item) for item in data]

    def spans(self, cpid: str | None = None) -> list[Span]:
        params = {"cpid": cpid} if cpid else None
        data = self._request("GET", "/v1/spans", params=params).json()
        return [span_from_json(item) for item in data]

    def related(self, cpid: str) -> list[str]:
        data = self._request("GET", "/v1/related", params={"cpid": cpid}).json()
        return list(data["cpids"])

    def prune(self, max_nodes: int) -> list[str]:
        data = self._request(
            "POST", "/v1/prune", json={"max_nodes": max_nodes}
        ).json()
        return list(data["removed"])

    def graph(self) -> dict:
        return self._request("GET", "/v1/graph").json()

    def close(self) -> None:
        self._session.close()


def _error_detail(resp: requests.Response) -> str:
    try:
        return resp.json().get("error", resp.text)
    except ValueError:
        return resp.text


#: Anything that can swallow mergelogs and spans.
TraceSink = Union[TraceStore, TraceClient]


class TraceEmitter:
    """Decouples controllers from trace delivery.

    Records are queued and shipped by one background thread in emission
    order, so instrumentation never blocks a reconcile pass on network
    I/O.  Delivery failures are logged and dropped: tracing is an aid,
    never a reason to stall the control plane.
    """

    _CLOSE = object()

    def __init__(self, sink: TraceSink):
        self._sink = sink
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(
            target=self._drain, name="trace-emitter", daemon=True
        )
        self._worker.start()

    def emit_mergelog(self, mlog: Mergelog) -> None:
        self._queue.put(("mergelog", mlog))

    def emit_span(self, span: Span) -> None:
        self._queue.put(("span", span))

    def flush(self) -> None:
        """Block until everything queued so far has been delivered."""
        self._queue.join()

    def close(self) -> None:
        self._queue.put(self._CLOSE)
        self._worker.join(timeout=10)

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is self._CLOSE:
                    return
                kind, record = item
                try:
                    if kind == "mergelog":
                        self._sink.post_mergelog(record)
                    else:
                        self._sink.post_span(record)
                except CascadeTraceError as exc:
                    log.warning("dropping %s: %s", kind, exc)
            finally:
                self._queue.task_done()
