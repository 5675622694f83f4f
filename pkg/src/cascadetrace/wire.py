"""JSON wire encoding for mergelogs and spans.

Timestamps travel as RFC 3339 UTC strings with fractional seconds:
millisecond precision for mergelogs, microsecond for spans.
"""

from __future__ import annotations

from datetime import datetime, timezone

from .context import Mergelog, Span, MalformedContext
from .errors import CascadeTraceError


class MalformedPayload(CascadeTraceError):
    """A request body or record does not match the wire schema."""


def format_rfc3339(dt: datetime, *, millis: bool = False) -> str:
    dt = dt.astimezone(timezone.utc)
    base = dt.strftime("%Y-%m-%dT%H:%M:%S")
    frac = f"{dt.microsecond // 1000:03d}" if millis else f"{dt.microsecond:06d}"
    return f"{base}.{frac}Z"


def parse_rfc3339(value: object) -> datetime:
    if not isinstance(value, str):
        raise MalformedPayload(f"timestamp must be a string, got {type(value).__name__}")
    text = value[:-1] + "+00:00" if value.endswith(("Z", "z")) else value
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise MalformedPayload(f"bad RFC 3339 timestamp: {value!r}") from None
    if dt.tzinfo is None:
        raise MalformedPayload(f"timestamp lacks a UTC offset: {value!r}")
    return dt.astimezone(timezone.utc)


def mergelog_to_json(log: Mergelog) -> dict:
    return {
        "new_cpid": log.new_cpid,
        "source_cpids": list(log.source_cpids),
        "timestamp": format_rfc3339(log.timestamp, millis=True),
    }


def mergelog_from_json(data: object) -> Mergelog:
    if not isinstance(data, dict):
        raise MalformedPayload("mergelog must be a JSON object")
    try:
        sources = data["source_cpids"]
        if not isinstance(sources, list) or not all(
            isinstance(s, str) for s in sources
        ):
            raise MalformedPayload("source_cpids must be a list of strings")
        return Mergelog(
            new_cpid=data["new_cpid"],
            source_cpids=tuple(sources),
            timestamp=parse_rfc3339(data["timestamp"]),
        )
    except KeyError as exc:
        raise MalformedPayload(f"mergelog missing field {exc}") from None
    except (MalformedContext, TypeError) as exc:
        raise MalformedPayload(str(exc)) from None


def span_to_json(span: Span) -> dict:
    return {
        "cpid": span.cpid,
        "span_id": span.span_id,
        "parent_id": span.parent_id,
        "service": span.service,
        "name": span.name,
        "start_time": format_rfc3339(span.start_time),
        "end_time": format_rfc3339(span.end_time),
    }


def span_from_json(data: object) -> Span:
    if not isinstance(data, dict):
        raise MalformedPayload("span must be a JSON object")
    try:
        parent = data.get("parent_id")
        if parent is not None and not isinstance(parent, str):
            raise MalformedPayload("parent_id must be a string or null")
        for field in ("service", "name"):
            if not isinstance(data[field], str):
                raise MalformedPayload(f"{field} must be a string")
        return Span(
            cpid=data["cpid"],
            span_id=data["span_id"],
            parent_id=parent,
            service=data["service"],
            name=data["name"],
            start_time=parse_rfc3339(data["start_time"]),
            end_time=parse_rfc3339(data["end_time"]),
        )
    except KeyError as exc:
        raise MalformedPayload(f"span missing field {exc}") from None
    except (MalformedContext, TypeError, ValueError) as exc:
        raise MalformedPayload(str(exc)) from None
