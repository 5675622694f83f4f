"""Presentation helpers: span forests, flame-graph folds, DOT output."""

from __future__ import annotations

from typing import Iterable

from .context import Span
from .wire import format_rfc3339


def build_span_forest(spans: Iterable[Span]) -> list[dict]:
    """Arrange spans into parent/child trees.

    Spans whose parent is absent from the input count as roots, so a
    partial fetch still renders.  Roots and children are ordered by
    (start_time, span_id) for stable output.
    """
    nodes = {span.span_id: {"span": span, "children": []} for span in spans}
    roots = []
    for node in nodes.values():
        parent = node["span"].parent_id
        if parent is not None and parent in nodes:
            nodes[parent]["children"].append(node)
        else:
            roots.append(node)

    def order(items: list[dict]) -> None:
        items.sort(key=lambda n: (n["span"].start_time, n["span"].span_id))
        for item in items:
            order(item["children"])

    order(roots)
    return roots


def folded_lines(spans: Iterable[Span]) -> list[str]:
    """Flame-graph folded format: one line per span.

    Each line is the span's service, the names along the path from its
    root, then a space and the span's own duration in microseconds:

        replicaset-controller;reconcile-replicaset;create-pod 312
    """
    lines: list[str] = []

    def walk(node: dict, names: list[str]) -> None:
        span = node["span"]
        path = names + [span.name]
        lines.append(f"{span.service};" + ";".join(path) + f" {span.duration_us}")
        for child in node["children"]:
            walk(child, path)

    for root in build_span_forest(spans):
        walk(root, [])
    return lines


def span_forest_json(spans: Iterable[Span]) -> list[dict]:
    def convert(node: dict) -> dict:
        span = node["span"]
        return {
            "span_id": span.span_id,
            "parent_id": span.parent_id,
            "cpid": span.cpid,
            "service": span.service,
            "name": span.name,
            "start_time": format_rfc3339(span.start_time),
            "end_time": format_rfc3339(span.end_time),
            "duration_us": span.duration_us,
            "children": [convert(child) for child in node["children"]],
        }

    return [convert(root) for root in build_span_forest(spans)]


def graph_to_dot(payload: dict) -> str:
    """Render a graph payload ({"nodes": [...], "edges": [...]}) as DOT.

    Merge-created nodes draw as filled boxes, plain registrations as
    ellipses, so provenance is visible at a glance.  Node labels use the
    first CPID block; the full CPID rides along as a tooltip.
    """
    out = ["digraph cascade {", "  rankdir=LR;"]
    for node in payload.get("nodes", []):
        cpid = node["cpid"]
        shape = (
            'shape=box, style=filled, fillcolor="#d0e0f0"'
            if node.get("merge_created")
            else "shape=ellipse"
        )
        out.append(
            f'  "{cpid}" [label="{cpid.split("-")[0]}", tooltip="{cpid}", {shape}];'
        )
    for edge in payload.get("edges", []):
        out.append(f'  "{edge["from"]}" -> "{edge["to"]}";')
    out.append("}")
    return "\n".join(out) + "\n"
