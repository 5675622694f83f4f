"""Command-line interface.

Subcommands:

  serve         run a trace server in the foreground
  run           execute a scenario against a trace server
  investigate   show everything related to a CPID
  flame         export a CPID's spans in flame-graph folded format
  graph-export  dump the server's CPID graph (DOT or JSON)
  sweep         run a scenario across ancestor-limit values, in process

Exit codes: 0 success, 1 usage or scenario failure, 2 transport or bind
failure, 3 CPID or resource not found.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from typing import IO

from .client import TraceClient, TransportError
from .context import DEFAULT_ANCESTOR_LIMIT, is_cpid
from .errors import CascadeTraceError
from .graph import UnknownCpid
from .render import folded_lines, graph_to_dot, span_forest_json
from .server import ServerConfig, TraceServer, TraceStore
from .sim import ScenarioRunner
from .sim.store import NotFound
from .wire import format_rfc3339, mergelog_to_json, span_to_json

DEFAULT_SERVER = "http://127.0.0.1:9411"
DEFAULT_SWEEP_VALUES = "0,1,2,3,5,10,15,20,30"


class UsageError(CascadeTraceError):
    """Bad command line or bad scenario input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: error: {message}")


def _add_server_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--server",
        default=DEFAULT_SERVER,
        help=f"trace server base URL (default {DEFAULT_SERVER})",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascade-trace", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("serve", help="run a trace server in the foreground")
    p.add_argument(
        "--listen",
        default="127.0.0.1:9411",
        help="host:port to bind (default 127.0.0.1:9411)",
    )
    p.add_argument(
        "--n-ancestors",
        type=int,
        default=DEFAULT_ANCESTOR_LIMIT,
        help="ancestor list limit advertised to clients (default 5)",
    )
    p.add_argument(
        "--max-graph-nodes",
        type=int,
        default=None,
        help="prune the CPID graph to this many nodes on ingest",
    )
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run", help="execute a scenario against a trace server")
    p.add_argument("--scenario", required=True, help="builtin name or JSON file path")
    _add_server_arg(p)
    p.add_argument("--n-ancestors", type=int, default=DEFAULT_ANCESTOR_LIMIT)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded run with a logical clock",
    )
    p.add_argument("--log-file", default=None, help="write a JSONL run log here")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("investigate", help="show everything related to a CPID")
    p.add_argument("cpid")
    _add_server_arg(p)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_investigate)

    p = sub.add_parser("flame", help="export a CPID's spans for flame graphs")
    p.add_argument("cpid")
    _add_server_arg(p)
    p.add_argument("--format", choices=("folded", "json"), default="folded")
    p.add_argument("--output", default=None, help="write here instead of stdout")
    p.set_defaults(func=cmd_flame)

    p = sub.add_parser("graph-export", help="dump the server's CPID graph")
    _add_server_arg(p)
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.add_argument("--output", default=None, help="write here instead of stdout")
    p.set_defaults(func=cmd_graph_export)

    p = sub.add_parser("sweep", help="run a scenario across ancestor limits")
    p.add_argument(
        "--n-values",
        default=DEFAULT_SWEEP_VALUES,
        help=f"comma-separated ancestor limits (default {DEFAULT_SWEEP_VALUES})",
    )
    p.add_argument("--repeats", type=int, default=1, help="runs per limit value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", default="n-sweep-step")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_sweep)

    return parser


def cmd_serve(args: argparse.Namespace) -> int:
    host, _, port_text = args.listen.rpartition(":")
    try:
        port = int(port_text)
    except ValueError:
        raise UsageError(f"--listen expects host:port, got {args.listen!r}")
    config = ServerConfig(
        host=host or "127.0.0.1",
        port=port,
        ancestor_limit=args.n_ancestors,
        max_graph_nodes=args.max_graph_nodes,
    )
    try:
        server = TraceServer(config)
    except OSError as exc:
        print(f"cannot bind {args.listen}: {exc}", file=sys.stderr)
        return 2
    print(f"listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    client = TraceClient(args.server)
    runner = ScenarioRunner(
        client,
        limit=args.n_ancestors,
        seed=args.seed,
        deterministic=args.deterministic,
        log_path=args.log_file,
    )
    try:
        report = runner.run(args.scenario)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.format == "json":
        print(json.dumps(report.to_json(), indent=2))
    else:
        rows = [
            ("scenario", report.scenario),
            ("n_ancestors", report.n_ancestors),
            ("seed", report.seed),
            ("deterministic", report.deterministic),
            ("mergelog_count", report.mergelog_count),
            ("span_count", report.span_count),
            ("wall_time_seconds", f"{report.wall_time_seconds:.3f}"),
            (
                "mergelogs_by_service",
                " ".join(
                    f"{svc}={n}"
                    for svc, n in sorted(report.mergelogs_by_service.items())
                )
                or "-",
            ),
            ("audit_violations", len(report.audit_violations)),
        ]
        width = max(len(key) for key, _ in rows)
        for key, value in rows:
            print(f"{key:<{width}}  {value}")
        print("root_cpids:")
        for cpid in report.root_cpids:
            print(f"  {cpid}")
    return 0 if not report.audit_violations else 1


def _require_cpid(value: str) -> None:
    if not is_cpid(value):
        raise UsageError(f"not a CPID: {value!r}")


def cmd_investigate(args: argparse.Namespace) -> int:
    _require_cpid(args.cpid)
    client = TraceClient(args.server)
    related = client.related(args.cpid)
    mergelogs = client.mergelogs(args.cpid)
    spans = client.spans(args.cpid)
    if args.format == "json":
        print(
            json.dumps(
                {
                    "cpid": args.cpid,
                    "related": related,
                    "mergelogs": [mergelog_to_json(m) for m in mergelogs],
                    "spans": [span_to_json(s) for s in spans],
                },
                indent=2,
            )
        )
        return 0
    print(f"cpid {args.cpid}")
    print(f"related ({len(related)}):")
    for cpid in related:
        print(f"  {cpid}")
    print(f"mergelogs ({len(mergelogs)}):")
    for m in mergelogs:
        sources = ", ".join(m.source_cpids) if m.source_cpids else "(root)"
        print(f"  {format_rfc3339(m.timestamp, millis=True)}  {m.new_cpid} <- {sources}")
    print(f"spans ({len(spans)}):")
    for s in spans:
        print(
            f"  {format_rfc3339(s.start_time)}  {s.service:<22} "
            f"{s.name:<22} {s.duration_us:>8}us  {s.cpid}"
        )
    return 0


def _open_output(path: str | None) -> IO[str]:
    return open(path, "w", encoding="utf-8") if path else sys.stdout


def cmd_flame(args: argparse.Namespace) -> int:
    _require_cpid(args.cpid)
    client = TraceClient(args.server)
    spans = client.spans(args.cpid)
    out = _open_output(args.output)
    try:
        if args.format == "json":
            json.dump(span_forest_json(spans), out, indent=2)
            out.write("\n")
        else:
            for line in folded_lines(spans):
                out.write(line + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_graph_export(args: argparse.Namespace) -> int:
    client = TraceClient(args.server)
    payload = client.graph()
    out = _open_output(args.output)
    try:
        if args.format == "json":
            json.dump(payload, out, indent=2)
            out.write("\n")
        else:
            out.write(graph_to_dot(payload))
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        values = [int(v) for v in args.n_values.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"--n-values expects integers, got {args.n_values!r}")
    if not values or args.repeats < 1:
        raise UsageError("--n-values needs at least one value and --repeats >= 1")

    results: dict[int, list[int]] = {}
    for n in values:
        counts = []
        for run in range(args.repeats):
            # Fresh in-process store per run: sweep numbers must not
            # depend on whatever a shared server has already seen.
            store = TraceStore(ServerConfig(ancestor_limit=n))
            runner = ScenarioRunner(
                store, limit=n, seed=args.seed + run, deterministic=True
            )
            try:
                report = runner.run(args.scenario)
            except ValueError as exc:
                raise UsageError(str(exc))
            counts.append(report.mergelog_count)
        results[n] = counts

    if args.format == "csv":
        print("n,run,mergelog_count")
        for n in values:
            for run, count in enumerate(results[n]):
                print(f"{n},{run},{count}")
    else:
        print(f"{'n':>4}  {'runs':>4}  {'mean_mergelogs':>14}  {'stderr':>8}")
        for n in values:
            counts = results[n]
            mean = statistics.fmean(counts)
            err = (
                statistics.stdev(counts) / (len(counts) ** 0.5)
                if len(counts) > 1
                else 0.0
            )
            print(f"{n:>4}  {len(counts):>4}  {mean:>14.1f}  {err:>8.2f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError(f"{parser.prog}: error: a command is required")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (UnknownCpid, NotFound) as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return 3
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 2
    except CascadeTraceError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
