"""Scripted scenarios and the runner that executes them.

A scenario is a list of step dicts, either built in or loaded from a
JSON file:

    {"op": "create", "kind": "Deployment", "name": "web",
     "spec": {"replicas": 10, "label": "app=web"}}
    {"op": "scale", "name": "web", "replicas": 20}
    {"op": "wait_ready", "deployment": "web"}
    {"op": "wait_endpoints", "service": "web-svc"}

create and scale are operator actions through kubectl_sim; the wait ops
are barriers.  In deterministic mode a barrier pumps events one at a
time until the condition holds; in realistic mode it polls while the
controller threads run free.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from ..clocks import LogicalClock, WallClock
from ..client import TraceClient, TraceEmitter
from ..context import (
    ANCESTORS_ANNOTATION,
    CPID_ANNOTATION,
    DEFAULT_ANCESTOR_LIMIT,
    CpidGenerator,
    MalformedContext,
    extract,
)
from ..server import TraceStore
from .controllers import (
    SERVICE_DEPLOYMENT,
    SERVICE_ENDPOINTS,
    SERVICE_KUBECTL,
    SERVICE_REPLICASET,
    SERVICE_SCHEDULER,
    DeploymentController,
    EndpointsController,
    KubectlSim,
    KubeletSim,
    ReplicaSetController,
    RunLog,
    Scheduler,
    Tracer,
)
from .runtime import DeterministicRuntime, ThreadedRuntime
from .store import ObjectStore, SimObject

TraceSink = Union[TraceStore, TraceClient]


def _scale_up_steps() -> list[dict]:
    steps: list[dict] = [
        {
            "op": "create",
            "kind": "Deployment",
            "name": "web",
            "spec": {"replicas": 10, "label": "app=web"},
        },
        {"op": "wait_ready", "deployment": "web"},
    ]
    for replicas in (20, 30, 40, 50):
        steps.append({"op": "scale", "name": "web", "replicas": replicas})
        steps.append({"op": "wait_ready", "deployment": "web"})
    return steps


def _n_sweep_steps() -> list[dict]:
    names = [f"app-{i}" for i in range(5)]
    steps: list[dict] = []
    for name in names:
        steps.append(
            {
                "op": "create",
                "kind": "Deployment",
                "name": name,
                "spec": {"replicas": 1, "label": f"app={name}"},
            }
        )
    for name in names:
        steps.append({"op": "wait_ready", "deployment": name})
    # Seven update rounds alternating scale-out and scale-in, so later
    # updates sit ever further from the earliest surviving Pod context.
    for replicas in (3, 1, 3, 1, 3, 1, 3):
        for name in names:
            steps.append({"op": "scale", "name": name, "replicas": replicas})
        for name in names:
            steps.append({"op": "wait_ready", "deployment": name})
    return steps


def _fig5_service_steps() -> list[dict]:
    return [
        {
            "op": "create",
            "kind": "Deployment",
            "name": "web",
            "spec": {"replicas": 2, "label": "app=web"},
        },
        {"op": "wait_ready", "deployment": "web"},
        {
            "op": "create",
            "kind": "Service",
            "name": "web-svc",
            "spec": {"selector": "app=web"},
        },
        {"op": "wait_endpoints", "service": "web-svc"},
    ]


def _repeated_update_steps() -> list[dict]:
    # Each update is reconciled before the next lands.  An update that
    # skips generations faster than the ancestor window can bridge is a
    # different experiment, not this one.
    return [
        {
            "op": "create",
            "kind": "Deployment",
            "name": "app",
            "spec": {"replicas": 2, "label": "app=app"},
        },
        {"op": "wait_ready", "deployment": "app"},
        {"op": "scale", "name": "app", "replicas": 4},
        {"op": "wait_ready", "deployment": "app"},
        {"op": "scale", "name": "app", "replicas": 6},
        {"op": "wait_ready", "deployment": "app"},
    ]


BUILTIN_SCENARIOS: dict[str, list[dict]] = {
    "scale-up": _scale_up_steps(),
    "n-sweep-step": _n_sweep_steps(),
    "fig5-service": _fig5_service_steps(),
    "repeated-update": _repeated_update_steps(),
}


def load_scenario(path: str | Path) -> list[dict]:
    """Load scenario steps from a JSON file: a list of step objects."""
    with open(path, encoding="utf-8") as fh:
        steps = json.load(fh)
    if not isinstance(steps, list) or not all(isinstance(s, dict) for s in steps):
        raise ValueError(f"{path}: expected a JSON list of step objects")
    return steps


def scenario_steps(name_or_path: str) -> list[dict]:
    """Resolve a builtin scenario name, falling back to a JSON file path."""
    if name_or_path in BUILTIN_SCENARIOS:
        return [dict(step) for step in BUILTIN_SCENARIOS[name_or_path]]
    if Path(name_or_path).exists():
        return load_scenario(name_or_path)
    known = ", ".join(sorted(BUILTIN_SCENARIOS))
    raise ValueError(f"unknown scenario {name_or_path!r} (builtins: {known})")


@dataclass
class ScenarioReport:
    """What a run produced, counted against the trace sink.

    mergelog_count and span_count tally records whose CPID is related to
    any root minted during the run, so activity from other runs sharing
    the same server does not leak in.
    """

    scenario: str
    n_ancestors: int
    seed: int | None
    deterministic: bool
    mergelog_count: int
    span_count: int
    wall_time_seconds: float
    root_cpids: list[str] = field(default_factory=list)
    mergelogs_by_service: dict[str, int] = field(default_factory=dict)
    audit_violations: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "n_ancestors": self.n_ancestors,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "mergelog_count": self.mergelog_count,
            "span_count": self.span_count,
            "wall_time_seconds": self.wall_time_seconds,
            "root_cpids": list(self.root_cpids),
            "mergelogs_by_service": dict(self.mergelogs_by_service),
            "audit_violations": list(self.audit_violations),
        }


def _owning_label(store: ObjectStore, pod: SimObject) -> str | None:
    rs = store.try_get("ReplicaSet", pod.spec.get("owner", ""))
    if rs is None:
        return None
    deployment = store.try_get("Deployment", rs.spec.get("owner", ""))
    return deployment.spec.get("label") if deployment else None


class ScenarioRunner:
    """Wires a fresh object store, controllers, and tracing for one run.

    Deterministic runs use a logical clock and a single-threaded event
    pump, so one seed gives one byte-identical outcome.  Realistic runs
    use wall clocks and a thread per controller.
    """

    def __init__(
        self,
        sink: TraceSink,
        *,
        limit: int = DEFAULT_ANCESTOR_LIMIT,
        seed: int | None = None,
        deterministic: bool = True,
        include_kubelet: bool = True,
        node_names: tuple[str, ...] = ("node-0", "node-1", "node-2"),
        log_path: str | Path | None = None,
        kubelet_delay: float = 0.05,
        readiness_timeout: float = 30.0,
        max_steps: int = 200_000,
    ):
        self.sink = sink
        self.limit = limit
        self.seed = seed
        self.deterministic = deterministic
        self.include_kubelet = include_kubelet
        self.node_names = node_names
        self.log_path = log_path
        self.kubelet_delay = kubelet_delay
        self.readiness_timeout = readiness_timeout
        self.max_steps = max_steps

    def run(self, scenario: str | list[dict], traced: bool = True) -> ScenarioReport:
        if isinstance(scenario, str):
            name, steps = scenario, scenario_steps(scenario)
        else:
            name, steps = "custom", scenario

        store = ObjectStore()
        violations: list[str] = []
        store.add_audit(lambda obj: self._audit(obj, violations))

        clock = LogicalClock() if self.deterministic else WallClock()
        gen = CpidGenerator(self.seed)
        emitter = TraceEmitter(self.sink)
        runlog = RunLog(self.log_path, clock)
        counters: Counter = Counter()

        def tracer(service: str) -> Tracer:
            return Tracer(service, emitter, gen, clock, self.limit, runlog, counters)

        kubectl = KubectlSim(store, tracer(SERVICE_KUBECTL))
        controllers = [
            DeploymentController(store, tracer(SERVICE_DEPLOYMENT)),
            ReplicaSetController(store, tracer(SERVICE_REPLICASET)),
            Scheduler(store, tracer(SERVICE_SCHEDULER), self.node_names),
        ]
        if self.include_kubelet:
            sleep = clock.advance_seconds if self.deterministic else time.sleep
            controllers.append(KubeletSim(store, sleep, self.kubelet_delay))
        controllers.append(EndpointsController(store, tracer(SERVICE_ENDPOINTS)))

        runtime: DeterministicRuntime | ThreadedRuntime
        if self.deterministic:
            runtime = DeterministicRuntime(store)
        else:
            runtime = ThreadedRuntime(store)
        for controller in controllers:
            runtime.register(controller)

        roots: list[str] = []
        started = time.monotonic()
        try:
            if isinstance(runtime, ThreadedRuntime):
                runtime.start()
            for step in steps:
                self._execute(step, kubectl, store, runtime, roots, traced)
            if isinstance(runtime, DeterministicRuntime):
                runtime.run_until_quiescent(self.max_steps)
            else:
                runtime.wait_quiescent(self.readiness_timeout)
            wall = time.monotonic() - started
        finally:
            if isinstance(runtime, ThreadedRuntime):
                runtime.stop()
            emitter.flush()
            emitter.close()
            runlog.close()

        mergelog_count, span_count = self._count_related(roots)
        return ScenarioReport(
            scenario=name,
            n_ancestors=self.limit,
            seed=self.seed,
            deterministic=self.deterministic,
            mergelog_count=mergelog_count,
            span_count=span_count,
            wall_time_seconds=wall,
            root_cpids=roots,
            mergelogs_by_service=dict(counters),
            audit_violations=violations,
        )

    def _audit(self, obj: SimObject, violations: list[str]) -> None:
        ann = obj.annotations
        if ANCESTORS_ANNOTATION in ann and CPID_ANNOTATION not in ann:
            violations.append(f"{obj.kind}/{obj.name}: ancestors without a cpid")
            return
        try:
            extract(ann, limit=self.limit)
        except MalformedContext as exc:
            violations.append(f"{obj.kind}/{obj.name}: {exc}")

    def _execute(
        self,
        step: dict,
        kubectl: KubectlSim,
        store: ObjectStore,
        runtime: DeterministicRuntime | ThreadedRuntime,
        roots: list[str],
        traced: bool,
    ) -> None:
        op = step.get("op")
        if op == "create":
            _, root = kubectl.apply(
                step["kind"],
                step["name"],
                dict(step.get("spec", {})),
                traced=traced and step.get("traced", True),
            )
            if root:
                roots.append(root)
        elif op == "scale":
            _, root = kubectl.apply(
                step.get("kind", "Deployment"),
                step["name"],
                {"replicas": step["replicas"]},
                traced=traced and step.get("traced", True),
            )
            if root:
                roots.append(root)
        elif op == "wait_ready":
            dname = step["deployment"]
            phase = "Ready" if self.include_kubelet else "Scheduled"

            def ready() -> bool:
                deployment = store.try_get("Deployment", dname)
                if deployment is None:
                    return False
                pods = [
                    p
                    for p in store.list("Pod")
                    if p.spec.get("owner") == f"{dname}-rs"
                ]
                want = deployment.spec.get("replicas", 0)
                return len(pods) == want and all(
                    p.spec.get("phase") == phase for p in pods
                )

            self._barrier(runtime, ready)
        elif op == "wait_endpoints":
            sname = step["service"]

            def endpoints_ready() -> bool:
                svc = store.try_get("Service", sname)
                ep = store.try_get("Endpoints", sname)
                if svc is None or ep is None:
                    return False
                selector = svc.spec.get("selector")
                ready_pods = sorted(
                    p.name
                    for p in store.list("Pod")
                    if p.spec.get("phase") == "Ready"
                    and _owning_label(store, p) == selector
                )
                return bool(ready_pods) and ep.spec.get("pod_names") == ready_pods

            self._barrier(runtime, endpoints_ready)
        else:
            raise ValueError(f"unknown scenario op: {op!r}")

    def _barrier(self, runtime, predicate) -> None:
        if isinstance(runtime, DeterministicRuntime):
            runtime.run_until(predicate, self.max_steps)
        else:
            runtime.wait_until(predicate, self.readiness_timeout)

    def _count_related(self, roots: list[str]) -> tuple[int, int]:
        related: set[str] = set()
        for root in roots:
            related.update(self.sink.related(root))
        mergelogs = sum(
            1 for m in self.sink.mergelogs() if m.new_cpid in related
        )
        spans = sum(1 for s in self.sink.spans() if s.cpid in related)
        return mergelogs, spans
