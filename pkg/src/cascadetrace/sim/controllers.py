"""Simulated control-plane actors and their trace instrumentation.

The chain mirrors a minimal container orchestrator: an operator tool
(kubectl_sim) writes Deployments and Services; the Deployment controller
maintains one ReplicaSet per Deployment; the ReplicaSet controller
creates and deletes Pods; the scheduler binds Pods to nodes; kubelet_sim
marks scheduled Pods Ready; the endpoints controller keeps an Endpoints
object per Service listing its Ready Pods.

Instrumented controllers follow one pattern per reconcile pass: read the
objects the pass depends on, and if a write is needed, combine their
trace contexts (downstream state first, the triggering object last, so
the freshest context subsumes the stale ones) and stamp the result onto
everything written.  A pass that changes nothing emits nothing.  Passes
that only delete also skip the merge: a deleted object cannot carry the
merged context forward.

kubelet_sim is deliberately uninstrumented.  It copies annotations
verbatim, standing in for components outside the tracing rollout.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import Counter
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator

from ..clocks import Clock, WallClock
from ..client import TraceEmitter
from ..context import (
    ActiveSpan,
    CpidGenerator,
    MalformedContext,
    Mergelog,
    TraceContext,
    end_span,
    extract,
    inject,
    merge,
    new_root_context,
    start_span,
)
from ..wire import format_rfc3339
from .store import DELETED, Conflict, NotFound, ObjectStore, SimObject, WatchEvent

log = logging.getLogger(__name__)

SERVICE_KUBECTL = "kubectl"
SERVICE_DEPLOYMENT = "deployment-controller"
SERVICE_REPLICASET = "replicaset-controller"
SERVICE_SCHEDULER = "scheduler"
SERVICE_ENDPOINTS = "endpoints-controller"

#: How often an optimistic write is retried before the pass gives up.
CONFLICT_RETRIES = 5


class RunLog:
    """JSON Lines log for a run: one record per line with fields
    ``ts``, ``controller``, ``cpid``, ``msg`` plus free-form strings."""

    def __init__(self, path: str | Path | None = None, clock: Clock | None = None):
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._clock = clock or WallClock()
        self._lock = threading.Lock()

    def record(self, controller: str, cpid: str, msg: str, **fields: str) -> None:
        if self._fh is None:
            return
        rec = {
            "ts": format_rfc3339(self._clock.now()),
            "controller": controller,
            "cpid": cpid,
            "msg": msg,
        }
        rec.update({k: str(v) for k, v in fields.items()})
        with self._lock:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Tracer:
    """Per-service instrumentation bundle shared by one controller."""

    def __init__(
        self,
        service: str,
        emitter: TraceEmitter,
        gen: CpidGenerator,
        clock: Clock,
        limit: int,
        runlog: RunLog,
        counters: Counter,
    ):
        self.service = service
        self.emitter = emitter
        self.gen = gen
        self.clock = clock
        self.limit = limit
        self.runlog = runlog
        self.counters = counters

    def read_context(self, obj: SimObject | None) -> TraceContext | None:
        """Extract an object's context; malformed ones count as untraced
        so a bad annotation can never abort a reconcile pass."""
        if obj is None:
            return None
        try:
            return extract(obj.annotations, limit=self.limit)
        except MalformedContext as exc:
            log.warning(
                "%s: ignoring malformed trace context on %s/%s: %s",
                self.service, obj.kind, obj.name, exc,
            )
            return None

    def merge_for_pass(self, contexts: list[TraceContext | None]) -> TraceContext | None:
        """Combine the observed contexts for a writing pass, forwarding
        the mergelog if one was minted.  None entries are untraced
        objects and drop out; all-untraced passes return None."""
        present = [c for c in contexts if c is not None]
        if not present:
            return None
        ctx, mlog = merge(present, limit=self.limit, gen=self.gen, clock=self.clock)
        if mlog is not None:
            self.emit_mergelog(mlog)
        return ctx

    def emit_mergelog(self, mlog: Mergelog) -> None:
        self.counters[self.service] += 1
        self.emitter.emit_mergelog(mlog)

    @contextmanager
    def span(
        self, cpid: str | None, name: str, parent: ActiveSpan | None = None
    ) -> Iterator[ActiveSpan | None]:
        """Time a unit of work; a None cpid (untraced flow) is a no-op."""
        if cpid is None:
            yield None
            return
        active = start_span(
            cpid,
            self.service,
            name,
            parent_id=parent.span_id if parent else None,
            gen=self.gen,
            clock=self.clock,
        )
        try:
            yield active
        finally:
            self.emitter.emit_span(end_span(active))

    def log(self, cpid: str | None, msg: str, **fields: str) -> None:
        self.runlog.record(self.service, cpid or "", msg, **fields)


class KubectlSim:
    """Scripted operator actions: declarative create/update of objects.

    A traced apply mints a fresh root CPID.  Creating an object (or
    upgrading an untraced one) registers that root with an empty-source
    mergelog.  Updating an already-traced object instead merges the
    object's current context with the new root; the resulting mergelog
    names both, which also introduces the root to the server, so no
    separate registration is sent.  The root CPID is returned so the
    operator can investigate the cascade later.
    """

    def __init__(self, store: ObjectStore, tracer: Tracer):
        self.store = store
        self.tracer = tracer

    def apply(
        self, kind: str, name: str, spec: dict, traced: bool = True
    ) -> tuple[SimObject, str | None]:
        existing = self.store.try_get(kind, name)
        ctx: TraceContext | None = None
        root_cpid: str | None = None
        if traced:
            root_ctx, registration = new_root_context(
                gen=self.tracer.gen, clock=self.tracer.clock
            )
            root_cpid = root_ctx.cpid
            old = self.tracer.read_context(existing)
            if old is None:
                self.tracer.emit_mergelog(registration)
                ctx = root_ctx
            else:
                ctx, mlog = merge(
                    [old, root_ctx],
                    limit=self.tracer.limit,
                    gen=self.tracer.gen,
                    clock=self.tracer.clock,
                )
                assert mlog is not None  # a fresh root is never subsumed
                self.tracer.emit_mergelog(mlog)
        with self.tracer.span(ctx.cpid if ctx else None, "apply") as root:
            if existing is None:
                obj = SimObject(
                    kind, name, dict(spec), inject({}, ctx) if ctx else {}
                )
                with self.tracer.span(ctx.cpid if ctx else None, "create-object", root):
                    obj = self.store.create(obj)
                self.tracer.log(root_cpid, "created object", kind=kind, name=name)
            else:
                existing.spec.update(spec)
                if ctx:
                    existing.annotations = inject(existing.annotations, ctx)
                with self.tracer.span(ctx.cpid if ctx else None, "update-object", root):
                    obj = self.store.update(existing, existing.resource_version)
                self.tracer.log(root_cpid, "updated object", kind=kind, name=name)
        return obj, root_cpid


class Controller:
    """Base reconciler: optimistic-concurrency conflicts re-run the pass,
    which re-reads current state, up to CONFLICT_RETRIES times."""

    name: str = ""
    kinds: tuple[str, ...] = ()

    def __init__(self, store: ObjectStore):
        self.store = store

    def reconcile(self, event: WatchEvent) -> None:
        for _ in range(CONFLICT_RETRIES):
            try:
                self._reconcile(event)
                return
            except NotFound:
                return  # object vanished mid-pass; a delete event follows
            except Conflict:
                continue
        log.warning(
            "%s: gave up on %s %s/%s after %d conflicts",
            self.name, event.type, event.object.kind, event.object.name,
            CONFLICT_RETRIES,
        )

    def _reconcile(self, event: WatchEvent) -> None:
        raise NotImplementedError


class DeploymentController(Controller):
    """Keeps one ReplicaSet per Deployment at the declared replica count."""

    name = SERVICE_DEPLOYMENT
    kinds = ("Deployment", "ReplicaSet")

    def __init__(self, store: ObjectStore, tracer: Tracer):
        super().__init__(store)
        self.tracer = tracer

    def _reconcile(self, event: WatchEvent) -> None:
        obj = event.object
        dname = obj.name if obj.kind == "Deployment" else obj.spec.get("owner")
        if not dname:
            return
        deployment = self.store.try_get("Deployment", dname)
        if deployment is None:
            return
        rs = self.store.try_get("ReplicaSet", f"{dname}-rs")
        desired = deployment.spec.get("replicas", 0)
        if rs is not None and rs.spec.get("replicas") == desired:
            return

        ctx = self.tracer.merge_for_pass(
            [self.tracer.read_context(rs), self.tracer.read_context(deployment)]
        )
        trigger = self.tracer.read_context(obj)
        span_cpid = trigger.cpid if trigger else (ctx.cpid if ctx else None)
        with self.tracer.span(span_cpid, "reconcile-deployment") as root:
            if rs is None:
                new_rs = SimObject(
                    "ReplicaSet",
                    f"{dname}-rs",
                    {"replicas": desired, "owner": dname},
                    inject({}, ctx) if ctx else {},
                )
                with self.tracer.span(ctx.cpid if ctx else span_cpid, "create-replicaset", root):
                    self.store.create(new_rs)
                self.tracer.log(
                    ctx.cpid if ctx else None, "created replicaset",
                    deployment=dname, replicas=desired,
                )
            else:
                rs.spec["replicas"] = desired
                if ctx:
                    rs.annotations = inject(rs.annotations, ctx)
                with self.tracer.span(ctx.cpid if ctx else span_cpid, "scale-replicaset", root):
                    self.store.update(rs, rs.resource_version)
                self.tracer.log(
                    ctx.cpid if ctx else None, "scaled replicaset",
                    deployment=dname, replicas=desired,
                )


def _pod_index(pod: SimObject) -> int:
    try:
        return int(pod.name.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        return -1


class ReplicaSetController(Controller):
    """Creates or deletes Pods until each ReplicaSet is at size.

    Scale-down removes the newest Pods first and performs no merge:
    deletions cannot carry a context, so those passes emit spans and a
    log record but never a mergelog.
    """

    name = SERVICE_REPLICASET
    kinds = ("ReplicaSet", "Pod")

    def __init__(self, store: ObjectStore, tracer: Tracer):
        super().__init__(store)
        self.tracer = tracer

    def _reconcile(self, event: WatchEvent) -> None:
        obj = event.object
        rs_name = obj.name if obj.kind == "ReplicaSet" else obj.spec.get("owner")
        if not rs_name:
            return
        rs = self.store.try_get("ReplicaSet", rs_name)
        if rs is None:
            return
        pods = [
            p for p in self.store.list("Pod") if p.spec.get("owner") == rs_name
        ]
        desired = rs.spec.get("replicas", 0)
        if len(pods) == desired:
            return

        trigger = self.tracer.read_context(obj)
        if len(pods) < desired:
            ctx = self.tracer.merge_for_pass(
                [self.tracer.read_context(p) for p in pods]
                + [self.tracer.read_context(rs)]
            )
            span_cpid = trigger.cpid if trigger else (ctx.cpid if ctx else None)
            next_index = max((_pod_index(p) for p in pods), default=-1) + 1
            with self.tracer.span(span_cpid, "reconcile-replicaset") as root:
                for i in range(desired - len(pods)):
                    pod = SimObject(
                        "Pod",
                        f"{rs_name}-pod-{next_index + i}",
                        {"owner": rs_name, "phase": "Pending"},
                        inject({}, ctx) if ctx else {},
                    )
                    with self.tracer.span(ctx.cpid if ctx else span_cpid, "create-pod", root):
                        self.store.create(pod)
                self.tracer.log(
                    ctx.cpid if ctx else None, "created pods",
                    replicaset=rs_name, count=desired - len(pods),
                )
        else:
            rs_ctx = self.tracer.read_context(rs)
            span_cpid = trigger.cpid if trigger else (rs_ctx.cpid if rs_ctx else None)
            victims = sorted(pods, key=_pod_index, reverse=True)[: len(pods) - desired]
            with self.tracer.span(span_cpid, "reconcile-replicaset") as root:
                for pod in victims:
                    with self.tracer.span(span_cpid, "delete-pod", root):
                        self.store.delete("Pod", pod.name)
                self.tracer.log(
                    span_cpid, "deleted pods",
                    replicaset=rs_name, count=len(victims),
                )


class Scheduler(Controller):
    """Binds Pending Pods to nodes round-robin.

    Scheduling is observation work on a single object: it emits a span
    tagged with the Pod's CPID but never changes the trace context.
    """

    name = SERVICE_SCHEDULER
    kinds = ("Pod",)

    def __init__(
        self,
        store: ObjectStore,
        tracer: Tracer,
        node_names: tuple[str, ...] = ("node-0", "node-1", "node-2"),
    ):
        super().__init__(store)
        self.tracer = tracer
        self.node_names = node_names
        self._next = 0

    def _reconcile(self, event: WatchEvent) -> None:
        if event.type == DELETED:
            return
        pod = self.store.try_get("Pod", event.object.name)
        if pod is None or pod.spec.get("phase") != "Pending" or pod.spec.get("node_name"):
            return
        node = self.node_names[self._next % len(self.node_names)]
        self._next += 1
        pod.spec["node_name"] = node
        pod.spec["phase"] = "Scheduled"
        ctx = self.tracer.read_context(pod)
        with self.tracer.span(ctx.cpid if ctx else None, "schedule-pod"):
            self.store.update(pod, pod.resource_version)
        self.tracer.log(
            ctx.cpid if ctx else None, "scheduled pod",
            pod=pod.name, node=node,
        )


class KubeletSim(Controller):
    """Uninstrumented node agent: Scheduled Pods become Ready.

    Knows nothing about tracing.  Annotations pass through byte for
    byte, which is exactly how an instrumented cascade should survive a
    component outside the rollout.  The startup delay is injected as a
    sleep function so deterministic runs can advance a logical clock
    instead of wall time.
    """

    name = "kubelet"
    kinds = ("Pod",)

    def __init__(
        self,
        store: ObjectStore,
        sleep: Callable[[float], None],
        delay_seconds: float = 0.05,
    ):
        super().__init__(store)
        self._sleep = sleep
        self._delay = delay_seconds

    def _reconcile(self, event: WatchEvent) -> None:
        if event.type == DELETED:
            return
        pod = self.store.try_get("Pod", event.object.name)
        if pod is None or pod.spec.get("phase") != "Scheduled":
            return
        self._sleep(self._delay)
        pod.spec["phase"] = "Ready"
        self.store.update(pod, pod.resource_version)


class EndpointsController(Controller):
    """Maintains an Endpoints object per Service listing its Ready Pods.

    A Pod matches a Service when the label of the Deployment it descends
    from (Pod -> owning ReplicaSet -> owning Deployment) equals the
    Service selector.  The written Endpoints context merges the Service,
    every matching Ready Pod, and the existing Endpoints, in that order.
    """

    name = SERVICE_ENDPOINTS
    kinds = ("Service", "Pod", "Endpoints")

    def __init__(self, store: ObjectStore, tracer: Tracer):
        super().__init__(store)
        self.tracer = tracer

    def _reconcile(self, event: WatchEvent) -> None:
        if event.object.kind == "Service":
            services = [self.store.try_get("Service", event.object.name)]
        else:
            services = self.store.list("Service")
        for svc in services:
            if svc is not None:
                self._reconcile_service(svc, event)

    def _pod_label(self, pod: SimObject) -> str | None:
        rs = self.store.try_get("ReplicaSet", pod.spec.get("owner", ""))
        if rs is None:
            return None
        deployment = self.store.try_get("Deployment", rs.spec.get("owner", ""))
        return deployment.spec.get("label") if deployment else None

    def _reconcile_service(self, svc: SimObject, event: WatchEvent) -> None:
        selector = svc.spec.get("selector")
        ready = [
            p
            for p in self.store.list("Pod")
            if p.spec.get("phase") == "Ready" and self._pod_label(p) == selector
        ]
        desired = [p.name for p in ready]
        ep = self.store.try_get("Endpoints", svc.name)
        if ep is not None and ep.spec.get("pod_names") == desired:
            return

        ctx = self.tracer.merge_for_pass(
            [self.tracer.read_context(svc)]
            + [self.tracer.read_context(p) for p in ready]
            + ([self.tracer.read_context(ep)] if ep is not None else [])
        )
        trigger = self.tracer.read_context(event.object)
        span_cpid = trigger.cpid if trigger else (ctx.cpid if ctx else None)
        with self.tracer.span(span_cpid, "reconcile-endpoints") as root:
            if ep is None:
                new_ep = SimObject(
                    "Endpoints",
                    svc.name,
                    {"service": svc.name, "pod_names": desired},
                    inject({}, ctx) if ctx else {},
                )
                with self.tracer.span(ctx.cpid if ctx else span_cpid, "create-endpoints", root):
                    self.store.create(new_ep)
                self.tracer.log(
                    ctx.cpid if ctx else None, "created endpoints",
                    service=svc.name, pods=",".join(desired),
                )
            else:
                ep.spec["pod_names"] = desired
                if ctx:
                    ep.annotations = inject(ep.annotations, ctx)
                with self.tracer.span(ctx.cpid if ctx else span_cpid, "update-endpoints", root):
                    self.store.update(ep, ep.resource_version)
                self.tracer.log(
                    ctx.cpid if ctx else None, "updated endpoints",
                    service=svc.name, pods=",".join(desired),
                )
