"""Controller reconcile passes and their instrumentation."""

from collections import Counter
from types import SimpleNamespace

import pytest

from cascadetrace import (
    CpidGenerator,
    LogicalClock,
    ServerConfig,
    TraceEmitter,
    TraceStore,
    extract,
)
from cascadetrace.sim.controllers import (
    DeploymentController,
    EndpointsController,
    KubectlSim,
    KubeletSim,
    ReplicaSetController,
    RunLog,
    Scheduler,
    Tracer,
)
from cascadetrace.sim.store import (
    ADDED,
    MODIFIED,
    Conflict,
    ObjectStore,
    SimObject,
    WatchEvent,
)


@pytest.fixture
def h():
    sink = TraceStore(ServerConfig())
    store = ObjectStore()
    clock = LogicalClock()
    gen = CpidGenerator(seed=11)
    emitter = TraceEmitter(sink)
    counters = Counter()
    runlog = RunLog(None, clock)

    def tracer(service):
        return Tracer(service, emitter, gen, clock, 5, runlog, counters)

    def mergelogs():
        emitter.flush()
        return sink.mergelogs()

    def spans():
        emitter.flush()
        return sink.spans()

    yield SimpleNamespace(
        sink=sink,
        store=store,
        tracer=tracer,
        mergelogs=mergelogs,
        spans=spans,
        counters=counters,
    )
    emitter.close()


def ctx_of(obj, limit=5):
    return extract(obj.annotations, limit=limit)


def modified(obj):
    return WatchEvent(MODIFIED, obj)


class TestKubectl:
    def test_create_registers_fresh_root(self, h):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        obj, root = kubectl.apply("Deployment", "web", {"replicas": 2})
        ctx = ctx_of(obj)
        assert root == ctx.cpid
        assert ctx.ancestors == ()
        logs = h.mergelogs()
        assert [(m.new_cpid, m.source_cpids) for m in logs] == [(root, ())]
        assert [(s.service, s.name) for s in h.spans()] == [
            ("kubectl", "create-object"),
            ("kubectl", "apply"),
        ]

    def test_update_merges_old_context_without_registration(self, h):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        _, first = kubectl.apply("Deployment", "web", {"replicas": 2})
        obj, second = kubectl.apply("Deployment", "web", {"replicas": 5})
        assert obj.spec == {"replicas": 5}

        ctx = ctx_of(obj)
        assert ctx.cpid not in (first, second)
        assert ctx.ancestors == (first, second)
        logs = h.mergelogs()
        # one registration for the create, one merge for the update:
        # the merge itself introduces the new root, so only two records
        assert len(logs) == 2
        assert logs[1].new_cpid == ctx.cpid
        assert logs[1].source_cpids == (first, second)

    def test_untraced_apply_touches_nothing(self, h):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        obj, root = kubectl.apply("Deployment", "web", {"replicas": 2}, traced=False)
        assert root is None
        assert obj.annotations == {}
        assert h.mergelogs() == []
        assert h.spans() == []

    def test_traced_update_of_untraced_object_registers(self, h):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        kubectl.apply("Deployment", "web", {"replicas": 2}, traced=False)
        obj, root = kubectl.apply("Deployment", "web", {"replicas": 3})
        assert ctx_of(obj).cpid == root
        assert [m.source_cpids for m in h.mergelogs()] == [()]


class TestDeploymentController:
    def seed_deployment(self, h, replicas=2):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        obj, root = kubectl.apply("Deployment", "web", {"replicas": replicas})
        return kubectl, obj, root

    def test_creates_replicaset_carrying_the_root(self, h):
        _, deployment, root = self.seed_deployment(h)
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        dc.reconcile(WatchEvent(ADDED, deployment))
        rs = h.store.get("ReplicaSet", "web-rs")
        assert rs.spec == {"replicas": 2, "owner": "web"}
        assert ctx_of(rs).cpid == root
        # continuation, not a merge: no controller mergelog
        assert [m.new_cpid for m in h.mergelogs()] == [root]
        assert ("deployment-controller", "create-replicaset") in [
            (s.service, s.name) for s in h.spans()
        ]

    def test_update_absorbs_stale_replicaset_context(self, h):
        kubectl, deployment, root = self.seed_deployment(h)
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        dc.reconcile(WatchEvent(ADDED, deployment))
        updated, _ = kubectl.apply("Deployment", "web", {"replicas": 4})
        dc.reconcile(modified(updated))
        rs = h.store.get("ReplicaSet", "web-rs")
        assert rs.spec["replicas"] == 4
        assert ctx_of(rs).cpid == ctx_of(updated).cpid
        # downstream pass collapsed to one root: kubectl's two records only
        assert len(h.mergelogs()) == 2
        assert h.counters.get("deployment-controller", 0) == 0

    def test_zero_ancestor_window_forces_controller_merge(self, h):
        sink = TraceStore(ServerConfig(ancestor_limit=0))
        store = ObjectStore()
        emitter = TraceEmitter(sink)
        counters = Counter()
        clock = LogicalClock()
        gen = CpidGenerator(seed=12)
        runlog = RunLog(None, clock)

        def tracer(service):
            return Tracer(service, emitter, gen, clock, 0, runlog, counters)

        kubectl = KubectlSim(store, tracer("kubectl"))
        dc = DeploymentController(store, tracer("deployment-controller"))
        first, alpha = kubectl.apply("Deployment", "web", {"replicas": 2})
        dc.reconcile(WatchEvent(ADDED, first))
        updated, _ = kubectl.apply("Deployment", "web", {"replicas": 4})
        dc.reconcile(modified(updated))
        emitter.flush()
        emitter.close()

        assert counters["deployment-controller"] == 1
        merge_log = sink.mergelogs()[-1]
        assert set(merge_log.source_cpids) == {alpha, extract(updated.annotations, limit=0).cpid}

    def test_no_write_pass_emits_nothing(self, h):
        _, deployment, root = self.seed_deployment(h)
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        dc.reconcile(WatchEvent(ADDED, deployment))
        before_logs = len(h.mergelogs())
        before_spans = len(h.spans())
        rs_version = h.store.get("ReplicaSet", "web-rs").resource_version
        dc.reconcile(modified(h.store.get("ReplicaSet", "web-rs")))
        assert len(h.mergelogs()) == before_logs
        assert len(h.spans()) == before_spans
        assert h.store.get("ReplicaSet", "web-rs").resource_version == rs_version

    def test_conflict_retry_succeeds_after_transient_failures(self, h):
        _, deployment, root = self.seed_deployment(h)
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        real_update = h.store.update
        failures = iter([Conflict, Conflict])

        def flaky(obj, expected_version):
            exc = next(failures, None)
            if exc is not None:
                raise exc("injected")
            return real_update(obj, expected_version)

        h.store.update = flaky
        h.store.create(SimObject("ReplicaSet", "web-rs", {"replicas": 1, "owner": "web"}, {}))
        dc.reconcile(WatchEvent(ADDED, deployment))
        assert h.store.get("ReplicaSet", "web-rs").spec["replicas"] == 2

    def test_gives_up_after_bounded_conflicts(self, h):
        _, deployment, root = self.seed_deployment(h)
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        attempts = []

        def always_conflict(obj, expected_version=None):
            attempts.append(obj.name)
            raise Conflict("always")

        h.store.create(SimObject("ReplicaSet", "web-rs", {"replicas": 1, "owner": "web"}, {}))
        h.store.update = always_conflict
        dc.reconcile(WatchEvent(ADDED, deployment))  # must not raise
        assert len(attempts) == 5


class TestReplicaSetController:
    def seed(self, h, replicas=3):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        deployment, root = kubectl.apply("Deployment", "web", {"replicas": replicas})
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        dc.reconcile(WatchEvent(ADDED, deployment))
        rc = ReplicaSetController(h.store, h.tracer("replicaset-controller"))
        rc.reconcile(WatchEvent(ADDED, h.store.get("ReplicaSet", "web-rs")))
        return kubectl, dc, rc, root

    def test_scale_up_creates_named_pods_with_merged_context(self, h):
        _, _, _, root = self.seed(h, replicas=3)
        pods = h.store.list("Pod")
        assert [p.name for p in pods] == ["web-rs-pod-0", "web-rs-pod-1", "web-rs-pod-2"]
        assert all(p.spec == {"owner": "web-rs", "phase": "Pending"} for p in pods)
        assert all(ctx_of(p).cpid == root for p in pods)
        assert h.counters.get("replicaset-controller", 0) == 0

    def test_scale_down_deletes_newest_without_merging(self, h):
        kubectl, dc, rc, root = self.seed(h, replicas=3)
        updated, _ = kubectl.apply("Deployment", "web", {"replicas": 1})
        dc.reconcile(modified(updated))
        before = len(h.mergelogs())
        rc.reconcile(modified(h.store.get("ReplicaSet", "web-rs")))
        assert [p.name for p in h.store.list("Pod")] == ["web-rs-pod-0"]
        # deletions carry nothing forward: no merge, no mergelog
        assert len(h.mergelogs()) == before
        # survivor keeps its creation-time context
        assert ctx_of(h.store.get("Pod", "web-rs-pod-0")).cpid == root

    def test_recreated_pods_take_fresh_indexes(self, h):
        kubectl, dc, rc, _ = self.seed(h, replicas=3)
        for replicas in (1, 3):
            updated, _ = kubectl.apply("Deployment", "web", {"replicas": replicas})
            dc.reconcile(modified(updated))
            rc.reconcile(modified(h.store.get("ReplicaSet", "web-rs")))
        assert [p.name for p in h.store.list("Pod")] == [
            "web-rs-pod-0",
            "web-rs-pod-1",
            "web-rs-pod-2",
        ]

    def test_no_op_when_counts_match(self, h):
        _, _, rc, _ = self.seed(h, replicas=2)
        before = len(h.spans())
        rc.reconcile(modified(h.store.get("ReplicaSet", "web-rs")))
        assert len(h.spans()) == before


class TestScheduler:
    def make_pod(self, h, name, **spec):
        base = {"owner": "web-rs", "phase": "Pending"}
        base.update(spec)
        return h.store.create(SimObject("Pod", name, base, {"k": "v"}))

    def test_round_robin_assignment(self, h):
        sched = Scheduler(h.store, h.tracer("scheduler"), ("node-0", "node-1"))
        for i in range(3):
            pod = self.make_pod(h, f"p{i}")
            sched.reconcile(WatchEvent(ADDED, pod))
        assignments = [h.store.get("Pod", f"p{i}").spec["node_name"] for i in range(3)]
        assert assignments == ["node-0", "node-1", "node-0"]
        assert all(
            h.store.get("Pod", f"p{i}").spec["phase"] == "Scheduled" for i in range(3)
        )

    def test_annotations_untouched_and_no_mergelog(self, h):
        sched = Scheduler(h.store, h.tracer("scheduler"))
        pod = self.make_pod(h, "p0")
        sched.reconcile(WatchEvent(ADDED, pod))
        assert h.store.get("Pod", "p0").annotations == {"k": "v"}
        assert h.mergelogs() == []

    def test_skips_non_pending_pods(self, h):
        sched = Scheduler(h.store, h.tracer("scheduler"))
        pod = self.make_pod(h, "p0", phase="Ready")
        version = pod.resource_version
        sched.reconcile(WatchEvent(ADDED, pod))
        assert h.store.get("Pod", "p0").resource_version == version


class TestKubelet:
    def test_marks_scheduled_pods_ready_preserving_annotations(self, h):
        slept = []
        kubelet = KubeletSim(h.store, slept.append, delay_seconds=0.25)
        annotations = {
            "cascade-trace/cpid": "bdd640fb-0667-4ad1-9c80-317fa3b1799d",
            "cascade-trace/ancestors": "",
            "custom": "kept",
        }
        pod = h.store.create(
            SimObject("Pod", "p0", {"owner": "rs", "phase": "Scheduled"}, annotations)
        )
        kubelet.reconcile(WatchEvent(ADDED, pod))
        after = h.store.get("Pod", "p0")
        assert after.spec["phase"] == "Ready"
        assert after.annotations == annotations
        assert slept == [0.25]
        assert h.mergelogs() == []
        assert h.spans() == []

    def test_ignores_pending_pods(self, h):
        kubelet = KubeletSim(h.store, lambda s: None)
        pod = h.store.create(SimObject("Pod", "p0", {"phase": "Pending"}, {}))
        kubelet.reconcile(WatchEvent(ADDED, pod))
        assert h.store.get("Pod", "p0").spec["phase"] == "Pending"


class TestEndpointsController:
    def seed_service(self, h):
        kubectl = KubectlSim(h.store, h.tracer("kubectl"))
        deployment, d_root = kubectl.apply("Deployment", "web", {"replicas": 1, "label": "app=web"})
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        dc.reconcile(WatchEvent(ADDED, deployment))
        rc = ReplicaSetController(h.store, h.tracer("replicaset-controller"))
        rc.reconcile(WatchEvent(ADDED, h.store.get("ReplicaSet", "web-rs")))
        svc, s_root = kubectl.apply("Service", "web-svc", {"selector": "app=web"})
        ec = EndpointsController(h.store, h.tracer("endpoints-controller"))
        return ec, svc, d_root, s_root

    def ready(self, h, name):
        pod = h.store.get("Pod", name)
        pod.spec["phase"] = "Ready"
        return h.store.update(pod, pod.resource_version)

    def test_no_ready_pods_creates_empty_endpoints_without_merge(self, h):
        ec, svc, _, s_root = self.seed_service(h)
        ec.reconcile(WatchEvent(ADDED, svc))
        ep = h.store.get("Endpoints", "web-svc")
        assert ep.spec == {"service": "web-svc", "pod_names": []}
        assert ctx_of(ep).cpid == s_root
        assert h.counters.get("endpoints-controller", 0) == 0

    def test_ready_pod_joins_and_contexts_merge(self, h):
        ec, svc, d_root, s_root = self.seed_service(h)
        ec.reconcile(WatchEvent(ADDED, svc))
        pod = self.ready(h, "web-rs-pod-0")
        ec.reconcile(modified(pod))
        ep = h.store.get("Endpoints", "web-svc")
        assert ep.spec["pod_names"] == ["web-rs-pod-0"]
        merge_logs = [m for m in h.mergelogs() if len(m.source_cpids) == 2]
        assert len(merge_logs) == 1
        assert set(merge_logs[0].source_cpids) == {d_root, s_root}
        assert ctx_of(ep).cpid == merge_logs[0].new_cpid

    def test_stable_membership_is_a_no_op(self, h):
        ec, svc, _, _ = self.seed_service(h)
        ec.reconcile(WatchEvent(ADDED, svc))
        pod = self.ready(h, "web-rs-pod-0")
        ec.reconcile(modified(pod))
        version = h.store.get("Endpoints", "web-svc").resource_version
        logs = len(h.mergelogs())
        ec.reconcile(modified(h.store.get("Endpoints", "web-svc")))
        ec.reconcile(modified(h.store.get("Pod", "web-rs-pod-0")))
        assert h.store.get("Endpoints", "web-svc").resource_version == version
        assert len(h.mergelogs()) == logs

    def test_selector_mismatch_excluded(self, h):
        ec, svc, _, _ = self.seed_service(h)
        h.store.create(SimObject("Pod", "stray", {"owner": "other-rs", "phase": "Ready"}, {}))
        ec.reconcile(WatchEvent(ADDED, svc))
        assert h.store.get("Endpoints", "web-svc").spec["pod_names"] == []


class TestMalformedContextTolerance:
    def test_controller_treats_garbage_as_untraced(self, h):
        h.store.create(
            SimObject(
                "Deployment",
                "web",
                {"replicas": 1},
                {"cascade-trace/cpid": "corrupt!"},
            )
        )
        dc = DeploymentController(h.store, h.tracer("deployment-controller"))
        dc.reconcile(WatchEvent(ADDED, h.store.get("Deployment", "web")))
        rs = h.store.get("ReplicaSet", "web-rs")
        assert rs.spec["replicas"] == 1
        assert "cascade-trace/cpid" not in rs.annotations
        assert h.mergelogs() == []
