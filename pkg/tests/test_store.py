"""Versioned object store: optimistic concurrency, watches, audits."""

import pytest

from cascadetrace.sim.store import (
    ADDED,
    DELETED,
    MODIFIED,
    Conflict,
    NotFound,
    ObjectStore,
    SimObject,
)


def make(kind="Deployment", name="web", **spec):
    return SimObject(kind, name, dict(spec), {})


class TestVersioning:
    def test_create_assigns_version_one(self):
        store = ObjectStore()
        obj = store.create(make(replicas=1))
        assert obj.resource_version == 1

    def test_create_existing_conflicts(self):
        store = ObjectStore()
        store.create(make())
        with pytest.raises(Conflict):
            store.create(make())

    def test_update_bumps_version(self):
        store = ObjectStore()
        store.create(make(replicas=1))
        obj = store.get("Deployment", "web")
        obj.spec["replicas"] = 3
        updated = store.update(obj, obj.resource_version)
        assert updated.resource_version == 2
        assert store.get("Deployment", "web").spec["replicas"] == 3

    def test_stale_update_conflicts(self):
        store = ObjectStore()
        store.create(make(replicas=1))
        stale = store.get("Deployment", "web")
        fresh = store.get("Deployment", "web")
        fresh.spec["replicas"] = 2
        store.update(fresh, fresh.resource_version)
        stale.spec["replicas"] = 9
        with pytest.raises(Conflict):
            store.update(stale, stale.resource_version)

    def test_get_missing_raises_try_get_returns_none(self):
        store = ObjectStore()
        with pytest.raises(NotFound):
            store.get("Deployment", "nope")
        assert store.try_get("Deployment", "nope") is None

    def test_update_and_delete_missing_raise(self):
        store = ObjectStore()
        with pytest.raises(NotFound):
            store.update(make(), 1)
        with pytest.raises(NotFound):
            store.delete("Deployment", "web")

    def test_reads_are_isolated_copies(self):
        store = ObjectStore()
        store.create(make(replicas=1))
        leaked = store.get("Deployment", "web")
        leaked.spec["replicas"] = 99
        leaked.annotations["x"] = "y"
        clean = store.get("Deployment", "web")
        assert clean.spec == {"replicas": 1}
        assert clean.annotations == {}

    def test_list_is_name_sorted_per_kind(self):
        store = ObjectStore()
        for name in ("b", "a", "c"):
            store.create(SimObject("Pod", name, {}, {}))
        store.create(make())
        assert [p.name for p in store.list("Pod")] == ["a", "b", "c"]


class TestWatches:
    def test_watch_filters_by_kind(self):
        store = ObjectStore()
        watch = store.watch("Pod")
        store.create(make())
        store.create(SimObject("Pod", "p1", {}, {}))
        event = watch.get(block=False)
        assert event.type == ADDED
        assert event.object.name == "p1"
        assert watch.get(block=False) is None

    def test_event_sequence_per_object(self):
        store = ObjectStore()
        watch = store.watch("Pod")
        store.create(SimObject("Pod", "p1", {"phase": "Pending"}, {}))
        obj = store.get("Pod", "p1")
        obj.spec["phase"] = "Ready"
        store.update(obj, obj.resource_version)
        store.delete("Pod", "p1")
        kinds = []
        while (event := watch.get(block=False)) is not None:
            kinds.append((event.type, event.object.resource_version))
        assert kinds == [(ADDED, 1), (MODIFIED, 2), (DELETED, 2)]

    def test_watch_snapshot_is_mutation_proof(self):
        store = ObjectStore()
        watch = store.watch("Pod")
        store.create(SimObject("Pod", "p1", {"phase": "Pending"}, {}))
        obj = store.get("Pod", "p1")
        obj.spec["phase"] = "Ready"
        store.update(obj, obj.resource_version)
        first = watch.get(block=False)
        assert first.object.spec["phase"] == "Pending"

    def test_pending_events_counts_all_watches(self):
        store = ObjectStore()
        store.watch("Pod")
        store.watch("Pod", "Deployment")
        assert store.pending_events() == 0
        store.create(SimObject("Pod", "p1", {}, {}))
        assert store.pending_events() == 2

    def test_blocking_get_times_out(self):
        store = ObjectStore()
        watch = store.watch("Pod")
        assert watch.get(block=True, timeout=0.05) is None


class TestAudits:
    def test_audit_sees_every_commit(self):
        seen = []
        store = ObjectStore()
        store.add_audit(lambda obj: seen.append((obj.kind, obj.name, obj.resource_version)))
        store.create(make(replicas=1))
        obj = store.get("Deployment", "web")
        obj.spec["replicas"] = 2
        store.update(obj, obj.resource_version)
        assert seen == [("Deployment", "web", 1), ("Deployment", "web", 2)]

    def test_audit_mutations_do_not_leak(self):
        store = ObjectStore()

        def vandal(obj):
            obj.annotations["tampered"] = "yes"

        store.add_audit(vandal)
        store.create(make())
        assert store.get("Deployment", "web").annotations == {}
