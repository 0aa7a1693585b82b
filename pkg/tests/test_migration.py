import hashlib
import io

import pandas as pd
import pytest

from sheetguard.discovery import FileKind, InventoryRecord, ParseStatus, scan
from sheetguard.errors import EmptySelection, Locked, MigrationError, RepositoryUnreachable
from sheetguard.linkgraph import Edge, build_graph, make_graph
from sheetguard.migration import (
    LOG_CSV_COLUMNS,
    Layout,
    MigrationPlan,
    MigrationStatus,
    PlanEntry,
    execute,
    log_from_jsonl,
    log_to_csv,
    log_to_jsonl,
    plan_migration,
    remap_target,
)
from sheetguard.ooxml import list_link_targets
from sheetguard.repository import LocalRepositoryClient
from sheetguard.uris import path_to_uri

BASE = "http://sharepoint/repo"


def sha(data):
    return hashlib.sha256(data).hexdigest()


@pytest.fixture
def share(tmp_path, write_xlsx):
    """a -> b -> c (c unselected in most tests), plus a stand-alone d."""
    root = tmp_path / "share"
    write_xlsx(root / "desk" / "a.xlsx", {"S": {"A1": ("=[1]S!A1", 1)}}, links=["../models/b.xlsx"])
    write_xlsx(root / "models" / "b.xlsx", {"S": {"A1": 2}}, links=["c.xlsx"])
    write_xlsx(root / "models" / "c.xlsx", {"S": {"A1": 3}})
    write_xlsx(root / "d.xlsx", {"S": {"A1": 4}})
    uris = {p.stem: path_to_uri(p) for p in root.rglob("*.xlsx")}
    return root, uris, build_graph(scan([root]))


class TestPlan:
    def test_closure_warning(self, share):
        _, u, g = share
        plan = plan_migration(g, [u["a"]], BASE)
        assert [e.source_uri for e in plan.entries] == [u["a"]]
        assert plan.warnings == (f"{u['a']} depends on unselected {u['b']}",)

    def test_preserve_tree(self, share):
        root, u, g = share
        plan = plan_migration(g, [u["a"], u["b"]], BASE, Layout.preserve_tree(str(root)))
        assert {e.dest_path for e in plan.entries} == {"desk/a.xlsx", "models/b.xlsx"}
        assert plan.dest_url(plan.entries[0]).startswith(BASE + "/")

    def test_outside_tree_root(self, share):
        root, u, g = share
        with pytest.raises(MigrationError):
            plan_migration(g, [u["d"]], BASE, Layout.preserve_tree(str(root / "models")))

    def test_flatten_collisions(self):
        nodes = ["file:///x/report.xlsx", "file:///y/report.xlsx", "file:///z/report.xlsx"]
        plan = plan_migration(make_graph(nodes, []), nodes, BASE + "/")
        assert [e.dest_path for e in plan.entries] == ["report.xlsx", "report-2.xlsx", "report-3.xlsx"]
        assert plan.base_url == BASE

    def test_empty_selection(self, share):
        with pytest.raises(EmptySelection):
            plan_migration(share[2], [], BASE)

    def test_selection_outside_graph(self, share):
        with pytest.raises(MigrationError):
            plan_migration(share[2], ["file:///nowhere/x.xlsx"], BASE)

    def test_plan_json(self, share):
        root, u, g = share
        plan = plan_migration(g, [u["a"], u["b"]], BASE, Layout.preserve_tree(str(root)))
        assert MigrationPlan.from_json(plan.to_json()) == plan

    @pytest.mark.parametrize("text", [
        "{}",
        "not json",
        '{"base_url": "x", "entries": [{"source_uri": "a"}]}',
        '{"base_url": "x", "entries": [{"source_uri": "a", "dest_path": "p"}, {"source_uri": "b", "dest_path": "p"}]}',
    ])
    def test_plan_json_rejects(self, text):
        with pytest.raises(MigrationError):
            MigrationPlan.from_json(text)


class TestRemap:
    PLAN = MigrationPlan(BASE, (
        PlanEntry("file:///C:/finance/revenue.xlsx", "finance/revenue.xlsx"),
        PlanEntry("file:///C:/finance/inputs/fx.xlsx", "finance/inputs/fx rates.xlsx"),
    ))

    def test_absolute(self):
        got = remap_target("file:///C:/finance/revenue.xlsx", self.PLAN, "file:///C:/desk/a.xlsx")
        assert got == "http://sharepoint/repo/finance/revenue.xlsx"

    def test_windows_relative(self):
        got = remap_target("..\\inputs\\fx.xlsx", self.PLAN, "file:///C:/finance/models/a.xlsx")
        assert got == "http://sharepoint/repo/finance/inputs/fx%20rates.xlsx"

    def test_unselected(self):
        assert remap_target("other.xlsx", self.PLAN, "file:///C:/finance/a.xlsx") is None


class FailingRepo:
    def __init__(self, fail_on=()):
        self.fail_on = set(fail_on)
        self.written = {}

    def ping(self):
        pass

    def checkin(self, path, data, author, comment=""):
        if path in self.fail_on:
            raise Locked(path, "someone")
        self.written[path] = data
        return 1


class TestExecute:
    def test_chain_precedent_first(self, share, store):
        _, u, g = share
        plan = plan_migration(g, [u["a"], u["b"]], BASE)
        log = execute(plan, LocalRepositoryClient(store))

        assert [e.source_uri for e in log] == [u["b"], u["a"]]
        assert all(e.status is MigrationStatus.MIGRATED for e in log)
        b_entry, a_entry = log
        assert a_entry.rewrites == ((1, "../models/b.xlsx", f"{BASE}/b.xlsx"),)
        # b's link to unselected c stays as it was
        assert b_entry.rewrites == ()
        assert b_entry.sha256_after == b_entry.sha256_before

        stored_a = store.get("a.xlsx")
        assert list_link_targets(stored_a)[0][1] == f"{BASE}/b.xlsx"
        assert sha(stored_a) == a_entry.sha256_after
        assert store.latest("a.xlsx").version == 1

    def test_sources_untouched(self, share, store):
        root, u, g = share
        before = (root / "desk" / "a.xlsx").read_bytes()
        execute(plan_migration(g, [u["a"], u["b"]], BASE), LocalRepositoryClient(store))
        assert (root / "desk" / "a.xlsx").read_bytes() == before

    def test_second_run_creates_next_version(self, share, store):
        _, u, g = share
        plan = plan_migration(g, [u["d"]], BASE)
        execute(plan, LocalRepositoryClient(store))
        execute(plan, LocalRepositoryClient(store))
        assert store.latest("d.xlsx").version == 2

    def test_cycle(self, tmp_path, write_xlsx, store):
        root = tmp_path / "loop"
        write_xlsx(root / "p.xlsx", {"S": {}}, links=["q.xlsx"])
        write_xlsx(root / "q.xlsx", {"S": {}}, links=["p.xlsx"])
        g = build_graph(scan([root]))
        log = execute(plan_migration(g, g.nodes, BASE), LocalRepositoryClient(store))
        assert [e.source_uri.rsplit("/", 1)[-1] for e in log] == ["p.xlsx", "q.xlsx"]
        assert all(e.status is MigrationStatus.MIGRATED and "cycle" in e.detail for e in log)
        assert list_link_targets(store.get("p.xlsx"))[0][1] == f"{BASE}/q.xlsx"
        assert list_link_targets(store.get("q.xlsx"))[0][1] == f"{BASE}/p.xlsx"

    def test_unreachable_repository(self, share):
        _, u, g = share

        class Down(FailingRepo):
            def ping(self):
                raise ConnectionError("refused")

        repo = Down()
        with pytest.raises(RepositoryUnreachable):
            execute(plan_migration(g, [u["d"]], BASE), repo)
        assert repo.written == {}

    def test_unreadable_source_isolated(self, share):
        root, u, g = share
        plan = plan_migration(g, [u["a"], u["b"], u["d"]], BASE)
        (root / "models" / "b.xlsx").unlink()
        repo = FailingRepo()
        log = {e.source_uri: e for e in execute(plan, repo)}
        assert log[u["b"]].status is MigrationStatus.FAILED and log[u["b"]].detail
        assert log[u["a"]].status is MigrationStatus.SKIPPED
        assert u["b"] in log[u["a"]].detail
        assert log[u["d"]].status is MigrationStatus.MIGRATED
        assert set(repo.written) == {"d.xlsx"}

    def test_checkin_failure_skips_dependents(self, share):
        _, u, g = share
        repo = FailingRepo(fail_on={"b.xlsx"})
        log = {e.source_uri: e for e in execute(plan_migration(g, [u["a"], u["b"]], BASE), repo)}
        assert log[u["b"]].status is MigrationStatus.FAILED
        assert log[u["b"]].sha256_after is None
        assert log[u["a"]].status is MigrationStatus.SKIPPED

    def test_graph_survives_migration(self, share, store):
        _, u, g = share
        selected = [u["a"], u["b"], u["c"]]
        plan = plan_migration(g, selected, BASE)
        log = execute(plan, LocalRepositoryClient(store))
        relabel = {e.source_uri: e.dest_url for e in log}
        dest_path = {plan.dest_url(e): e.dest_path for e in plan.entries}

        records = [
            InventoryRecord(url, 0, None, None, "repo", FileKind.SPREADSHEET, ParseStatus.PARSED)
            for url in relabel.values()
        ]
        migrated = build_graph(records, loader=lambda url: store.get(dest_path[url]), exists=lambda _: False)
        expected = {
            Edge(relabel[e.source], relabel[e.target], e.link_index)
            for e in g.edges if e.source in relabel and e.target in relabel
        }
        assert set(migrated.edges) == expected
        assert migrated.broken == ()

    def test_log_complete_and_deterministic(self, share, tmp_path):
        _, u, g = share
        plan = plan_migration(g, list(u.values()), BASE)
        first = [e.to_dict() | {"timestamp": ""} for e in execute(plan, FailingRepo())]
        second = [e.to_dict() | {"timestamp": ""} for e in execute(plan, FailingRepo())]
        assert first == second
        assert sorted(d["source_uri"] for d in first) == sorted(u.values())


class TestLogFormats:
    def _log(self, share, store):
        _, u, g = share
        return execute(plan_migration(g, [u["a"], u["b"]], BASE), LocalRepositoryClient(store))

    def test_jsonl(self, share, store):
        log = self._log(share, store)
        text = log_to_jsonl(log)
        assert len(text.splitlines()) == 2
        assert log_from_jsonl(text) == log

    def test_csv(self, share, store):
        log = self._log(share, store)
        text = log_to_csv(log)
        assert text.splitlines()[0] == ",".join(LOG_CSV_COLUMNS)
        assert "\r\n" in text
        df = pd.read_csv(io.StringIO(text))
        assert len(df) == 2
        assert list(df["status"]) == ["Migrated", "Migrated"]
