import json
import random

import pytest

from sheetguard.discovery import scan
from sheetguard.linkgraph import (
    BrokenLink,
    DependencyGraph,
    Edge,
    NodeKind,
    annotate_dependents,
    build_graph,
    cycles,
    emit,
    make_graph,
    reverse,
)
from sheetguard.uris import path_to_uri


@pytest.fixture
def books(tmp_path, write_xlsx):
    def _make(links: dict[str, list[str]]):
        root = tmp_path / "books"
        for name, targets in links.items():
            write_xlsx(root / name, {"S": {"A1": 1}}, links=targets)
        return root, {name: path_to_uri(root / name) for name in links}
    return _make


class TestBuildGraph:
    def test_chain(self, books):
        root, uri = books({"a.xlsx": ["b.xlsx"], "b.xlsx": ["c.xlsx"], "c.xlsx": []})
        g = build_graph(scan([root]))
        assert g.edges == (Edge(uri["a.xlsx"], uri["b.xlsx"], 1), Edge(uri["b.xlsx"], uri["c.xlsx"], 1))
        assert g.broken == ()
        assert cycles(g) == []

    def test_target_with_hash_in_name(self, books):
        root, uri = books({"a.xlsx": ["budget%231.xlsx"], "budget#1.xlsx": []})
        g = build_graph(scan([root]))
        assert g.edges == (Edge(uri["a.xlsx"], uri["budget#1.xlsx"], 1),)
        assert g.broken == ()

    def test_missing_target_is_broken(self, books):
        root, uri = books({"a.xlsx": ["d.xlsx"]})
        g = build_graph(scan([root]))
        assert [(b.source, b.target, b.link_index) for b in g.broken] == [(uri["a.xlsx"], "d.xlsx", 1)]
        assert g.broken_targets() == {uri["a.xlsx"]: ["d.xlsx"]}
        assert all(b.target not in g.nodes for b in g.broken)

    def test_cycle(self, books):
        root, uri = books({"a.xlsx": ["b.xlsx"], "b.xlsx": ["a.xlsx"]})
        g = build_graph(scan([root]))
        assert len(g.edges) == 2
        assert cycles(g) == [[uri["a.xlsx"], uri["b.xlsx"]]]

    def test_existing_non_spreadsheet_is_other_node(self, books):
        root, uri = books({"a.xlsx": ["feeds/prices.csv"]})
        (root / "feeds").mkdir()
        (root / "feeds" / "prices.csv").write_text("a,b\n")
        g = build_graph(scan([root]))
        target = path_to_uri(root / "feeds" / "prices.csv")
        assert target in g.nodes and g.kind(target) is NodeKind.OTHER
        assert g.precedents(uri["a.xlsx"]) == [target]

    def test_relative_and_absolute_forms_meet(self, books, tmp_path):
        b_path = tmp_path / "books" / "b.xlsx"
        root, uri = books({"a.xlsx": ["./b.xlsx", str(b_path)], "b.xlsx": []})
        g = build_graph(scan([root]))
        assert {e.target for e in g.edges} == {uri["b.xlsx"]}
        assert [e.link_index for e in g.edges] == [1, 2]

    def test_unreadable_source(self, books):
        root, uri = books({"a.xlsx": ["b.xlsx"], "b.xlsx": []})
        records = scan([root])

        def loader(u):
            raise OSError("share offline")

        g = build_graph(records, loader=loader)
        assert g.edges == ()
        assert {b.source for b in g.broken} == set(uri.values())
        assert all(b.target == "" and "share offline" in b.detail for b in g.broken)

    def test_order_insensitive_and_link_count(self, books):
        root, _ = books({
            "a.xlsx": ["b.xlsx", "c.xlsx", "zz.xlsx"],
            "b.xlsx": ["c.xlsx"],
            "c.xlsx": ["a.xlsx", "gone/x.xlsx"],
        })
        records = scan([root])
        g = build_graph(records)
        assert build_graph(list(reversed(records))) == g
        total_links = sum(r.stats.external_link_count for r in records)
        assert len(g.edges) + len(g.broken) == total_links == 6


def _brute_force_cycles(nodes, edges):
    reach = {n: {n} for n in nodes}
    changed = True
    while changed:
        changed = False
        for s, t in edges:
            for n in nodes:
                if s in reach[n] and t not in reach[n]:
                    reach[n].add(t)
                    changed = True
    groups = set()
    for n in nodes:
        members = tuple(sorted(m for m in nodes if m in reach[n] and n in reach[m]))
        if len(members) > 1 or (n, n) in edges:
            groups.add(members)
    return sorted(list(g) for g in groups)


class TestCycles:
    def test_random_dag_has_none(self):
        rng = random.Random(50)
        nodes = [f"file:///n{i:02d}.xlsx" for i in range(50)]
        edges = {(nodes[i], nodes[j]) for i in range(50) for j in range(i + 1, 50) if rng.random() < 0.08}
        g = make_graph(nodes, [Edge(s, t, 1) for s, t in edges])
        assert cycles(g) == [] == _brute_force_cycles(nodes, edges)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_graph_against_brute_force(self, seed):
        rng = random.Random(seed)
        nodes = [f"file:///n{i:02d}.xlsx" for i in range(15)]
        edges = {(rng.choice(nodes), rng.choice(nodes)) for _ in range(20)}
        g = make_graph(nodes, [Edge(s, t, 1) for s, t in edges])
        assert cycles(g) == _brute_force_cycles(nodes, edges)
        assert cycles(reverse(g)) == cycles(g)

    def test_self_loop(self):
        g = make_graph(["file:///a.xlsx"], [Edge("file:///a.xlsx", "file:///a.xlsx", 1)])
        assert cycles(g) == [["file:///a.xlsx"]]


class TestAnnotate:
    def test_dependents(self, books):
        root, uri = books({"a.xlsx": ["c.xlsx"], "b.xlsx": ["c.xlsx", "c.xlsx"], "c.xlsx": []})
        records = scan([root])
        annotated = {r.uri: r.dependents for r in annotate_dependents(records, build_graph(records))}
        assert annotated == {uri["a.xlsx"]: 0, uri["b.xlsx"]: 0, uri["c.xlsx"]: 2}


class TestEmit:
    def _pair(self):
        return make_graph(["file:///d/a.xlsx", "file:///d/b.xlsx"], [Edge("file:///d/a.xlsx", "file:///d/b.xlsx", 1)])

    def test_empty_graph(self):
        dot = emit(DependencyGraph(), "dot")
        assert dot.startswith("digraph") and "->" not in dot
        assert json.loads(emit(DependencyGraph(), "json")) == {"nodes": [], "edges": [], "broken": []}

    def test_one_edge(self):
        dot = emit(self._pair(), "dot")
        assert sum("->" in line for line in dot.splitlines()) == 1
        assert 'label="a.xlsx"' in dot

    def test_broken_targets_drawn_dashed(self):
        g = make_graph(["file:///d/a.xlsx"], [], [BrokenLink("file:///d/a.xlsx", "missing.xlsx", 1)])
        dot = emit(g, "dot")
        assert "diamond" in dot and "dashed" in dot and "missing.xlsx" in dot

    def test_deterministic(self):
        assert emit(self._pair(), "dot") == emit(self._pair(), "dot")
        assert emit(self._pair(), "json") == emit(self._pair(), "json")

    def test_json_reload(self):
        g = make_graph(
            ["file:///d/a.xlsx", "file:///d/p.csv"],
            [Edge("file:///d/a.xlsx", "file:///d/p.csv", 2)],
            [BrokenLink("file:///d/a.xlsx", "x.xlsx", 1, "resolves to file:///d/x.xlsx")],
            {"file:///d/p.csv": NodeKind.OTHER},
        )
        assert DependencyGraph.from_dict(json.loads(emit(g, "json"))) == g

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit(DependencyGraph(), "svg")
