"""
LINKGRAPH Module
---------------------------------------------------------
Directed dependency graph over workbooks connected by external links.

Edges point from the dependent workbook to its precedent ("A depends
on B"). Nodes are canonical URIs. Link targets that resolve to an
existing file outside the scanned set become nodes of kind Other;
targets that resolve to nothing are recorded as broken.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping

import graphviz
import networkx as nx

from sheetguard.discovery import InventoryRecord, ParseStatus
from sheetguard.errors import PackageError
from sheetguard.ooxml import list_link_targets
from sheetguard.uris import canonical_uri, resolve_target, uri_basename, uri_to_path

logger = logging.getLogger(__name__)

Loader = Callable[[str], bytes]


class NodeKind(str, Enum):
    SPREADSHEET = "Spreadsheet"
    OTHER = "Other"


@dataclass(frozen=True, order=True)
class Edge:
    source: str  # dependent
    target: str  # precedent
    link_index: int


@dataclass(frozen=True, order=True)
class BrokenLink:
    source: str
    target: str
    link_index: int = 0  # 0 when the source itself could not be read
    detail: str = ""


@dataclass(frozen=True)
class DependencyGraph:
    nodes: tuple[str, ...] = ()
    edges: tuple[Edge, ...] = ()
    broken: tuple[BrokenLink, ...] = ()
    node_kinds: Mapping[str, NodeKind] = field(default_factory=dict)

    def kind(self, uri: str) -> NodeKind:
        return self.node_kinds.get(uri, NodeKind.SPREADSHEET)

    def precedents(self, uri: str) -> list[str]:
        return sorted({e.target for e in self.edges if e.source == uri})

    def dependents(self, uri: str) -> list[str]:
        return sorted({e.source for e in self.edges if e.target == uri})

    def broken_targets(self) -> dict[str, list[str]]:
        """source uri -> raw broken targets (for BrokenLink findings)"""
        out: dict[str, list[str]] = {}
        for b in self.broken:
            if b.target:
                out.setdefault(b.source, []).append(b.target)
        return out

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from((e.source, e.target) for e in self.edges)
        return g

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"uri": n, "kind": self.kind(n).value, "label": uri_basename(n)}
                for n in self.nodes
            ],
            "edges": [
                {"from": e.source, "to": e.target, "link_index": e.link_index}
                for e in self.edges
            ],
            "broken": [
                {"from": b.source, "target": b.target, "link_index": b.link_index, "detail": b.detail}
                for b in self.broken
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DependencyGraph":
        return make_graph(
            nodes=[n["uri"] for n in doc.get("nodes", [])],
            edges=[Edge(e["from"], e["to"], int(e["link_index"])) for e in doc.get("edges", [])],
            broken=[
                BrokenLink(b["from"], b["target"], int(b.get("link_index", 0)), b.get("detail", ""))
                for b in doc.get("broken", [])
            ],
            node_kinds={n["uri"]: NodeKind(n.get("kind", "Spreadsheet")) for n in doc.get("nodes", [])},
        )


def make_graph(
    nodes: Iterable[str],
    edges: Iterable[Edge],
    broken: Iterable[BrokenLink] = (),
    node_kinds: Mapping[str, NodeKind] | None = None,
) -> DependencyGraph:
    """Canonical (sorted, de-duplicated) graph."""
    node_set = set(nodes)
    kinds = {n: k for n, k in (node_kinds or {}).items() if n in node_set and k is not NodeKind.SPREADSHEET}
    return DependencyGraph(
        nodes=tuple(sorted(node_set)),
        edges=tuple(sorted(set(edges))),
        broken=tuple(sorted(set(broken))),
        node_kinds=kinds,
    )


def read_file_uri(uri: str) -> bytes:
    path = uri_to_path(uri)
    if path is None:
        raise OSError(f"no loader for non-file URI {uri}")
    return path.read_bytes()


def _exists(uri: str) -> bool:
    path = uri_to_path(uri)
    return path is not None and path.is_file()


def build_graph(
    records: Iterable[InventoryRecord],
    loader: Loader | None = None,
    exists: Callable[[str], bool] | None = None,
) -> DependencyGraph:
    """
    Build the dependency graph from inventory records.

    Args:
        records: discovery output; spreadsheet kinds become nodes
        loader: uri -> package bytes (defaults to reading file URIs)
        exists: uri -> bool for targets outside the record set

    Unreadable sources become broken entries with an empty target and a
    detail message; they never abort the build.
    """
    load = loader or read_file_uri
    exists = exists or _exists
    spreadsheets = sorted(
        {canonical_uri(r.uri): r for r in records if r.kind.is_spreadsheet}.items()
    )
    nodes = {uri for uri, _ in spreadsheets}
    kinds: dict[str, NodeKind] = {}
    edges: list[Edge] = []
    broken: list[BrokenLink] = []

    for uri, record in spreadsheets:
        if record.parse_status is not ParseStatus.PARSED:
            continue
        try:
            links = list_link_targets(load(uri))
        except (PackageError, OSError) as e:
            logger.warning(f"[WARN] [GRAPH] cannot read links of {uri}: {e}")
            broken.append(BrokenLink(uri, "", 0, f"unreadable: {e}"))
            continue
        for index, target, _mode in links:
            resolved = resolve_target(target, uri)
            if resolved in nodes:
                edges.append(Edge(uri, resolved, index))
            elif exists(resolved):
                nodes.add(resolved)
                kinds[resolved] = NodeKind.OTHER
                edges.append(Edge(uri, resolved, index))
            else:
                broken.append(BrokenLink(uri, target, index, f"resolves to {resolved}"))

    graph = make_graph(nodes, edges, broken, kinds)
    logger.info(
        f"[GRAPH] {len(graph.nodes)} nodes, {len(graph.edges)} edges, "
        f"{len(graph.broken)} broken links"
    )
    return graph


def cycles(g: DependencyGraph) -> list[list[str]]:
    """Strongly connected components of size >= 2, plus self-loops, each sorted."""
    nxg = g.to_networkx()
    found = []
    for component in nx.strongly_connected_components(nxg):
        members = sorted(component)
        if len(members) > 1 or nxg.has_edge(members[0], members[0]):
            found.append(members)
    return sorted(found)


def reverse(g: DependencyGraph) -> DependencyGraph:
    return make_graph(
        g.nodes,
        (Edge(e.target, e.source, e.link_index) for e in g.edges),
        g.broken,
        g.node_kinds,
    )


def annotate_dependents(records: Iterable[InventoryRecord], g: DependencyGraph) -> list[InventoryRecord]:
    """Fill each record's `dependents` with its count of distinct inbound workbooks."""
    inbound: dict[str, set[str]] = {}
    for e in g.edges:
        if e.source != e.target:
            inbound.setdefault(e.target, set()).add(e.source)
    return [
        replace(r, dependents=len(inbound.get(canonical_uri(r.uri), ())))
        for r in records
    ]


def emit(g: DependencyGraph, fmt: str = "dot") -> str:
    """
    Render the graph as Graphviz DOT or JSON.

    DOT: nodes labeled by basename; solid edges for resolved links; dashed
    red edges to red diamond phantom nodes for broken targets.
    """
    if fmt == "json":
        return json.dumps(g.to_dict(), indent=2, ensure_ascii=False) + "\n"
    if fmt != "dot":
        raise ValueError(f"unsupported graph format: {fmt}")

    dot = graphviz.Digraph("dependencies", graph_attr={"rankdir": "LR"})
    ids = {uri: f"n{i}" for i, uri in enumerate(g.nodes)}
    for uri in g.nodes:
        attrs = {"label": uri_basename(uri), "tooltip": uri}
        if g.kind(uri) is NodeKind.OTHER:
            attrs["shape"] = "note"
        dot.node(ids[uri], **attrs)
    for e in g.edges:
        dot.edge(ids[e.source], ids[e.target], label=f"[{e.link_index}]")
    for i, b in enumerate(g.broken):
        phantom = f"b{i}"
        dot.node(
            phantom,
            label=uri_basename(b.target) if b.target else "unreadable",
            tooltip=b.target or b.detail,
            shape="diamond",
            color="red",
            fontcolor="red",
        )
        if b.source in ids:
            dot.edge(ids[b.source], phantom, style="dashed", color="red")
    return dot.source
