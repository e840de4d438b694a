"""Triple-level graph views: nodes are triples, edges are shared entities.

The same machinery builds the two contrastive views (head-share /
tail-share), the relational hypergraph (any-share) and the relation
network used for inductive completion (any-share, all three patterns,
bidirectional edges).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kgstore import KnowledgeGraph

PATTERNS = ("hh", "tt", "ht")
#: when several patterns justify one edge, the stored tag is the first
#: enabled pattern in this priority order
_TAG_PRIORITY = {"hh": 0, "tt": 1, "ht": 2}


@dataclass(frozen=True)
class LinkingRule:
    """Which entity-sharing patterns create an edge between two triples.

    hh: heads equal; tt: tails equal; ht: one triple's head equals the
    other's tail (symmetrized). The named constructors cover the views
    used by the models.
    """

    hh: bool
    tt: bool
    ht: bool
    name: str = "custom"

    def __post_init__(self):
        if not (self.hh or self.tt or self.ht):
            raise ValueError("LinkingRule with every pattern disabled")

    @staticmethod
    def head_share() -> "LinkingRule":
        return LinkingRule(hh=True, tt=False, ht=True, name="head_share")

    @staticmethod
    def tail_share() -> "LinkingRule":
        return LinkingRule(hh=False, tt=True, ht=True, name="tail_share")

    @staticmethod
    def any_share() -> "LinkingRule":
        return LinkingRule(hh=True, tt=True, ht=True, name="any_share")

    @staticmethod
    def pattern_set(hh: bool, tt: bool, ht: bool) -> "LinkingRule":
        return LinkingRule(hh=hh, tt=tt, ht=ht, name="pattern_set")

    def enabled(self) -> tuple[str, ...]:
        return tuple(p for p, on in zip(PATTERNS, (self.hh, self.tt, self.ht)) if on)


class TripleGraph:
    """Undirected graph over triple indices with per-edge pattern tags."""

    def __init__(self, node_count: int, edges: dict[tuple[int, int], str],
                 rule: LinkingRule, stats: dict | None = None,
                 node_ids: np.ndarray | None = None):
        self.node_count = node_count
        self.edge_tags = dict(edges)
        self.rule = rule
        self.stats = stats or {}
        # original triple index per node (identity unless an ego subgraph)
        self.node_ids = (np.arange(node_count, dtype=np.int64)
                         if node_ids is None else np.asarray(node_ids, dtype=np.int64))
        adj: list[list[int]] = [[] for _ in range(node_count)]
        for (i, j) in self.edge_tags:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            adj[i].append(j)
            adj[j].append(i)
        self.adjacency = [np.array(sorted(ns), dtype=np.int64) for ns in adj]

    @property
    def edge_count(self) -> int:
        return len(self.edge_tags)

    def neighbors(self, node: int) -> np.ndarray:
        return self.adjacency[node]

    def degree(self, node: int) -> int:
        return len(self.adjacency[node])

    def csr_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) view of the adjacency lists, cached."""
        cached = getattr(self, "_csr", None)
        if cached is None:
            counts = np.array([len(a) for a in self.adjacency], dtype=np.int64)
            indptr = np.concatenate([[0], np.cumsum(counts)])
            indices = (np.concatenate(self.adjacency) if self.node_count
                       else np.zeros(0, dtype=np.int64))
            cached = (indptr, indices.astype(np.int64))
            self._csr = cached
        return cached

    def edge_arrays(self, self_loops: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Directed (src, dst) arrays with both orientations of each edge."""
        src, dst = [], []
        for (i, j) in sorted(self.edge_tags):
            src += [i, j]
            dst += [j, i]
        if self_loops:
            src += list(range(self.node_count))
            dst += list(range(self.node_count))
        return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def build_triple_graph(kg: KnowledgeGraph, rule: LinkingRule,
                       hub_cap: int = 500, seed: int = 0) -> TripleGraph:
    """Construct the triple graph via the incidence index.

    Work is O(sum of squared entity degrees); entities above `hub_cap`
    incident triples contribute edges only among a seeded sample of
    them (reported in stats).
    """
    if len(kg) == 0:
        raise ValueError("empty graph")
    rng = np.random.default_rng(seed)
    edges: dict[tuple[int, int], str] = {}
    capped_entities = 0
    for ent in range(kg.num_entities):
        inc = kg.incidence[ent]
        if len(inc) < 2:
            continue
        if len(inc) > hub_cap:
            inc = np.sort(rng.choice(inc, size=hub_cap, replace=False))
            capped_entities += 1
        as_head = kg.heads[inc] == ent
        as_tail = kg.tails[inc] == ent
        heads_of = inc[as_head]
        tails_of = inc[as_tail]
        if rule.hh:
            _clique_edges(edges, heads_of, "hh")
        if rule.tt:
            _clique_edges(edges, tails_of, "tt")
        if rule.ht:
            _cross_edges(edges, heads_of, tails_of)
    stats = {"edges": len(edges), "capped_entities": capped_entities,
             "hub_cap": hub_cap}
    return TripleGraph(len(kg), edges, rule, stats)


def _tag_for_pair(edges, i: int, j: int, tag: str) -> None:
    key = (i, j) if i < j else (j, i)
    old = edges.get(key)
    if old is None or _TAG_PRIORITY[tag] < _TAG_PRIORITY[old]:
        edges[key] = tag


def _clique_edges(edges, members: np.ndarray, tag: str) -> None:
    for a in range(len(members)):
        for b in range(a + 1, len(members)):
            _tag_for_pair(edges, int(members[a]), int(members[b]), tag)


def _cross_edges(edges, heads_of: np.ndarray, tails_of: np.ndarray) -> None:
    for i in heads_of:
        for j in tails_of:
            if i != j:
                _tag_for_pair(edges, int(i), int(j), "ht")


def ego_graph(tg: TripleGraph, center: int, k: int) -> tuple[TripleGraph, dict[int, int]]:
    """Induced subgraph on nodes within distance k of `center`.

    Returns the relabeled subgraph and the old->new node map.
    """
    if not 0 <= center < tg.node_count:
        raise ValueError(f"center {center} out of range")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = {center: 0}
    frontier = [center]
    for depth in range(1, k + 1):
        nxt = []
        for u in frontier:
            for v in tg.adjacency[u]:
                v = int(v)
                if v not in dist:
                    dist[v] = depth
                    nxt.append(v)
        frontier = nxt
    keep = sorted(dist)
    relabel = {old: new for new, old in enumerate(keep)}
    kept_set = set(keep)
    sub_edges = {(relabel[i], relabel[j]): tag
                 for (i, j), tag in tg.edge_tags.items()
                 if i in kept_set and j in kept_set}
    node_ids = tg.node_ids[np.array(keep, dtype=np.int64)]
    sub = TripleGraph(len(keep), sub_edges, tg.rule, node_ids=node_ids)
    return sub, relabel


def neighbor_sample(tg: TripleGraph, node: int, m: int,
                    rng: np.random.Generator) -> np.ndarray:
    """All neighbors when degree <= m, else a uniform sample without replacement."""
    if m < 1:
        raise ValueError("m must be >= 1")
    ns = tg.adjacency[node]
    if len(ns) <= m:
        return ns.copy()
    return np.sort(rng.choice(ns, size=m, replace=False))


def dump_edges(path, tg: TripleGraph) -> None:
    """Debug dump: one `i<TAB>j<TAB>pattern` line per edge."""
    with open(path, "w", encoding="utf-8") as fh:
        for (i, j) in sorted(tg.edge_tags):
            fh.write(f"{i}\t{j}\t{tg.edge_tags[(i, j)]}\n")
