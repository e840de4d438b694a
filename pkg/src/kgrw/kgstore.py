"""Knowledge graph storage: loading, indexing, corruption, and splits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class GraphFormatError(ValueError):
    """Raised on malformed triple/attribute files."""


class NegativeSamplingError(RuntimeError):
    """Raised when no valid corruption can be found."""


class KnowledgeGraph:
    """Immutable triple store with an entity incidence index.

    `incidence[e]` lists, ascending, the indices of every triple in
    which entity `e` appears as head or tail.
    """

    def __init__(self, entity_names: Sequence[str], relation_names: Sequence[str],
                 triples: Sequence[Triple], duplicate_count: int = 0):
        self.entity_names = tuple(entity_names)
        self.relation_names = tuple(relation_names)
        self.triples = tuple(Triple(*t) for t in triples)
        self.duplicate_count = duplicate_count
        n_ent, n_rel = len(self.entity_names), len(self.relation_names)
        for i, t in enumerate(self.triples):
            if not (0 <= t.head < n_ent and 0 <= t.tail < n_ent and 0 <= t.relation < n_rel):
                raise GraphFormatError(f"triple {i} {t} outside vocabulary bounds")
        self.triple_set = frozenset(self.triples)
        if len(self.triple_set) != len(self.triples):
            raise GraphFormatError("duplicate triples in graph")
        self.heads = np.array([t.head for t in self.triples], dtype=np.int64)
        self.rels = np.array([t.relation for t in self.triples], dtype=np.int64)
        self.tails = np.array([t.tail for t in self.triples], dtype=np.int64)
        self.incidence = self._build_incidence()

    def _build_incidence(self) -> list[np.ndarray]:
        buckets: list[list[int]] = [[] for _ in range(len(self.entity_names))]
        for i, t in enumerate(self.triples):
            buckets[t.head].append(i)
            if t.tail != t.head:
                buckets[t.tail].append(i)
        return [np.array(sorted(b), dtype=np.int64) for b in buckets]

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        return Triple(*triple) in self.triple_set

    def with_appended(self, extra: Sequence[Triple]) -> "KnowledgeGraph":
        """Copy of this graph with `extra` triples appended."""
        return KnowledgeGraph(self.entity_names, self.relation_names,
                              list(self.triples) + [Triple(*t) for t in extra],
                              duplicate_count=self.duplicate_count)


@dataclass
class AttributeTable:
    """Per-entity attribute *types* (deduplicated index lists)."""

    attr_type_names: tuple[str, ...]
    per_entity: dict[int, tuple[int, ...]]

    def __post_init__(self):
        n = len(self.attr_type_names)
        clean = {}
        for ent, attrs in self.per_entity.items():
            uniq = tuple(sorted(set(int(a) for a in attrs)))
            if uniq and (uniq[0] < 0 or uniq[-1] >= n):
                raise GraphFormatError(f"entity {ent}: attribute index out of range")
            clean[int(ent)] = uniq
        self.per_entity = clean

    def attrs_of(self, entity: int) -> tuple[int, ...]:
        return self.per_entity.get(entity, ())

    def coverage(self, num_entities: int) -> float:
        covered = sum(1 for e in range(num_entities) if self.per_entity.get(e))
        return covered / max(num_entities, 1)


@dataclass
class LabeledCorpus:
    """A graph whose tail segment is injected noise, with error labels."""

    graph: KnowledgeGraph
    is_error: np.ndarray
    anomaly_ratio: float
    seed: int
    fallback_count: int = 0

    def __post_init__(self):
        self.is_error = np.asarray(self.is_error, dtype=bool)
        if len(self.is_error) != len(self.graph):
            raise ValueError("label vector length != triple count")

    @property
    def num_errors(self) -> int:
        return int(self.is_error.sum())


@dataclass
class SplitSpec:
    """Disjoint train/valid/test triple-index sets, optionally inductive."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    unseen_entities: np.ndarray
    inductive: bool
    seed: int = 0

    def __post_init__(self):
        self.train = np.asarray(sorted(self.train), dtype=np.int64)
        self.valid = np.asarray(sorted(self.valid), dtype=np.int64)
        self.test = np.asarray(sorted(self.test), dtype=np.int64)
        self.unseen_entities = np.asarray(sorted(self.unseen_entities), dtype=np.int64)
        groups = [set(self.train), set(self.valid), set(self.test)]
        if (groups[0] & groups[1]) or (groups[0] & groups[2]) or (groups[1] & groups[2]):
            raise ValueError("split sections overlap")


def load_graph(path, format: str = "tsv") -> KnowledgeGraph:
    """Load a tab-separated `head relation tail` file.

    Vocabularies are assigned in first-appearance order; exact duplicate
    lines are dropped and counted on the returned graph.
    """
    if format != "tsv":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    triples: list[Triple] = []
    seen: set[Triple] = set()
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            hi = entities.setdefault(h, len(entities))
            ri = relations.setdefault(r, len(relations))
            ti = entities.setdefault(t, len(entities))
            triple = Triple(hi, ri, ti)
            if triple in seen:
                duplicates += 1
                continue
            seen.add(triple)
            triples.append(triple)
    if not triples:
        raise GraphFormatError(f"{path}: no triples found")
    return KnowledgeGraph(list(entities), list(relations), triples,
                          duplicate_count=duplicates)


def save_graph(path, kg: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in kg.triples:
            fh.write(f"{kg.entity_names[t.head]}\t{kg.relation_names[t.relation]}\t"
                     f"{kg.entity_names[t.tail]}\n")


def load_attributes(path, kg: KnowledgeGraph) -> AttributeTable:
    """Load `entity<TAB>attr_type` pairs against the graph's entity vocab."""
    path = Path(path)
    ent_index = {name: i for i, name in enumerate(kg.entity_names)}
    attr_names: dict[str, int] = {}
    per_entity: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(
                    f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
            ent, attr = parts
            if ent not in ent_index:
                raise GraphFormatError(f"{path}:{lineno}: unknown entity {ent!r}")
            ai = attr_names.setdefault(attr, len(attr_names))
            per_entity.setdefault(ent_index[ent], []).append(ai)
    return AttributeTable(tuple(attr_names), {e: tuple(a) for e, a in per_entity.items()})


def save_attributes(path, kg: KnowledgeGraph, attrs: AttributeTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ent in sorted(attrs.per_entity):
            for a in attrs.per_entity[ent]:
                fh.write(f"{kg.entity_names[ent]}\t{attrs.attr_type_names[a]}\n")


def _slot_fillers(kg: KnowledgeGraph) -> tuple[dict[int, list[int]], dict[int, list[int]]]:
    """Entities observed as head (resp. tail) per relation, ascending."""
    heads: dict[int, set[int]] = {}
    tails: dict[int, set[int]] = {}
    for t in kg.triples:
        heads.setdefault(t.relation, set()).add(t.head)
        tails.setdefault(t.relation, set()).add(t.tail)
    return ({r: sorted(s) for r, s in heads.items()},
            {r: sorted(s) for r, s in tails.items()})


def inject_noise(kg: KnowledgeGraph, ratio: float, mode: str = "uniform",
                 seed: int = 0) -> LabeledCorpus:
    """Append floor(ratio*|triples|) corrupted triples and label them.

    `uniform` replaces head or tail (fair coin) with a uniform random
    entity. `slot_aware` replaces it with an entity seen in the same
    slot under the same relation elsewhere, falling back to uniform for
    a draw after 100 failed resamples (counted on the corpus).
    """
    if not 0 < ratio <= 0.5:
        raise ValueError(f"ratio must be in (0, 0.5], got {ratio}")
    if mode not in ("uniform", "slot_aware"):
        raise ValueError(f"unknown noise mode {mode!r}")
    rng = np.random.default_rng(seed)
    n_errors = int(np.floor(ratio * len(kg)))
    head_fillers, tail_fillers = _slot_fillers(kg) if mode == "slot_aware" else ({}, {})
    sources = rng.choice(len(kg), size=n_errors, replace=False)
    appended: list[Triple] = []
    appended_set: set[Triple] = set()
    fallbacks = 0

    def fresh(candidate: Triple) -> bool:
        return candidate not in kg.triple_set and candidate not in appended_set

    for src in sources:
        base = kg.triples[int(src)]
        corrupt_head = bool(rng.integers(2))
        made = None
        if mode == "slot_aware":
            pool = (head_fillers if corrupt_head else tail_fillers).get(base.relation, [])
            pool = [e for e in pool if e != (base.head if corrupt_head else base.tail)]
            if pool:
                for _ in range(100):
                    e = int(pool[rng.integers(len(pool))])
                    cand = Triple(e, base.relation, base.tail) if corrupt_head \
                        else Triple(base.head, base.relation, e)
                    if fresh(cand):
                        made = cand
                        break
            if made is None:
                fallbacks += 1
        if made is None:
            for _ in range(100):
                e = int(rng.integers(kg.num_entities))
                cand = Triple(e, base.relation, base.tail) if corrupt_head \
                    else Triple(base.head, base.relation, e)
                if fresh(cand):
                    made = cand
                    break
        if made is None:
            raise NegativeSamplingError(
                f"could not corrupt triple {base} after 100 uniform resamples")
        appended.append(made)
        appended_set.add(made)

    graph = kg.with_appended(appended)
    labels = np.zeros(len(graph), dtype=bool)
    labels[len(kg):] = True
    return LabeledCorpus(graph, labels, ratio, seed, fallback_count=fallbacks)


def sample_negative(kg: KnowledgeGraph, triple: Triple, slots: str,
                    rng: np.random.Generator) -> Triple:
    """Corrupt one uniformly chosen permitted slot; result not in the graph.

    `slots` is "head_tail" or "head_tail_relation". Raises
    NegativeSamplingError after 1000 failed attempts.
    """
    if slots == "head_tail":
        choices = ("head", "tail")
    elif slots == "head_tail_relation":
        choices = ("head", "tail", "relation")
    else:
        raise ValueError(f"unknown slots {slots!r}")
    if len(kg) == 0:
        raise ValueError("empty graph")
    triple = Triple(*triple)
    for _ in range(1000):
        slot = choices[rng.integers(len(choices))]
        if slot == "head":
            cand = Triple(int(rng.integers(kg.num_entities)), triple.relation, triple.tail)
            changed = cand.head != triple.head
        elif slot == "tail":
            cand = Triple(triple.head, triple.relation, int(rng.integers(kg.num_entities)))
            changed = cand.tail != triple.tail
        else:
            cand = Triple(triple.head, int(rng.integers(kg.num_relations)), triple.tail)
            changed = cand.relation != triple.relation
        if changed and cand not in kg.triple_set:
            return cand
    raise NegativeSamplingError(f"no corruption of {triple} found in 1000 attempts")


def sample_negative_batch(kg: KnowledgeGraph, triples: Sequence[Triple], slots: str,
                          rng: np.random.Generator) -> list[Triple]:
    return [sample_negative(kg, t, slots, rng) for t in triples]


def make_inductive_split(kg: KnowledgeGraph, entity_fraction: float,
                         seed: int = 0) -> SplitSpec:
    """Hold out a fraction of entities; their triples become the test set.

    Remaining triples are shuffled 90/10 into train/valid. Unseen
    entities with no incident triples are dropped with a warning.
    """
    if not 0 < entity_fraction < 0.5:
        raise ValueError(f"entity_fraction must be in (0, 0.5), got {entity_fraction}")
    rng = np.random.default_rng(seed)
    n_unseen = int(np.floor(entity_fraction * kg.num_entities))
    unseen = rng.choice(kg.num_entities, size=n_unseen, replace=False)
    kept = [int(e) for e in unseen if len(kg.incidence[int(e)]) > 0]
    if len(kept) < len(unseen):
        warnings.warn(f"dropped {len(unseen) - len(kept)} unseen entities with no triples")
    unseen_set = set(kept)
    test, rest = [], []
    for i, t in enumerate(kg.triples):
        if t.head in unseen_set or t.tail in unseen_set:
            test.append(i)
        else:
            rest.append(i)
    rest = np.array(rest, dtype=np.int64)
    rng.shuffle(rest)
    n_valid = int(np.floor(0.1 * len(rest)))
    valid = rest[:n_valid]
    train = rest[n_valid:]
    return SplitSpec(train, valid, np.array(test, dtype=np.int64),
                     np.array(kept, dtype=np.int64), inductive=True, seed=seed)


def save_split(path, split: SplitSpec) -> None:
    """Serialize a split as line-oriented index lists behind a header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#split v1 inductive={int(split.inductive)} seed={split.seed}\n")
        for section, idxs in (("train", split.train), ("valid", split.valid),
                              ("test", split.test), ("unseen", split.unseen_entities)):
            for i in idxs:
                fh.write(f"{section}\t{int(i)}\n")


def load_split(path) -> SplitSpec:
    sections: dict[str, list[int]] = {"train": [], "valid": [], "test": [], "unseen": []}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        parts = header.split()
        if (len(parts) != 4 or parts[0] != "#split" or parts[1] != "v1"
                or not parts[2].startswith("inductive=") or not parts[3].startswith("seed=")):
            raise GraphFormatError(f"{path}: bad split header {header!r}")
        inductive = parts[2].split("=", 1)[1] == "1"
        seed = int(parts[3].split("=", 1)[1])
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            name, idx = line.split("\t")
            if name not in sections:
                raise GraphFormatError(f"{path}:{lineno}: unknown section {name!r}")
            sections[name].append(int(idx))
    return SplitSpec(np.array(sections["train"]), np.array(sections["valid"]),
                     np.array(sections["test"]), np.array(sections["unseen"]),
                     inductive=inductive, seed=seed)


def subgraph(kg: KnowledgeGraph, triple_indices: Sequence[int]) -> KnowledgeGraph:
    """Graph restricted to the given triples (vocabularies unchanged)."""
    picked = [kg.triples[int(i)] for i in triple_indices]
    return KnowledgeGraph(kg.entity_names, kg.relation_names, picked)
