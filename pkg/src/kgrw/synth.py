"""Synthetic corpora: planted translational KGs, typed-attribute KGs,
grid KGs for path mining, and scripted QA suites.

These generators back the desk-scale benchmarks; everything is a pure
function of its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kgstore import AttributeTable, KnowledgeGraph, Triple


def planted_translational_kg(n_entities: int, n_relations: int, n_triples: int,
                             seed: int = 0, latent_dim: int = 8,
                             jitter: float = 0.05) -> KnowledgeGraph:
    """KG whose clean triples satisfy a hidden translational model.

    Ground-truth vectors g_e, g_r are drawn once; each triple picks a
    random head and relation and takes the entity nearest to g_h + g_r
    (plus jitter) as tail, so a translational scorer can separate clean
    triples from injected noise.
    """
    rng = np.random.default_rng(seed)
    g_ent = rng.normal(size=(n_entities, latent_dim))
    g_rel = rng.normal(size=(n_relations, latent_dim))
    triples: list[Triple] = []
    seen: set[Triple] = set()
    attempts = 0
    while len(triples) < n_triples and attempts < 50 * n_triples:
        attempts += 1
        h = int(rng.integers(n_entities))
        r = int(rng.integers(n_relations))
        target = g_ent[h] + g_rel[r] + jitter * rng.normal(size=latent_dim)
        d2 = ((g_ent - target) ** 2).sum(axis=1)
        d2[h] = np.inf
        t = int(np.argmin(d2))
        cand = Triple(h, r, t)
        if cand in seen:
            continue
        seen.add(cand)
        triples.append(cand)
    if len(triples) < n_triples:
        raise RuntimeError("could not place the requested number of distinct triples")
    names_e = [f"ent_{i}" for i in range(n_entities)]
    names_r = [f"rel_{i}" for i in range(n_relations)]
    return KnowledgeGraph(names_e, names_r, triples)


@dataclass
class TypedCorpus:
    kg: KnowledgeGraph
    attrs: AttributeTable
    labels: np.ndarray
    entity_types: np.ndarray


def typed_attribute_corpus(n_entities: int = 300, n_relations: int = 12,
                           n_triples: int = 3000, n_types: int = 4,
                           attrs_per_type: int = 3, error_ratio: float = 0.05,
                           seed: int = 0, latent_dim: int = 8,
                           jitter: float = 0.4) -> TypedCorpus:
    """KG with typed entities and attribute profiles, plus planted errors
    that connect attribute-incompatible types.

    Entity types are invisible to the translational structure (latent
    vectors are type-independent), and each error reuses the wrong-type
    entity closest to its translational target, so the errors are
    structurally subtle and mainly visible through attributes.
    """
    rng = np.random.default_rng(seed)
    types = rng.integers(n_types, size=n_entities)
    g_ent = rng.normal(size=(n_entities, latent_dim))
    g_rel = rng.normal(size=(n_relations, latent_dim))
    rel_src = rng.integers(n_types, size=n_relations)
    rel_dst = rng.integers(n_types, size=n_relations)

    by_type = [np.nonzero(types == k)[0] for k in range(n_types)]
    triples: list[Triple] = []
    seen: set[Triple] = set()
    attempts = 0
    while len(triples) < n_triples and attempts < 100 * n_triples:
        attempts += 1
        r = int(rng.integers(n_relations))
        src_pool, dst_pool = by_type[rel_src[r]], by_type[rel_dst[r]]
        if len(src_pool) == 0 or len(dst_pool) < 2:
            continue
        h = int(src_pool[rng.integers(len(src_pool))])
        target = g_ent[h] + g_rel[r] + jitter * rng.normal(size=latent_dim)
        pool = dst_pool[dst_pool != h]
        d2 = ((g_ent[pool] - target) ** 2).sum(axis=1)
        t = int(pool[np.argmin(d2)])
        cand = Triple(h, r, t)
        if cand in seen:
            continue
        seen.add(cand)
        triples.append(cand)
    if len(triples) < n_triples:
        raise RuntimeError("typed corpus generation stalled")

    # errors: tail swapped for the nearest entity of a WRONG type
    n_err = int(np.floor(error_ratio * len(triples)))
    picks = rng.choice(len(triples), size=n_err, replace=False)
    errors: list[Triple] = []
    for src in picks:
        base = triples[int(src)]
        r = base.relation
        wrong = np.nonzero(types != rel_dst[r])[0]
        target = g_ent[base.head] + g_rel[r]
        d2 = ((g_ent[wrong] - target) ** 2).sum(axis=1)
        order = wrong[np.argsort(d2)]
        made = None
        for t in order:
            cand = Triple(base.head, r, int(t))
            if cand not in seen:
                made = cand
                break
        if made is None:
            continue
        seen.add(made)
        errors.append(made)

    all_triples = triples + errors
    labels = np.zeros(len(all_triples), dtype=bool)
    labels[len(triples):] = True
    names_e = [f"ent_{i}" for i in range(n_entities)]
    names_r = [f"rel_{i}" for i in range(n_relations)]
    kg = KnowledgeGraph(names_e, names_r, all_triples)

    attr_names = [f"attr_{k}_{j}" for k in range(n_types) for j in range(attrs_per_type)]
    per_entity: dict[int, tuple[int, ...]] = {}
    for e in range(n_entities):
        base = types[e] * attrs_per_type
        count = int(rng.integers(2, attrs_per_type + 1))
        picked = rng.choice(attrs_per_type, size=count, replace=False)
        per_entity[e] = tuple(sorted(int(base + j) for j in picked))
    attrs = AttributeTable(tuple(attr_names), per_entity)
    return TypedCorpus(kg, attrs, labels, types)


def composition_rule_kg(n_entities: int = 100, base_edges: int = 150,
                        keep_prob: float = 0.85, distractor_edges: int = 100,
                        seed: int = 0) -> KnowledgeGraph:
    """KG whose composite relations follow two-hop logic rules.

    Relations `base_0`/`base_1` are random sparse edges; `comp_01` holds
    for most chains base_0 then base_1, and `comp_10` for the reverse
    order. A `noise` relation adds unstructured edges. Link prediction
    for composite relations is solvable from relational context alone,
    which is what relation-network reasoning is supposed to exploit.
    """
    rng = np.random.default_rng(seed)
    relations = ["base_0", "base_1", "comp_01", "comp_10", "noise"]
    triples: set[Triple] = set()

    def add_random(rel: int, count: int):
        made = 0
        while made < count:
            a, b = rng.integers(n_entities, size=2)
            if a == b:
                continue
            cand = Triple(int(a), rel, int(b))
            if cand in triples:
                continue
            triples.add(cand)
            made += 1

    add_random(0, base_edges)
    add_random(1, base_edges)
    base0 = [t for t in triples if t.relation == 0]
    base1 = [t for t in triples if t.relation == 1]
    out0: dict[int, list[int]] = {}
    out1: dict[int, list[int]] = {}
    for t in base0:
        out0.setdefault(t.head, []).append(t.tail)
    for t in base1:
        out1.setdefault(t.head, []).append(t.tail)
    for first, second, comp in ((base0, out1, 2), (base1, out0, 3)):
        for t in sorted(first):
            for c in sorted(second.get(t.tail, [])):
                if c == t.head or rng.random() > keep_prob:
                    continue
                cand = Triple(t.head, comp, c)
                if cand not in triples:
                    triples.add(cand)
    add_random(4, distractor_edges)
    names_e = [f"ent_{i}" for i in range(n_entities)]
    return KnowledgeGraph(names_e, relations, sorted(triples))


def subtype_rule_corpus(n_entities: int = 400, n_relations: int = 10,
                        n_triples: int = 2400, n_tail_types: int = 4,
                        attrs_per_type: int = 3, error_ratio: float = 0.05,
                        seed: int = 0, latent_dim: int = 8,
                        jitter: float = 0.6) -> TypedCorpus:
    """Errors that only attributes can explain.

    Every relation accepts tails of two classes; which one is correct
    for a given head depends on the head's subtype flag, carried only
    by attributes. Heads barely repeat, so the graph alone cannot pin
    the rule, while attribute profiles state it outright. Errors swap
    the tail for the nearest entity of the relation's *other* tail
    class: a perfectly ordinary (relation, tail) pair that violates the
    head's subtype rule.
    """
    rng = np.random.default_rng(seed)
    tail_type = rng.integers(n_tail_types, size=n_entities)
    subtype = rng.integers(2, size=n_entities)
    g_ent = rng.normal(size=(n_entities, latent_dim))
    g_rel = rng.normal(size=(n_relations, latent_dim))
    rel_src = rng.integers(n_tail_types, size=n_relations)
    rel_tails = np.stack([rng.choice(n_tail_types, size=2, replace=False)
                          for _ in range(n_relations)])
    by_type = [np.nonzero(tail_type == k)[0] for k in range(n_tail_types)]

    triples: list[Triple] = []
    seen: set[Triple] = set()
    attempts = 0
    while len(triples) < n_triples and attempts < 100 * n_triples:
        attempts += 1
        r = int(rng.integers(n_relations))
        src_pool = by_type[rel_src[r]]
        if len(src_pool) == 0:
            continue
        h = int(src_pool[rng.integers(len(src_pool))])
        want = rel_tails[r][subtype[h]]
        pool = by_type[want]
        pool = pool[pool != h]
        if len(pool) == 0:
            continue
        target = g_ent[h] + g_rel[r] + jitter * rng.normal(size=latent_dim)
        t = int(pool[np.argmin(((g_ent[pool] - target) ** 2).sum(axis=1))])
        cand = Triple(h, r, t)
        if cand in seen:
            continue
        seen.add(cand)
        triples.append(cand)
    if len(triples) < n_triples:
        raise RuntimeError("subtype corpus generation stalled")

    n_err = int(np.floor(error_ratio * len(triples)))
    picks = rng.choice(len(triples), size=n_err, replace=False)
    errors: list[Triple] = []
    for src in picks:
        base = triples[int(src)]
        r = base.relation
        wrong = rel_tails[r][1 - subtype[base.head]]
        pool = by_type[wrong]
        pool = pool[pool != base.head]
        target = g_ent[base.head] + g_rel[r]
        order = pool[np.argsort(((g_ent[pool] - target) ** 2).sum(axis=1))]
        for t in order:
            cand = Triple(base.head, r, int(t))
            if cand not in seen:
                seen.add(cand)
                errors.append(cand)
                break

    all_triples = triples + errors
    labels = np.zeros(len(all_triples), dtype=bool)
    labels[len(triples):] = True
    names_e = [f"ent_{i}" for i in range(n_entities)]
    names_r = [f"rel_{i}" for i in range(n_relations)]
    kg = KnowledgeGraph(names_e, names_r, all_triples)

    attr_names = ([f"class_{k}_{j}" for k in range(n_tail_types)
                   for j in range(attrs_per_type)]
                  + ["flag_plain", "flag_marked"])
    per_entity: dict[int, tuple[int, ...]] = {}
    n_class_attrs = n_tail_types * attrs_per_type
    for e in range(n_entities):
        base = tail_type[e] * attrs_per_type
        count = int(rng.integers(2, attrs_per_type + 1))
        picked = rng.choice(attrs_per_type, size=count, replace=False)
        attrs = sorted(int(base + j) for j in picked)
        attrs.append(n_class_attrs + int(subtype[e]))
        per_entity[e] = tuple(attrs)
    attrs_table = AttributeTable(tuple(attr_names), per_entity)
    return TypedCorpus(kg, attrs_table, labels, tail_type)


def grid_kg(width: int = 10, height: int = 10) -> KnowledgeGraph:
    """Lattice KG: cells named r<row>_c<col>, 4-neighbour move relations.

    The row/column name tokens make the default feature-hash embedder
    informative about position.
    """
    def name(r, c):
        return f"r{r}_c{c}"

    entities = [name(r, c) for r in range(height) for c in range(width)]
    idx = {n: i for i, n in enumerate(entities)}
    relations = ["move_right", "move_left", "move_up", "move_down"]
    triples = []
    for r in range(height):
        for c in range(width):
            here = idx[name(r, c)]
            if c + 1 < width:
                triples.append(Triple(here, 0, idx[name(r, c + 1)]))
                triples.append(Triple(idx[name(r, c + 1)], 1, here))
            if r + 1 < height:
                triples.append(Triple(here, 3, idx[name(r + 1, c)]))
                triples.append(Triple(idx[name(r + 1, c)], 2, here))
    return KnowledgeGraph(entities, relations, triples)


def grid_questions(kg: KnowledgeGraph, count: int, max_distance: int = 3,
                   seed: int = 0) -> list[dict]:
    """Navigation questions over a grid KG as plain dicts.

    Each question names a start and goal cell within `max_distance`
    manhattan steps; choices are four cell names with one gold.
    """
    rng = np.random.default_rng(seed)
    coords = {}
    for i, n in enumerate(kg.entity_names):
        r, c = n[1:].split("_c")
        coords[i] = (int(r), int(c))
    cells = list(coords)
    questions = []
    while len(questions) < count:
        src = int(rng.choice(cells))
        dist = int(rng.integers(1, max_distance + 1))
        reachable = [e for e in cells
                     if 0 < abs(coords[e][0] - coords[src][0])
                     + abs(coords[e][1] - coords[src][1]) <= dist]
        if not reachable:
            continue
        dst = int(rng.choice(reachable))
        distractors = [e for e in cells if e not in (src, dst)]
        wrong = rng.choice(distractors, size=3, replace=False)
        choice_ids = [dst] + [int(w) for w in wrong]
        order = rng.permutation(4)
        choices = [kg.entity_names[choice_ids[i]] for i in order]
        gold = int(np.nonzero(order == 0)[0][0])
        questions.append({
            "qid": f"grid_{len(questions)}",
            "text": f"Starting at cell {kg.entity_names[src]}, which cell can be reached?",
            "choices": choices,
            "gold": gold,
            "sources": [kg.entity_names[src]],
            "targets": [kg.entity_names[dst]],
        })
    return questions


def kg_link_questions(kg: KnowledgeGraph, count: int, seed: int = 0,
                      n_choices: int = 4) -> list[dict]:
    """Scripted QA over an arbitrary KG: which entity does h reach via r?

    Gold answers are actual tails, so extraction around the source and
    target reliably surfaces the answer text for a keyword oracle.
    """
    rng = np.random.default_rng(seed)
    questions = []
    used = set()
    while len(questions) < count and len(used) < len(kg):
        ti = int(rng.integers(len(kg)))
        if ti in used:
            continue
        used.add(ti)
        t = kg.triples[ti]
        distractors = [e for e in range(kg.num_entities) if e not in (t.head, t.tail)]
        wrong = rng.choice(distractors, size=n_choices - 1, replace=False)
        choice_ids = [t.tail] + [int(w) for w in wrong]
        order = rng.permutation(n_choices)
        choices = [kg.entity_names[choice_ids[i]] for i in order]
        gold = int(np.nonzero(order == 0)[0][0])
        questions.append({
            "qid": f"link_{len(questions)}",
            "text": (f"Which entity is connected from {kg.entity_names[t.head]} "
                     f"through {kg.relation_names[t.relation]}?"),
            "choices": choices,
            "gold": gold,
            "sources": [kg.entity_names[t.head]],
            "targets": [kg.entity_names[t.tail]],
        })
    return questions


def save_questions(path, questions: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(questions, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_questions(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
