"""Inductive link prediction over the relation network.

Triples are nodes; edges join triples sharing an entity (all three
patterns, bidirectional). Entity and relation embeddings stay frozen;
a Bi-LSTM composes per-triple features, one message-passing stack
learns node representations, a second extracts k-hop evidence, and
training maximizes the mutual information between the two. A logistic
head scores triples; unseen entities ride on context alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .kgstore import KnowledgeGraph, Triple, sample_negative
from .views import LinkingRule, TripleGraph, build_triple_graph, ego_graph

MP_KINDS = ("gcn", "sage", "gin", "sgc", "gat")


@dataclass(frozen=True)
class MpLayerSpec:
    """Backbone selector; each kind fixes its aggregation and transform.

    gcn/sgc aggregate with the symmetric normalized matrix, sage with
    row normalization, gin with raw A+I into a two-layer MLP, gat with
    learned attention. sgc has no transform and no nonlinearity.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in MP_KINDS:
            raise ValueError(f"unknown MP kind {self.kind!r}; choose from {MP_KINDS}")


@dataclass
class NoranHyper:
    dim: int = 16              # frozen embedding dim; node features are 3*dim
    hidden: int = 16
    k: int = 2                 # MP depth and evidence radius
    backbone: str = "sage"
    estimator: str = "jsd"     # jsd | infonce | naive_ns
    steps: int = 60
    batch_size: int = 12
    lr: float = 0.005
    gamma: float = 0.5         # margin for the naive_ns baseline objective
    classifier_steps: int = 200
    classifier_lr: float = 0.05
    seed: int = 0
    hub_cap: int = 500
    max_ego_nodes: int = 400   # evidence ego graphs above this are subsampled

    def __post_init__(self):
        MpLayerSpec(self.backbone)
        if self.estimator not in ("jsd", "infonce", "naive_ns"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.dim % 2:
            raise ValueError("dim must be even")


class TrainingDiverged(RuntimeError):
    pass


class _ConvGraph:
    """Constant directed-edge structure (with self loops) for MP layers."""

    def __init__(self, att_ids: np.ndarray, src_ids: np.ndarray,
                 dtilde: np.ndarray, n: int):
        self.att_ids = att_ids
        self.src_ids = src_ids
        self.dtilde = dtilde.astype(np.float64)
        self.n = n

    @staticmethod
    def from_triple_graph(tg: TripleGraph) -> "_ConvGraph":
        att, src = tg.edge_arrays(self_loops=True)
        deg = np.array([tg.degree(i) for i in range(tg.node_count)], dtype=np.float64)
        return _ConvGraph(att, src, deg + 1.0, tg.node_count)

    @staticmethod
    def from_dense(a: np.ndarray) -> "_ConvGraph":
        a = np.asarray(a)
        if a.shape[0] != a.shape[1] or not np.array_equal(a, a.T):
            raise ValueError("adjacency must be square and symmetric")
        n = a.shape[0]
        att, src = np.nonzero(a + np.eye(n))
        deg = a.sum(axis=1)
        return _ConvGraph(att.astype(np.int64), src.astype(np.int64), deg + 1.0, n)


def init_layer(kind: str, in_dim: int, out_dim: int, rng: np.random.Generator,
               name: str) -> dict:
    if kind == "sgc":
        return {"kind": kind, "out_dim": in_dim}
    if kind in ("gcn", "sage"):
        return {"kind": kind, "out_dim": out_dim,
                "w": Parameter(ad.xavier_init((in_dim, out_dim), rng), f"{name}.w")}
    if kind == "gin":
        return {"kind": kind, "out_dim": out_dim,
                "w1": Parameter(ad.xavier_init((in_dim, out_dim), rng), f"{name}.w1"),
                "b1": Parameter(np.zeros(out_dim), f"{name}.b1"),
                "w2": Parameter(ad.xavier_init((out_dim, out_dim), rng), f"{name}.w2"),
                "b2": Parameter(np.zeros(out_dim), f"{name}.b2")}
    if kind == "gat":
        return {"kind": kind, "out_dim": out_dim,
                "theta": Parameter(ad.xavier_init((in_dim, out_dim), rng), f"{name}.theta"),
                "a": Parameter(ad.xavier_init((2 * out_dim,), rng), f"{name}.a")}
    raise ValueError(kind)


def _layer_params(layer: dict) -> list[Parameter]:
    return [v for v in layer.values() if isinstance(v, Parameter)]


def mp_layer(layer: dict, x: Tensor, conv: _ConvGraph) -> Tensor:
    """One message-passing layer over a prepared edge structure."""
    kind = layer["kind"]
    att, src = conv.att_ids, conv.src_ids
    if kind == "gat":
        h = ad.matmul(x, layer["theta"])
        hs = ad.gather_rows(h, att)
        hd = ad.gather_rows(h, src)
        scores = ad.reduce_sum(
            ad.mul(ad.concat([hs, hd], axis=1),
                   ad.reshape(layer["a"], (1, 2 * layer["out_dim"]))), axis=1)
        shift = np.full(conv.n, -np.inf)
        np.maximum.at(shift, att, scores.value)
        ex = ad.exp(ad.sub(scores, shift[att]))
        denom = ad.segment_sum(ad.reshape(ex, (-1, 1)), att, conv.n)
        alpha = ad.div(ad.reshape(ex, (-1, 1)), ad.gather_rows(denom, att))
        out = ad.segment_sum(ad.mul(alpha, hd), att, conv.n)
        return ad.elu(out)
    if kind in ("gcn", "sgc"):
        coeff = 1.0 / np.sqrt(conv.dtilde[att] * conv.dtilde[src])
    elif kind == "sage":
        coeff = 1.0 / conv.dtilde[att]
    elif kind == "gin":
        coeff = np.ones(len(att))
    else:
        raise ValueError(kind)
    msgs = ad.mul(ad.gather_rows(x, src), coeff[:, None])
    agg = ad.segment_sum(msgs, att, conv.n)
    if kind == "sgc":
        return agg
    if kind == "gin":
        hidden = ad.elu(ad.add(ad.matmul(agg, layer["w1"]), layer["b1"]))
        return ad.elu(ad.add(ad.matmul(hidden, layer["w2"]), layer["b2"]))
    return ad.elu(ad.matmul(agg, layer["w"]))


def mp_forward(spec: MpLayerSpec, x, adjacency) -> Tensor:
    """Spec-surface convenience: one layer over a dense 0/1 adjacency.

    Weights are Xavier-initialized from a fixed seed; square transform.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    conv = _ConvGraph.from_dense(adjacency)
    rng = np.random.default_rng(0)
    layer = init_layer(spec.kind, x.value.shape[1], x.value.shape[1], rng, "probe")
    return mp_layer(layer, x, conv)


class NoranModel:
    """Frozen embeddings plus the trainable composition/MP/score stacks."""

    def __init__(self, kg: KnowledgeGraph, hyper: NoranHyper,
                 rule: LinkingRule | None = None):
        self.kg = kg
        self.hyper = hyper
        self.rule = rule or LinkingRule.any_share()
        d = hyper.dim
        rng = np.random.default_rng(hyper.seed)
        # frozen plain arrays: never Parameters, never updated
        entity_table = ad.xavier_init((kg.num_entities, d), rng)
        self.relation_table = ad.xavier_init((kg.num_relations, d), rng)
        self.seen = np.array([len(kg.incidence[e]) > 0 for e in range(kg.num_entities)])
        if self.seen.any():
            mean_row = entity_table[self.seen].mean(axis=0)
            entity_table = entity_table.copy()
            entity_table[~self.seen] = mean_row
        self.entity_table = entity_table
        hidden = d // 2
        self.lstm_fwd = ad.lstm_init(d, hidden, rng, "gamma_fwd")
        self.lstm_bwd = ad.lstm_init(d, hidden, rng, "gamma_bwd")
        dims = self._stack_dims()
        self.psi = [init_layer(hyper.backbone, dims[j], dims[j + 1], rng, f"psi{j}")
                    for j in range(hyper.k)]
        self.omega = [init_layer(hyper.backbone, dims[j], dims[j + 1], rng, f"omega{j}")
                      for j in range(hyper.k)]
        feat = dims[-1]
        self.disc_w1 = Parameter(ad.xavier_init((3 * feat, feat), rng), "disc.w1")
        self.disc_b1 = Parameter(np.zeros(feat), "disc.b1")
        self.disc_w2 = Parameter(ad.xavier_init((feat,), rng), "disc.w2")
        self.disc_b2 = Parameter(np.zeros(()), "disc.b2")
        self.ns_head = Parameter(ad.xavier_init((feat,), rng), "ns_head")
        self.cls_w = Parameter(np.zeros(feat), "cls.w")
        self.cls_b = Parameter(np.zeros(()), "cls.b")
        self.network = build_triple_graph(kg, self.rule, hub_cap=hyper.hub_cap,
                                          seed=hyper.seed)
        self.conv = _ConvGraph.from_triple_graph(self.network)
        self._ego_cache: dict[int, tuple] = {}
        self.base_layers: list[np.ndarray] | None = None
        self.history: list[float] = []

    def _stack_dims(self) -> list[int]:
        in_dim = 3 * self.hyper.dim
        if self.hyper.backbone == "sgc":
            return [in_dim] * (self.hyper.k + 1)
        return [in_dim] + [self.hyper.hidden] * self.hyper.k

    @property
    def feat_dim(self) -> int:
        return self._stack_dims()[-1]

    def params(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for w in (self.lstm_fwd, self.lstm_bwd):
            ps += [w["wx"], w["wh"], w["b"]]
        for layer in self.psi + self.omega:
            ps += _layer_params(layer)
        ps += [self.disc_w1, self.disc_b1, self.disc_w2, self.disc_b2,
               self.ns_head, self.cls_w, self.cls_b]
        return ps

    def checksum(self) -> str:
        return ad.parameter_checksum(self.params())


def gamma_batch(model: NoranModel, heads, rels, tails) -> Tensor:
    """Frozen-embedding Bi-LSTM composition; (B, 3*dim)."""
    e_h = Tensor(model.entity_table[np.asarray(heads)])
    e_r = Tensor(model.relation_table[np.asarray(rels)])
    e_t = Tensor(model.entity_table[np.asarray(tails)])
    hidden = model.hyper.dim // 2
    outs = ad.bilstm_run([e_h, e_r, e_t], model.lstm_fwd, model.lstm_bwd, hidden)
    return ad.concat(outs, axis=1)


def gamma_features(model: NoranModel, kg: KnowledgeGraph | None = None) -> Tensor:
    """X0 for every triple of the graph; (|triples|, 3*dim)."""
    kg = kg or model.kg
    return gamma_batch(model, kg.heads, kg.rels, kg.tails)


def psi_forward(model: NoranModel, x0: Tensor | None = None) -> list[Tensor]:
    """All Psi layer outputs over the relation network, X0 first."""
    x = x0 if x0 is not None else gamma_features(model)
    layers = [x]
    for layer in model.psi:
        x = mp_layer(layer, x, model.conv)
        layers.append(x)
    return layers


def _ego_structure(model: NoranModel, v: int):
    """Cached ego subgraph of the relation network around node v."""
    hit = model._ego_cache.get(v)
    if hit is not None:
        return hit
    sub, _ = ego_graph(model.network, v, model.hyper.k)
    if sub.node_count > model.hyper.max_ego_nodes:
        sub = _subsample_ego(model, sub, v)
    conv = _ConvGraph.from_triple_graph(sub)
    pairs = np.array(sorted(sub.edge_tags), dtype=np.int64).reshape(-1, 2)
    entry = (sub, conv, pairs)
    model._ego_cache[v] = entry
    return entry


def _subsample_ego(model: NoranModel, sub: TripleGraph, v: int) -> TripleGraph:
    """Deterministically keep the closest max_ego_nodes ego members."""
    rng = np.random.default_rng(model.hyper.seed + v)
    keep = {int(np.nonzero(sub.node_ids == model.network.node_ids[v])[0][0])}
    order = rng.permutation(sub.node_count)
    for i in order:
        if len(keep) >= model.hyper.max_ego_nodes:
            break
        keep.add(int(i))
    keep_sorted = sorted(keep)
    relabel = {old: new for new, old in enumerate(keep_sorted)}
    edges = {(relabel[i], relabel[j]): tag for (i, j), tag in sub.edge_tags.items()
             if i in relabel and j in relabel}
    return TripleGraph(len(keep_sorted), edges, sub.rule,
                       node_ids=sub.node_ids[np.array(keep_sorted)])


def evidence(model: NoranModel, v: int, x0: Tensor | None = None):
    """Omega features over the k-hop ego graph plus its edge pair list.

    Returns (pair_features (E, 2*feat), edge_count); isolated nodes give
    an empty evidence set.
    """
    sub, conv, pairs = _ego_structure(model, v)
    x = ad.gather_rows(x0 if x0 is not None else gamma_features(model), sub.node_ids)
    for layer in model.omega:
        x = mp_layer(layer, x, conv)
    if len(pairs) == 0:
        return None, 0
    hp = ad.gather_rows(x, pairs[:, 0])
    hq = ad.gather_rows(x, pairs[:, 1])
    return ad.concat([hp, hq], axis=1), len(pairs)


def discriminator_T(model: NoranModel, pair_features, x_v: Tensor) -> Tensor:
    """Sum of log f([h_p || h_q || x_v]) over evidence edges; 0 when empty."""
    if pair_features is None:
        return Tensor(np.zeros(()))
    e = pair_features.value.shape[0]
    center = ad.reshape(x_v, (1, -1))
    tiled = ad.concat([pair_features,
                       ad.mul(Tensor(np.ones((e, 1))), center)], axis=1)
    hidden = ad.elu(ad.add(ad.matmul(tiled, model.disc_w1), model.disc_b1))
    logit = ad.add(ad.matmul(hidden, model.disc_w2), model.disc_b2)
    f = ad.sigmoid(logit)
    return ad.reduce_sum(ad.log(f))


def mi_jsd(model: NoranModel, batch: np.ndarray, x0: Tensor | None = None,
           x_psi: Tensor | None = None) -> Tensor:
    """Jensen-Shannon MI estimate over a batch of relation-network nodes.

    Positives pair each node's evidence with its own representation;
    negatives pair it with the next node's evidence (roll by one).
    """
    if len(batch) < 2:
        raise ValueError("JSD estimate needs a batch of at least 2")
    if x0 is None:
        x0 = gamma_features(model)
    if x_psi is None:
        x_psi = psi_forward(model, x0)[-1]
    evid = [evidence(model, int(v), x0) for v in batch]
    pos_terms, neg_terms = [], []
    for i, v in enumerate(batch):
        x_v = ad.reshape(ad.gather_rows(x_psi, np.array([int(v)])), (-1,))
        t_pos = discriminator_T(model, evid[i][0], x_v)
        pair = evid[(i + 1) % len(batch)]
        t_neg = discriminator_T(model, pair[0], x_v)
        pos_terms.append(ad.reshape(ad.mul(ad.softplus(ad.mul(t_pos, -1.0)), -1.0), (1,)))
        neg_terms.append(ad.reshape(ad.mul(ad.softplus(t_neg), -1.0), (1,)))
    pos = ad.reduce_mean(ad.concat(pos_terms, axis=0))
    neg = ad.reduce_mean(ad.concat(neg_terms, axis=0))
    return ad.add(pos, neg)


def mi_infonce(model: NoranModel, batch: np.ndarray, x0: Tensor | None = None,
               x_psi: Tensor | None = None) -> Tensor:
    """InfoNCE MI estimate; every other batch member's evidence is a negative."""
    n = len(batch)
    if n < 2:
        raise ValueError("InfoNCE estimate needs a batch of at least 2")
    if x0 is None:
        x0 = gamma_features(model)
    if x_psi is None:
        x_psi = psi_forward(model, x0)[-1]
    evid = [evidence(model, int(v), x0) for v in batch]
    centers = [ad.reshape(ad.gather_rows(x_psi, np.array([int(v)])), (-1,))
               for v in batch]
    t_matrix = [[discriminator_T(model, evid[i][0], centers[j]) for j in range(n)]
                for i in range(n)]
    terms = []
    for j in range(n):
        off = ad.concat([ad.reshape(t_matrix[i][j], (1,))
                         for i in range(n) if i != j], axis=0)
        term = ad.sub(t_matrix[j][j], ad.logsumexp(off))
        terms.append(ad.reshape(term, (1,)))
    return ad.reduce_mean(ad.concat(terms, axis=0))


# ---------------------------------------------------------------------------
# overlay inference: score a triple by appending one node to the network


class ScoringContext:
    """A frozen inference context: relation network over some graph plus
    cached layer values under a trained model's weights.

    Evaluation can reintroduce held-out edges by building the context
    over a larger graph than the model was trained on; a query's own
    node is excluded exactly when scoring its candidates.
    """

    def __init__(self, model: NoranModel, kg: KnowledgeGraph):
        self.kg = kg
        if kg is model.kg:
            self.network = model.network
        else:
            self.network = build_triple_graph(kg, model.rule,
                                              hub_cap=model.hyper.hub_cap,
                                              seed=model.hyper.seed)
        conv = _ConvGraph.from_triple_graph(self.network)
        x = gamma_batch(model, kg.heads, kg.rels, kg.tails)
        layers = [x.value]
        for layer in model.psi:
            x = mp_layer(layer, x, conv)
            layers.append(x.value)
        self.base_layers = layers
        self.node_index = {t: i for i, t in enumerate(kg.triples)}


def _wire_neighbors_in(kg: KnowledgeGraph, rule: LinkingRule, triple: Triple,
                       exclude: frozenset[int]) -> np.ndarray:
    """Relation-network node ids the appended triple links to (rule-aware)."""
    h, _, t = triple
    nb: set[int] = set()
    for i in kg.incidence[h] if 0 <= h < kg.num_entities else []:
        i = int(i)
        if i in exclude:
            continue
        if rule.hh and kg.heads[i] == h:
            nb.add(i)
        if rule.ht and kg.tails[i] == h:
            nb.add(i)
    for i in kg.incidence[t] if 0 <= t < kg.num_entities else []:
        i = int(i)
        if i in exclude:
            continue
        if rule.tt and kg.tails[i] == t:
            nb.add(i)
        if rule.ht and kg.heads[i] == t:
            nb.add(i)
    return np.array(sorted(nb), dtype=np.int64)


def overlay_embedding(model: NoranModel, triple: Triple,
                      base_layers: list | None = None,
                      context: "ScoringContext | None" = None,
                      exclude: tuple[int, ...] = ()) -> Tensor:
    """Exact Psi output for a triple appended to the relation network.

    Only nodes within k hops of a perturbation site (the appended node,
    plus any excluded nodes) are recomputed; everything else reads the
    cached base layer values. This matches the one-node copy-on-append
    inference procedure, extended with exact deletion of `exclude`.
    """
    triple = Triple(*triple)
    if context is not None:
        kg, net = context.kg, context.network
        if base_layers is None:
            base_layers = context.base_layers
    else:
        kg, net = model.kg, model.network
        if base_layers is None:
            base_layers = model.base_layers
            if base_layers is None:
                raise RuntimeError("no cached base layers; call cache_base_layers")
    if not 0 <= triple.relation < kg.num_relations:
        raise ValueError(f"unknown relation index {triple.relation}")
    if not (0 <= triple.head < kg.num_entities and 0 <= triple.tail < kg.num_entities):
        raise ValueError("entity index outside vocabulary")
    excluded = frozenset(int(e) for e in exclude)
    k = model.hyper.k
    nb = _wire_neighbors_in(kg, model.rule, triple, excluded)
    indptr, indices = net.csr_arrays()
    n_net = net.node_count
    excl_arr = np.array(sorted(excluded), dtype=np.int64)
    # BFS to k hops around every perturbation site (the appended node,
    # whose base neighbors are `nb`, and every excluded node); beyond
    # that radius base values are provably unaffected
    dist = np.full(n_net, -1, dtype=np.int64)
    dist[excl_arr] = 0
    fresh_nb = nb[dist[nb] == -1] if len(nb) else nb
    dist[fresh_nb] = 1
    for depth in range(1, k + 1):
        cur = np.nonzero(dist == depth - 1)[0]
        if len(cur) == 0:
            continue
        _, nbrs = _multi_neighbors(indptr, indices, cur)
        found = np.unique(nbrs[dist[nbrs] == -1])
        dist[found] = depth
    excl_mask = np.zeros(n_net, dtype=bool)
    excl_mask[excl_arr] = True
    ego_arr = np.nonzero((dist >= 0) & ~excl_mask)[0]
    n_ego = len(ego_arr)
    local_map = np.full(n_net, -1, dtype=np.int64)
    local_map[ego_arr] = 1 + np.arange(n_ego)

    owner, nbrs = _multi_neighbors(indptr, indices, ego_arr)
    keep = ~excl_mask[nbrs] if len(nbrs) else np.zeros(0, dtype=bool)
    dropped = np.bincount(owner[~keep], minlength=n_ego) if len(owner) else np.zeros(n_ego)
    owner, nbrs = owner[keep], nbrs[keep]
    new_boundary = np.unique(nbrs[local_map[nbrs] == -1]) if len(nbrs) else np.zeros(0, np.int64)
    local_map[new_boundary] = 1 + n_ego + np.arange(len(new_boundary))
    n_local = 1 + n_ego + len(new_boundary)

    in_nb = np.zeros(n_net, dtype=bool)
    in_nb[nb] = True
    att_parts = [1 + owner, local_map[nb], np.zeros(len(nb), np.int64),
                 np.arange(n_local)]
    src_parts = [local_map[nbrs], np.zeros(len(nb), np.int64), local_map[nb],
                 np.arange(n_local)]
    att = np.concatenate(att_parts)
    src = np.concatenate(src_parts)
    base_deg = indptr[1:] - indptr[:-1]
    dtilde = np.empty(n_local)
    dtilde[0] = len(nb) + 1.0
    dtilde[1:1 + n_ego] = (base_deg[ego_arr] - dropped + 1.0
                           + in_nb[ego_arr].astype(np.float64))
    dtilde[1 + n_ego:] = base_deg[new_boundary] + 1.0
    conv = _ConvGraph(att, src, dtilde, n_local)

    boundary = new_boundary
    old_ids = np.concatenate([ego_arr, boundary])
    x_new = gamma_batch(model, [triple.head], [triple.relation], [triple.tail])
    base0 = base_layers[0]
    base0_rows = (ad.gather_rows(base0, old_ids) if isinstance(base0, Tensor)
                  else Tensor(np.asarray(base0)[old_ids]))
    x = ad.concat([x_new, base0_rows], axis=0) if len(old_ids) else x_new
    boundary_mask = np.zeros((n_local, 1), dtype=bool)
    boundary_mask[1 + n_ego:] = True
    for j, layer in enumerate(model.psi, start=1):
        x = mp_layer(layer, x, conv)
        if len(boundary):
            base_j = base_layers[j]
            rows = (ad.gather_rows(base_j, old_ids) if isinstance(base_j, Tensor)
                    else Tensor(np.asarray(base_j)[old_ids]))
            full = ad.concat([ad.gather_rows(x, np.array([0])), rows], axis=0)
            x = ad.where_const(boundary_mask, full, x)
    return ad.reshape(ad.gather_rows(x, np.array([0])), (-1,))


def _multi_neighbors(indptr: np.ndarray, indices: np.ndarray,
                     nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flattened neighbor lists: (position-of-owner, neighbor-id) arrays."""
    starts = indptr[nodes]
    counts = indptr[nodes + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(len(nodes)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return owner, indices[np.repeat(starts, counts) + offsets]


def cache_base_layers(model: NoranModel) -> None:
    model.base_layers = [layer.value for layer in psi_forward(model)]


def _classify(model: NoranModel, x: np.ndarray) -> float:
    logit = float(x @ model.cls_w.value + model.cls_b.value)
    return float(0.5 * (1.0 + np.tanh(0.5 * logit)))


def predict_link(model: NoranModel, triple: Triple) -> float:
    """Probability of the triple under the frozen model; no state changes."""
    x = overlay_embedding(model, triple)
    return _classify(model, x.value)


def score_candidates(model: NoranModel, heads, rels, tails,
                     context: "ScoringContext | None" = None,
                     exclude: tuple[int, ...] = ()) -> np.ndarray:
    return np.array([
        _classify(model, overlay_embedding(model, Triple(int(h), int(r), int(t)),
                                           context=context, exclude=exclude).value)
        for h, r, t in zip(heads, rels, tails)])


def context_scorer(model: NoranModel, context: "ScoringContext"):
    """Plausibility scorer for rank_entities that keeps the query's own
    node out of its candidates' context."""

    def scorer_for(query: Triple):
        qid = context.node_index.get(Triple(*query))
        exclude = (qid,) if qid is not None else ()

        def scorer(heads, rels, tails):
            return score_candidates(model, heads, rels, tails,
                                    context=context, exclude=exclude)

        return scorer

    return scorer_for


# ---------------------------------------------------------------------------
# training


def _repr_params(model: NoranModel) -> list[Parameter]:
    ps: list[Parameter] = []
    for w in (model.lstm_fwd, model.lstm_bwd):
        ps += [w["wx"], w["wh"], w["b"]]
    for layer in model.psi + model.omega:
        ps += _layer_params(layer)
    ps += [model.disc_w1, model.disc_b1, model.disc_w2, model.disc_b2, model.ns_head]
    return ps


def _naive_ns_loss(model: NoranModel, batch: np.ndarray, x0: Tensor,
                   x_psi_layers: list[Tensor], rng: np.random.Generator) -> Tensor:
    """Margin objective over Psi-composed scores with one corruption each."""
    kg = model.kg
    x_psi = x_psi_layers[-1]
    pos_rows = ad.gather_rows(x_psi, batch)
    s_pos = ad.matmul(pos_rows, model.ns_head)
    neg_embs = []
    for i in batch:
        neg = sample_negative(kg, kg.triples[int(i)], "head_tail", rng)
        emb = overlay_embedding(model, neg, base_layers=x_psi_layers)
        neg_embs.append(ad.reshape(emb, (1, -1)))
    s_neg = ad.matmul(ad.concat(neg_embs, axis=0), model.ns_head)
    return ad.reduce_mean(ad.hinge(ad.add(ad.sub(s_neg, s_pos), model.hyper.gamma)))


def fit_leim(kg: KnowledgeGraph, spec: MpLayerSpec | str, estimator: str,
             hyper: NoranHyper, rule: LinkingRule | None = None) -> NoranModel:
    """Train representation stacks with the chosen objective, then fit the
    logistic link head on frozen features."""
    kind = spec.kind if isinstance(spec, MpLayerSpec) else MpLayerSpec(spec).kind
    hyper = NoranHyper(**{**hyper.__dict__, "backbone": kind, "estimator": estimator})
    model = NoranModel(kg, hyper, rule=rule)
    params = _repr_params(model)
    state = ad.AdamState(params)
    rng = np.random.default_rng(hyper.seed + 1)
    n = model.network.node_count
    last_good = [p.value.copy() for p in params]
    for step in range(hyper.steps):
        batch = rng.choice(n, size=min(hyper.batch_size, n), replace=False)
        x0 = gamma_features(model)
        layers = psi_forward(model, x0)
        if estimator == "jsd":
            loss = ad.mul(mi_jsd(model, batch, x0, layers[-1]), -1.0)
        elif estimator == "infonce":
            loss = ad.mul(mi_infonce(model, batch, x0, layers[-1]), -1.0)
        else:
            loss = _naive_ns_loss(model, batch, x0, layers, rng)
        if not np.isfinite(loss.value):
            for p, v in zip(params, last_good):
                p.assign(v)
            raise TrainingDiverged(f"non-finite loss at step {step}")
        grads = ad.gradients(loss, params)
        ad.adam_step(state, grads, hyper.lr)
        model.history.append(loss.item())
        last_good = [p.value.copy() for p in params]
    cache_base_layers(model)
    _fit_classifier(model)
    return model


def _fit_classifier(model: NoranModel) -> None:
    """Logistic regression on frozen Psi features, 1:1 corruptions."""
    kg = model.kg
    rng = np.random.default_rng(model.hyper.seed + 7)
    pos = model.base_layers[-1]
    negs = []
    for i in range(len(kg)):
        neg = sample_negative(kg, kg.triples[i], "head_tail", rng)
        negs.append(overlay_embedding(model, neg).value)
    feats = np.vstack([pos, np.array(negs)])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(negs))])
    w, b = model.cls_w, model.cls_b
    state = ad.AdamState([w, b])
    x_const = Tensor(feats)
    for _ in range(model.hyper.classifier_steps):
        logits = ad.add(ad.matmul(x_const, w), b)
        # logistic loss: softplus(logit) - y*logit
        loss = ad.reduce_mean(ad.sub(ad.softplus(logits), ad.mul(logits, labels)))
        grads = ad.gradients(loss, [w, b])
        ad.adam_step(state, grads, model.hyper.classifier_lr)


def save_model(path, model: NoranModel) -> None:
    ad.save_checkpoint(path, model.params())


def load_model(kg: KnowledgeGraph, hyper: NoranHyper, path,
               rule: LinkingRule | None = None) -> NoranModel:
    model = NoranModel(kg, hyper, rule=rule)
    ad.restore_params(model.params(), ad.load_checkpoint(path))
    cache_base_layers(model)
    return model
