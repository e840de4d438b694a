"""Attribute-aware error detection: dual hypergraph contrast plus a
three-signal confidence that feeds back into a weighted margin loss.

One hypergraph view carries relational structure, the other rebuilds
each triple from its entities' attribute types under relation-specific
attention; both share the same adjacency. Confidence blends
translational energy, local/global agreement, and structure/attribute
agreement, and gates how strongly each triple pulls on the embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .evalkit import ConfidenceRanking, make_ranking
from .kgstore import AttributeTable, KnowledgeGraph, LabeledCorpus, Triple, sample_negative
from .views import LinkingRule, build_triple_graph, neighbor_sample


@dataclass
class AekeHyper:
    dim: int = 16
    tau: float = 0.5
    gamma: float = 0.5
    lam1: float = 0.05         # weight of local/global agreement in confidence
    lam2: float = 0.02         # weight of structure/attribute agreement
    beta: float = 10.0         # weight of the margin term in the joint loss
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 256
    seed: int = 0
    m: int = 8
    hub_cap: int = 500
    warmup_frac: float = 0.5   # fraction of epochs trained with C held at 1
    score_samples: int = 3     # neighbor redraws averaged when scoring

    def __post_init__(self):
        if self.beta < 0 or self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("beta, lam1, lam2 must be >= 0")
        if self.gamma <= 0 or self.tau <= 0:
            raise ValueError("gamma and tau must be > 0")
        if self.dim % 2:
            raise ValueError("dim must be even")


class TrainingDiverged(RuntimeError):
    pass


class AekeModel:
    """Embeddings, both attention stacks, and the shared hypergraph."""

    def __init__(self, graph: KnowledgeGraph, attrs: AttributeTable, hyper: AekeHyper):
        self.graph = graph
        self.attrs = attrs
        self.hyper = hyper
        d = hyper.dim
        rng = np.random.default_rng(hyper.seed)
        self.entity_emb = Parameter(ad.xavier_init((graph.num_entities, d), rng), "entity_emb")
        self.relation_emb = Parameter(ad.xavier_init((graph.num_relations, d), rng), "relation_emb")
        n_attr = max(len(attrs.attr_type_names), 1)
        self.attr_emb = Parameter(ad.xavier_init((n_attr, d), rng), "attr_emb")
        hidden = d // 2
        self.lstm_fwd = ad.lstm_init(d, hidden, rng, "lstm_fwd")
        self.lstm_bwd = ad.lstm_init(d, hidden, rng, "lstm_bwd")
        # square projections keep view vectors comparable to the 3d locals
        self.proj_rel = Parameter(ad.xavier_init((3 * d, 3 * d), rng), "proj_rel")
        self.att_rel = Parameter(ad.xavier_init((6 * d,), rng), "att_rel")
        self.proj_attr = Parameter(ad.xavier_init((3 * d, 3 * d), rng), "proj_attr")
        self.att_attr = Parameter(ad.xavier_init((6 * d,), rng), "att_attr")
        self.attr_head = Parameter(ad.xavier_init((2 * d,), rng), "attr_head")
        self.hypergraph = build_triple_graph(graph, LinkingRule.any_share(),
                                             hub_cap=hyper.hub_cap, seed=hyper.seed)
        # padded per-entity attribute grid for vectorized attention
        a_max = max((len(a) for a in attrs.per_entity.values()), default=0)
        self.attr_grid = np.zeros((graph.num_entities, max(a_max, 1)), dtype=np.int64)
        self.attr_mask = np.zeros((graph.num_entities, max(a_max, 1)), dtype=bool)
        for e in range(graph.num_entities):
            a = attrs.attrs_of(e)
            self.attr_grid[e, :len(a)] = a
            self.attr_mask[e, :len(a)] = True
        self.stats = {"attr_fallbacks": 0, "attention_fallbacks": 0}
        self.loss_history: list[float] = []
        self.confidences = np.ones(len(graph))

    def params(self) -> list[Parameter]:
        ps = [self.entity_emb, self.relation_emb, self.attr_emb,
              self.proj_rel, self.att_rel, self.proj_attr, self.att_attr,
              self.attr_head]
        for w in (self.lstm_fwd, self.lstm_bwd):
            ps += [w["wx"], w["wh"], w["b"]]
        return ps


def attr_entity_embed_batch(model: AekeModel, rels: np.ndarray,
                            ents: np.ndarray) -> Tensor:
    """Relation-attended attribute embedding per entity; (B, d).

    Entities without attributes fall back to their structural embedding
    (counted in stats).
    """
    d = model.hyper.dim
    B = len(ents)
    grid = model.attr_grid[ents]
    mask = model.attr_mask[ents]
    A = grid.shape[1]
    e_r = ad.gather_rows(model.relation_emb, rels)                    # (B, d)
    e_a = ad.reshape(ad.gather_rows(model.attr_emb, grid.reshape(-1)), (B, A, d))
    u1 = ad.slice_cols(model.attr_head, 0, d)
    u2 = ad.slice_cols(model.attr_head, d, 2 * d)
    s_rel = ad.reshape(ad.matmul(e_r, u1), (B, 1))
    s_attr = ad.reduce_sum(ad.mul(e_a, ad.reshape(u2, (1, 1, d))), axis=2)
    alpha = ad.masked_softmax(ad.leaky_relu(ad.add(s_rel, s_attr), 0.2), mask, axis=1)
    pooled = ad.reduce_sum(ad.mul(ad.reshape(alpha, (B, A, 1)), e_a), axis=1)
    no_attr = ~mask.any(axis=1)
    model.stats["attr_fallbacks"] += int(no_attr.sum())
    e_struct = ad.gather_rows(model.entity_emb, ents)
    return ad.where_const(no_attr[:, None], e_struct, pooled)


def attr_entity_embed(model: AekeModel, relation: int, entity: int) -> Tensor:
    out = attr_entity_embed_batch(model, np.array([relation]), np.array([entity]))
    return ad.reshape(out, (model.hyper.dim,))


def local_features(model: AekeModel, idx: np.ndarray) -> Tensor:
    """Bi-LSTM local triple representation p; (B, 3d)."""
    kg = model.graph
    e_h = ad.gather_rows(model.entity_emb, kg.heads[idx])
    e_r = ad.gather_rows(model.relation_emb, kg.rels[idx])
    e_t = ad.gather_rows(model.entity_emb, kg.tails[idx])
    hidden = model.hyper.dim // 2
    outs = ad.bilstm_run([e_h, e_r, e_t], model.lstm_fwd, model.lstm_bwd, hidden)
    return ad.concat(outs, axis=1)


def attr_node_feature_batch(model: AekeModel, idx: np.ndarray) -> Tensor:
    """Attribute-view node features concat(e_hat_h, e_r, e_hat_t); (B, 3d)."""
    kg = model.graph
    rels = kg.rels[idx]
    e_hat_h = attr_entity_embed_batch(model, rels, kg.heads[idx])
    e_hat_t = attr_entity_embed_batch(model, rels, kg.tails[idx])
    e_r = ad.gather_rows(model.relation_emb, rels)
    return ad.concat([e_hat_h, e_r, e_hat_t], axis=1)


def attr_node_feature(model: AekeModel, triple_index: int) -> Tensor:
    out = attr_node_feature_batch(model, np.array([triple_index]))
    return ad.reshape(out, (3 * model.hyper.dim,))


def _attend(model: AekeModel, anchors_f: Tensor, neighbors_f: Tensor,
            grid_shape: tuple[int, int], mask: np.ndarray,
            proj: Parameter, att: Parameter, self_connection: bool = False) -> Tensor:
    """Softmax attention aggregation (no threshold); (B, 3d).

    With `self_connection` the anchor's own projection is added to the
    attended neighbor sum (A+I style), keeping per-node content visible.
    """
    B, m = grid_shape
    width = proj.value.shape[1]
    p_anchor = ad.matmul(anchors_f, proj)
    p_nb = ad.reshape(ad.matmul(neighbors_f, proj), (B, m, width))
    a1 = ad.slice_cols(att, 0, width)
    a2 = ad.slice_cols(att, width, 2 * width)
    s1 = ad.reshape(ad.matmul(p_anchor, a1), (B, 1))
    s2 = ad.reduce_sum(ad.mul(p_nb, ad.reshape(a2, (1, 1, width))), axis=2)
    alpha = ad.masked_softmax(ad.leaky_relu(ad.add(s1, s2), 0.2), mask, axis=1)
    weighted = ad.reduce_sum(ad.mul(ad.reshape(alpha, (B, m, 1)), p_nb), axis=1)
    isolated = ~mask.any(axis=1)
    model.stats["attention_fallbacks"] += int(isolated.sum())
    if self_connection:
        keep = (~isolated)[:, None].astype(np.float64)
        return ad.elu(ad.add(p_anchor, ad.mul(weighted, keep)))
    return ad.elu(ad.where_const(isolated[:, None], p_anchor, weighted))


def _neighbor_grid(model: AekeModel, anchors: np.ndarray,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    m = model.hyper.m
    grid = np.zeros((len(anchors), m), dtype=np.int64)
    mask = np.zeros((len(anchors), m), dtype=bool)
    for row, a in enumerate(anchors):
        ns = neighbor_sample(model.hypergraph, int(a), m, rng)
        grid[row, :len(ns)] = ns
        mask[row, :len(ns)] = True
    return grid, mask


def view_representations(model: AekeModel, anchors: np.ndarray,
                         rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """(p, x, z): local, relational-view, and attribute-view features.

    The relational view aggregates neighbors only; the attribute view
    additionally attends to the anchor's own attribute feature, so a
    triple's attribute/relation mismatch stays visible in z.
    """
    grid, mask = _neighbor_grid(model, anchors, rng)
    flat = grid.reshape(-1)
    p_anchor = local_features(model, anchors)
    p_nb = local_features(model, flat)
    x = _attend(model, p_anchor, p_nb, grid.shape, mask, model.proj_rel, model.att_rel)
    n_anchor = attr_node_feature_batch(model, anchors)
    n_nb = attr_node_feature_batch(model, flat)
    z = _attend(model, n_anchor, n_nb, grid.shape, mask, model.proj_attr,
                model.att_attr, self_connection=True)
    return p_anchor, x, z


def nt_xent(x: Tensor, z: Tensor, tau: float) -> Tensor:
    from .caged import nt_xent_loss

    return nt_xent_loss(x, z, tau)


def dual_view_losses(model: AekeModel, batch: np.ndarray,
                     rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """(L_sa, L_lg, L_con) over a batch; L_con is their plain average."""
    if len(batch) < 2:
        raise ValueError("contrastive batch needs at least 2 triples")
    p, x, z = view_representations(model, batch, rng)
    tau = model.hyper.tau
    l_sa = nt_xent(x, z, tau)
    l_lg = nt_xent(p, x, tau)
    l_con = ad.mul(ad.add(l_sa, l_lg), 0.5)
    return l_sa, l_lg, l_con


def energy_batch(model: AekeModel, heads, rels, tails) -> Tensor:
    e_h = ad.gather_rows(model.entity_emb, heads)
    e_r = ad.gather_rows(model.relation_emb, rels)
    e_t = ad.gather_rows(model.entity_emb, tails)
    return ad.l2_norm(ad.sub(ad.add(e_h, e_r), e_t), axis=1)


def triple_confidences(model: AekeModel, idx: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """C = sigmoid(LT + lam1*GT + lam2*AT) per triple (frozen forward).

    The view cosines are averaged over `score_samples` neighbor
    redraws to damp sampling noise.
    """
    kg = model.graph
    e = energy_batch(model, kg.heads[idx], kg.rels[idx], kg.tails[idx]).value
    lt = 1.0 / (1.0 + np.exp(e))                      # sigmoid(-E)
    gts, ats = [], []
    for _ in range(max(model.hyper.score_samples, 1)):
        p, x, z = view_representations(model, idx, rng)
        gts.append(_cos_rows(p.value, x.value))
        ats.append(_cos_rows(x.value, z.value))
    gt = np.mean(gts, axis=0)
    at = np.mean(ats, axis=0)
    mix = lt + model.hyper.lam1 * gt + model.hyper.lam2 * at
    return 1.0 / (1.0 + np.exp(-mix))


def triple_confidence(model: AekeModel, triple_index: int) -> float:
    rng = np.random.default_rng(model.hyper.seed + 99)
    return float(triple_confidences(model, np.array([triple_index]), rng)[0])


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12
    return num / den


def error_aware_margin_loss(model: AekeModel, batch: np.ndarray,
                            confidences: np.ndarray,
                            rng: np.random.Generator) -> Tensor:
    """Mean hinge(gamma + C*E(pos) - E(neg)); negatives may corrupt the
    relation as well as either entity."""
    kg = model.graph
    c = confidences[batch]
    if np.any((c < 0) | (c > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    negs = [sample_negative(kg, kg.triples[int(i)], "head_tail_relation", rng)
            for i in batch]
    nh = np.array([n.head for n in negs])
    nr = np.array([n.relation for n in negs])
    nt = np.array([n.tail for n in negs])
    e_pos = energy_batch(model, kg.heads[batch], kg.rels[batch], kg.tails[batch])
    e_neg = energy_batch(model, nh, nr, nt)
    gated = ad.mul(e_pos, c)
    return ad.reduce_mean(ad.hinge(ad.add(ad.sub(gated, e_neg), model.hyper.gamma)))


def fit_joint(corpus: LabeledCorpus, attrs: AttributeTable,
              hyper: AekeHyper) -> AekeModel:
    """Alternating loop: refresh confidences on a frozen snapshot each
    epoch, then optimize L_con + beta * L_emb with them held fixed."""
    if len(corpus.graph) < 2:
        raise ValueError("corpus must hold at least 2 triples")
    cov = attrs.coverage(corpus.graph.num_entities)
    if cov < 0.5:
        warnings.warn(f"attribute coverage is only {cov:.0%}")
    model = AekeModel(corpus.graph, attrs, hyper)
    params = model.params()
    state = ad.AdamState(params)
    rng = np.random.default_rng(hyper.seed + 1)
    score_rng_seed = hyper.seed + 99
    n = len(corpus.graph)
    last_good = [p.value.copy() for p in params]
    warmup = int(np.ceil(hyper.warmup_frac * hyper.epochs))
    for epoch in range(hyper.epochs):
        if epoch < warmup:
            model.confidences = np.ones(n)
        else:
            model.confidences = _all_confidences(model, score_rng_seed)
        perm = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            batch = perm[start:start + hyper.batch_size]
            if len(batch) < 2:
                continue
            _, _, l_con = dual_view_losses(model, batch, rng)
            loss = l_con
            if hyper.beta > 0:
                l_emb = error_aware_margin_loss(model, batch, model.confidences, rng)
                loss = ad.add(l_con, ad.mul(l_emb, hyper.beta))
            if not np.isfinite(loss.value):
                for p, v in zip(params, last_good):
                    p.assign(v)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            grads = ad.gradients(loss, params)
            ad.adam_step(state, grads, hyper.lr)
            epoch_loss += loss.item()
            batches += 1
        model.loss_history.append(epoch_loss / max(batches, 1))
        last_good = [p.value.copy() for p in params]
    model.confidences = _all_confidences(model, score_rng_seed)
    return model


def _all_confidences(model: AekeModel, seed: int, chunk: int = 512) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(model.graph)
    out = np.zeros(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        out[idx] = triple_confidences(model, idx, rng)
    return out


def confidence_scores(model: AekeModel, corpus: LabeledCorpus) -> ConfidenceRanking:
    scores = _all_confidences(model, model.hyper.seed + 99)
    return make_ranking(scores, corpus)


def save_model(path, model: AekeModel) -> None:
    ad.save_checkpoint(path, model.params())


def load_model(corpus: LabeledCorpus, attrs: AttributeTable, hyper: AekeHyper,
               path) -> AekeModel:
    model = AekeModel(corpus.graph, attrs, hyper)
    ad.restore_params(model.params(), ad.load_checkpoint(path))
    model.confidences = _all_confidences(model, hyper.seed + 99)
    return model
