"""Dual-view contrastive error detection with error-aware attention.

Triples become nodes in two graph views (shared head / shared tail);
each triple is encoded by a Bi-LSTM over its (head, relation, tail)
embeddings, aggregated from sampled neighbors by thresholded attention,
and trained with a margin embedding loss plus a cross-view contrastive
loss. Confidence combines translational energy with cross-view
agreement; the lowest-confidence triples are the suspected errors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .evalkit import ConfidenceRanking, make_ranking
from .kgstore import KnowledgeGraph, LabeledCorpus, Triple, sample_negative
from .views import LinkingRule, TripleGraph, build_triple_graph, neighbor_sample


@dataclass
class CagedHyper:
    """Hyperparameters; defaults follow the desk-scale configuration."""

    dim: int = 16
    mu: float = 0.005          # attention threshold
    gamma: float = 0.5         # margin
    lam: float = 0.1           # loss trade-off, also the confidence mix
    tau: float = 0.5           # contrastive temperature
    m: int = 8                 # neighbors sampled per anchor
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 256
    seed: int = 0
    encoder: str = "bilstm"    # "bilstm" | "concat" (Var_Concat ablation)
    use_margin: bool = True    # False = Var_Global
    hub_cap: int = 500

    def __post_init__(self):
        if not 0 <= self.mu < 1:
            raise ValueError("mu must be in [0, 1)")
        if self.gamma <= 0 or self.tau <= 0 or self.lam < 0:
            raise ValueError("gamma, tau must be > 0 and lam >= 0")
        if self.dim % 2:
            raise ValueError("dim must be even (Bi-LSTM halves it per direction)")
        if self.encoder not in ("bilstm", "concat"):
            raise ValueError(f"unknown encoder {self.encoder!r}")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the model was restored to the last good epoch."""


class CagedModel:
    """Parameters plus the two graph views built over a corpus."""

    def __init__(self, graph: KnowledgeGraph, hyper: CagedHyper):
        self.graph = graph
        self.hyper = hyper
        d = hyper.dim
        rng = np.random.default_rng(hyper.seed)
        self.entity_emb = Parameter(ad.xavier_init((graph.num_entities, d), rng), "entity_emb")
        self.relation_emb = Parameter(ad.xavier_init((graph.num_relations, d), rng), "relation_emb")
        hidden = d // 2
        self.lstm_fwd = ad.lstm_init(d, hidden, rng, "lstm_fwd")
        self.lstm_bwd = ad.lstm_init(d, hidden, rng, "lstm_bwd")
        self.proj = Parameter(ad.xavier_init((3 * d, d), rng), "proj")
        self.att = Parameter(ad.xavier_init((2 * d,), rng), "att")
        self.view_head = build_triple_graph(graph, LinkingRule.head_share(),
                                            hub_cap=hyper.hub_cap, seed=hyper.seed)
        self.view_tail = build_triple_graph(graph, LinkingRule.tail_share(),
                                            hub_cap=hyper.hub_cap, seed=hyper.seed)
        self.stats = {"attention_fallbacks": 0}
        self.loss_history: list[float] = []

    def params(self) -> list[Parameter]:
        ps = [self.entity_emb, self.relation_emb, self.proj, self.att]
        for w in (self.lstm_fwd, self.lstm_bwd):
            ps += [w["wx"], w["wh"], w["b"]]
        return ps

    def view(self, which: str) -> TripleGraph:
        if which in ("I", "head"):
            return self.view_head
        if which in ("II", "tail"):
            return self.view_tail
        raise ValueError(f"unknown view {which!r}")


def encode_batch(model: CagedModel, heads, rels, tails) -> Tensor:
    """Triple representations q for index arrays; (batch, 3*dim)."""
    e_h = ad.gather_rows(model.entity_emb, heads)
    e_r = ad.gather_rows(model.relation_emb, rels)
    e_t = ad.gather_rows(model.entity_emb, tails)
    if model.hyper.encoder == "concat":
        return ad.concat([e_h, e_r, e_t], axis=1)
    hidden = model.hyper.dim // 2
    outs = ad.bilstm_run([e_h, e_r, e_t], model.lstm_fwd, model.lstm_bwd, hidden)
    return ad.concat(outs, axis=1)


def encode_triple(model: CagedModel, triple: Triple) -> Tensor:
    """q for one triple; length 3*dim."""
    t = Triple(*triple)
    q = encode_batch(model, np.array([t.head]), np.array([t.relation]), np.array([t.tail]))
    return ad.reshape(q, (3 * model.hyper.dim,))


def _attention_block(model: CagedModel, anchors_q: Tensor, neighbor_idx: np.ndarray,
                     neighbor_mask: np.ndarray, neighbors_q: Tensor) -> Tensor:
    """Thresholded attention over padded neighbor slabs.

    anchors_q: (B, 3d); neighbors_q: (B*m, 3d) aligned with the padded
    (B, m) neighbor grid; rows where the mask is all-False fall back to
    the anchor's own projection (counted).
    """
    hyper = model.hyper
    B, m = neighbor_mask.shape
    p_anchor = ad.matmul(anchors_q, model.proj)                   # (B, d)
    p_nb_flat = ad.matmul(neighbors_q, model.proj)                # (B*m, d)
    p_nb = ad.reshape(p_nb_flat, (B, m, hyper.dim))
    a1 = ad.slice_cols(model.att, 0, hyper.dim)
    a2 = ad.slice_cols(model.att, hyper.dim, 2 * hyper.dim)
    s_anchor = ad.reshape(ad.matmul(p_anchor, a1), (B, 1))
    s_nb = ad.reduce_sum(ad.mul(p_nb, ad.reshape(a2, (1, 1, hyper.dim))), axis=2)
    logits = ad.leaky_relu(ad.add(s_anchor, s_nb), 0.2)           # (B, m)
    alpha_bar = ad.masked_softmax(logits, neighbor_mask, axis=1)
    surviving = (alpha_bar.value > hyper.mu) & neighbor_mask
    alpha = ad.mul(alpha_bar, surviving.astype(np.float64))       # zeroed, NOT renormalized
    weighted = ad.reduce_sum(ad.mul(ad.reshape(alpha, (B, m, 1)), p_nb), axis=1)
    fallback = ~surviving.any(axis=1)
    model.stats["attention_fallbacks"] += int(fallback.sum())
    mixed = ad.where_const(fallback[:, None], p_anchor, weighted)
    return ad.elu(mixed)


def _sample_neighbor_grid(view: TripleGraph, anchors: np.ndarray, m: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pad per-anchor samples into a (B, m) grid plus validity mask."""
    B = len(anchors)
    grid = np.zeros((B, m), dtype=np.int64)
    mask = np.zeros((B, m), dtype=bool)
    for row, a in enumerate(anchors):
        ns = neighbor_sample(view, int(a), m, rng)
        grid[row, :len(ns)] = ns
        mask[row, :len(ns)] = True
    return grid, mask


def aggregate_batch(model: CagedModel, anchors: np.ndarray, which: str,
                    rng: np.random.Generator) -> Tensor:
    """View representations x (or z) for a batch of anchor nodes; (B, d)."""
    view = model.view(which)
    grid, mask = _sample_neighbor_grid(view, anchors, model.hyper.m, rng)
    flat = grid.reshape(-1)
    tg = model.graph
    anchors_q = encode_batch(model, tg.heads[anchors], tg.rels[anchors], tg.tails[anchors])
    neighbors_q = encode_batch(model, tg.heads[flat], tg.rels[flat], tg.tails[flat])
    return _attention_block(model, anchors_q, grid, mask, neighbors_q)


def aggregate_view(model: CagedModel, anchor: int, which: str,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Single-anchor convenience wrapper; returns a (dim,) tensor."""
    if rng is None:
        rng = np.random.default_rng(model.hyper.seed)
    x = aggregate_batch(model, np.array([anchor]), which, rng)
    return ad.reshape(x, (model.hyper.dim,))


def energy_batch(model: CagedModel, heads, rels, tails) -> Tensor:
    """Translational energy ||e_h + e_r - e_t||_2 per triple."""
    e_h = ad.gather_rows(model.entity_emb, heads)
    e_r = ad.gather_rows(model.relation_emb, rels)
    e_t = ad.gather_rows(model.entity_emb, tails)
    return ad.l2_norm(ad.sub(ad.add(e_h, e_r), e_t), axis=1)


def kge_margin_loss(model: CagedModel, batch: np.ndarray,
                    rng: np.random.Generator) -> Tensor:
    """Mean hinge(gamma + E(pos) - E(neg)), one head/tail corruption each."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    kg = model.graph
    negs = [sample_negative(kg, kg.triples[int(i)], "head_tail", rng) for i in batch]
    nh = np.array([n.head for n in negs])
    nr = np.array([n.relation for n in negs])
    nt = np.array([n.tail for n in negs])
    e_pos = energy_batch(model, kg.heads[batch], kg.rels[batch], kg.tails[batch])
    e_neg = energy_batch(model, nh, nr, nt)
    return ad.reduce_mean(ad.hinge(ad.add(ad.sub(e_pos, e_neg), model.hyper.gamma)))


def nt_xent_loss(x: Tensor, z: Tensor, tau: float) -> Tensor:
    """Temperature-scaled contrastive loss, positives excluded from the
    denominator (as the printed equation has it)."""
    n = x.value.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    xn = ad.normalize_rows(x)
    zn = ad.normalize_rows(z)
    sims = ad.mul(ad.matmul(xn, ad.transpose(zn)), 1.0 / tau)    # (n, n)
    pos = ad.reduce_sum(ad.mul(xn, zn), axis=1)                  # diagonal cosines
    off_diag = 1.0 - np.eye(n)
    denom = ad.reduce_sum(ad.mul(ad.exp(sims), off_diag), axis=1)
    losses = ad.sub(ad.log(denom), ad.mul(pos, 1.0 / tau))
    return ad.reduce_mean(losses)


def joint_loss(model: CagedModel, batch: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Margin + lambda * contrastive, honoring ablation flags."""
    hyper = model.hyper
    terms = []
    if hyper.use_margin:
        terms.append(kge_margin_loss(model, batch, rng))
    if hyper.lam > 0:
        x = aggregate_batch(model, batch, "I", rng)
        z = aggregate_batch(model, batch, "II", rng)
        terms.append(ad.mul(nt_xent_loss(x, z, hyper.tau), hyper.lam))
    if not terms:
        raise ValueError("both loss terms disabled")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def fit(corpus: LabeledCorpus, hyper: CagedHyper) -> CagedModel:
    """Train on a labeled corpus without ever reading its labels."""
    if len(corpus.graph) < 2:
        raise ValueError("corpus must hold at least 2 triples")
    model = CagedModel(corpus.graph, hyper)
    params = model.params()
    state = ad.AdamState(params)
    rng = np.random.default_rng(hyper.seed + 1)
    n = len(corpus.graph)
    last_good = [p.value.copy() for p in params]
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            batch = perm[start:start + hyper.batch_size]
            if len(batch) < 2:
                continue
            loss = joint_loss(model, batch, rng)
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
    return model


def confidence_scores(model: CagedModel, corpus: LabeledCorpus) -> ConfidenceRanking:
    """C = sigmoid(-E) + lambda * cos(x, z), ranked ascending."""
    scores = raw_confidences(model)
    return make_ranking(scores, corpus)


def raw_confidences(model: CagedModel, chunk: int = 512) -> np.ndarray:
    """Per-triple confidences against the model's own graph (label-free)."""
    kg = model.graph
    rng = np.random.default_rng(model.hyper.seed + 99)
    n = len(kg)
    out = np.zeros(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        e = energy_batch(model, kg.heads[idx], kg.rels[idx], kg.tails[idx]).value
        x = aggregate_batch(model, idx, "I", rng).value
        z = aggregate_batch(model, idx, "II", rng).value
        num = (x * z).sum(axis=1)
        den = np.linalg.norm(x, axis=1) * np.linalg.norm(z, axis=1) + 1e-12
        cos = num / den
        out[idx] = 1.0 / (1.0 + np.exp(e)) + model.hyper.lam * cos
    return out


def transe_baseline(corpus: LabeledCorpus, hyper: CagedHyper) -> ConfidenceRanking:
    """Energy-only baseline: margin-trained embeddings, C = sigmoid(-E)."""
    model = fit(corpus, replace(hyper, lam=0.0, use_margin=True))
    return confidence_scores(model, corpus)


def save_model(path, model: CagedModel) -> None:
    ad.save_checkpoint(path, model.params())


def load_model(corpus: LabeledCorpus, hyper: CagedHyper, path) -> CagedModel:
    model = CagedModel(corpus.graph, hyper)
    ad.restore_params(model.params(), ad.load_checkpoint(path))
    return model
