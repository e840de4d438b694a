"""Ranking metrics and evaluation protocols.

Detection metrics rank triples ascending by confidence (lowest first);
completion metrics rank candidate entities by a plausibility scorer
(higher is better), with pessimistic tie handling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .kgstore import KnowledgeGraph, LabeledCorpus, Triple


@dataclass
class ConfidenceRanking:
    """Triple indices sorted ascending by confidence, with labels."""

    order: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if not (len(self.order) == len(self.scores) == len(self.labels)):
            raise ValueError("ranking arrays disagree in length")

    def __len__(self):
        return len(self.order)

    def dump(self, path) -> None:
        """Write `triple_index<TAB>confidence<TAB>is_error`, ascending."""
        with open(path, "w", encoding="utf-8") as fh:
            for idx in self.order:
                fh.write(f"{int(idx)}\t{self.scores[idx]:.10g}\t{int(self.labels[idx])}\n")


def load_ranking(path) -> ConfidenceRanking:
    order, scores, labels = [], {}, {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            idx_s, score_s, lab_s = line.split("\t")
            idx = int(idx_s)
            order.append(idx)
            scores[idx] = float(score_s)
            labels[idx] = bool(int(lab_s))
    n = max(order) + 1
    score_arr = np.zeros(n)
    label_arr = np.zeros(n, dtype=bool)
    for i in order:
        score_arr[i] = scores[i]
        label_arr[i] = labels[i]
    return ConfidenceRanking(np.array(order), score_arr, label_arr)


def make_ranking(scores: Sequence[float], corpus: LabeledCorpus) -> ConfidenceRanking:
    """Pair model confidences with corpus labels; sole label access point.

    Ascending by score, ties broken by triple index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(corpus.graph):
        raise ValueError("scores length != corpus size")
    order = np.lexsort((np.arange(len(scores)), scores))
    return ConfidenceRanking(order, scores, corpus.is_error.copy())


def precision_at_k(ranking: ConfidenceRanking, k_fraction: float) -> float:
    """Fraction of true errors among the floor(k*N) lowest-confidence triples."""
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    top = int(np.floor(k_fraction * len(ranking)))
    if top == 0:
        raise ValueError("k_fraction selects zero triples")
    picked = ranking.order[:top]
    return float(ranking.labels[picked].sum() / top)


def recall_at_k(ranking: ConfidenceRanking, k_fraction: float) -> float:
    """Fraction of all errors that appear among the top floor(k*N)."""
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    top = int(np.floor(k_fraction * len(ranking)))
    if top == 0:
        raise ValueError("k_fraction selects zero triples")
    total = ranking.labels.sum()
    if total == 0:
        raise ValueError("ranking has no labeled errors")
    picked = ranking.order[:top]
    return float(ranking.labels[picked].sum() / total)


@dataclass
class RankResult:
    rank: int
    mode: str

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")


Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def rank_entities(scorer: Scorer, triple: Triple, kg: KnowledgeGraph,
                  slot: str, mode: str = "filtered") -> RankResult:
    """Rank the gold entity against all substitutions in `slot`.

    `scorer(heads, rels, tails)` returns plausibility scores (higher is
    better) for candidate triples. Filtered mode drops candidates that
    form other known-true triples. Ties are pessimistic: the gold ranks
    below every candidate scoring >= its score.
    """
    if slot not in ("head", "tail"):
        raise ValueError(f"slot must be head or tail, got {slot!r}")
    if mode not in ("raw", "filtered"):
        raise ValueError(f"mode must be raw or filtered, got {mode!r}")
    triple = Triple(*triple)
    n = kg.num_entities
    cands = np.arange(n, dtype=np.int64)
    if slot == "head":
        heads, rels, tails = cands, np.full(n, triple.relation), np.full(n, triple.tail)
        gold = triple.head
    else:
        heads, rels, tails = np.full(n, triple.head), np.full(n, triple.relation), cands
        gold = triple.tail
    keep = np.ones(n, dtype=bool)
    if mode == "filtered":
        for c in range(n):
            if c == gold:
                continue
            cand = Triple(int(heads[c]), int(rels[c]), int(tails[c]))
            if cand in kg.triple_set:
                keep[c] = False
    scores = np.asarray(scorer(heads[keep], rels[keep], tails[keep]), dtype=np.float64)
    kept_ids = cands[keep]
    gold_pos = int(np.nonzero(kept_ids == gold)[0][0])
    gold_score = scores[gold_pos]
    better_or_equal = int(np.sum(scores >= gold_score)) - 1  # exclude gold itself
    return RankResult(rank=1 + better_or_equal, mode=mode)


def mrr_hits(ranks: Iterable[int], ks: Sequence[int] = (1, 3, 10)) -> dict[str, float]:
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in ks:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out


# ---------------------------------------------------------------------------
# report assembly


def detection_table(rankings: dict[str, ConfidenceRanking],
                    k_fractions: Sequence[float] = (0.01, 0.02, 0.03, 0.04, 0.05)) -> str:
    """Precision@K / Recall@K table over the given named rankings."""
    header = ["method"] + [f"P@{k:.0%}" for k in k_fractions] + [f"R@{k:.0%}" for k in k_fractions]
    rows = [header]
    for name, ranking in rankings.items():
        row = [name]
        row += [f"{precision_at_k(ranking, k):.3f}" for k in k_fractions]
        row += [f"{recall_at_k(ranking, k):.3f}" for k in k_fractions]
        rows.append(row)
    return _fmt_table(rows)


def completion_table(summaries: dict[str, dict[str, float]]) -> str:
    """MRR / Hits@K table from mrr_hits summaries keyed by method."""
    metrics = sorted({m for s in summaries.values() for m in s},
                     key=lambda m: (m != "mrr", m))
    rows = [["method"] + metrics]
    for name, summary in summaries.items():
        rows.append([name] + [f"{summary.get(m, float('nan')):.3f}" for m in metrics])
    return _fmt_table(rows)


def _fmt_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
