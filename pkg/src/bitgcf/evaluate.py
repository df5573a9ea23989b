"""Top-K scoring from packed tables or live models, plus ranking metrics.

End-mode tables score entirely in integer arithmetic (int8 aggregates,
int32 accumulators: |score| <= (L+1)^2 * d, so 32 bits cover d <= 512 and
L <= 4 with big margins). Annealed tables score in fp32. Tie-breaking is
always by ascending item index so rankings are reproducible everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bitgcf.kernels import score_f32, score_int8
from bitgcf.model import ModelParams, VariantFlags, aggregate, forward
from bitgcf.store import QuantizedTable


def int_aggregate(table: QuantizedTable, node: int):
    """Layer-summed representation of one node: int vector (end) or fp32 (anl)."""
    if not 0 <= node < table.num_nodes:
        raise IndexError(f"node {node} out of range")
    return table.aggregated[node]


def score_all_items(table: QuantizedTable, user: int) -> np.ndarray:
    """Scores of one user against every item; exact integer math in end mode."""
    if not 0 <= user < table.num_users:
        raise IndexError(f"user {user} out of range")
    agg = table.aggregated
    items = agg[table.num_users:]
    query = agg[user]
    if table.mode == "end":
        out = np.empty(table.num_items, dtype=np.int32)
        score_int8(items, query, out)
    else:
        out = np.empty(table.num_items, dtype=np.float32)
        score_f32(items, query, out)
    return out


def topk(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Top-k item indices by descending score; ties break by ascending index.

    ``exclude`` (typically the user's train positives) is removed before
    ranking, so excluded items never appear.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    if exclude is not None and len(exclude) > 0:
        mask = np.zeros(len(scores), dtype=bool)
        mask[np.asarray(list(exclude), dtype=np.int64)] = True
        order = order[~mask[order]]
    return order[:k]


def recall_at_k(ranked, test_positives, k: int) -> float:
    """Fraction of the held-out positives present in the top-k list."""
    positives = set(int(i) for i in test_positives)
    if not positives:
        raise ValueError("recall undefined for a user with no test positives")
    hits = sum(1 for item in ranked[:k] if int(item) in positives)
    return hits / len(positives)


def ndcg_at_k(ranked, test_positives, k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(k, #positives)."""
    positives = set(int(i) for i in test_positives)
    if not positives:
        raise ValueError("NDCG undefined for a user with no test positives")
    dcg = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if int(item) in positives:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(positives)) + 1))
    return dcg / ideal


@dataclass
class MetricsReport:
    ks: tuple
    recall: dict  # k -> mean recall over evaluated users
    ndcg: dict  # k -> mean NDCG
    num_users_evaluated: int

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("K,recall,ndcg,users\n")
            for k in self.ks:
                fh.write(f"{k},{self.recall[k]:.10g},{self.ndcg[k]:.10g},"
                         f"{self.num_users_evaluated}\n")

    def __str__(self):
        lines = [f"users evaluated: {self.num_users_evaluated}"]
        for k in self.ks:
            lines.append(f"  recall@{k}={self.recall[k]:.4f}  ndcg@{k}={self.ndcg[k]:.4f}")
        return "\n".join(lines)


def _table_scores(table: QuantizedTable):
    agg = table.aggregated
    items = np.ascontiguousarray(agg[table.num_users:])
    integer = table.mode == "end"

    def score(user):
        if integer:
            out = np.empty(items.shape[0], dtype=np.int32)
            score_int8(items, agg[user], out)
        else:
            out = np.empty(items.shape[0], dtype=np.float32)
            score_f32(items, agg[user], out)
        return out

    return score


def _model_scores(params: ModelParams, flags: VariantFlags, graph):
    cache = forward(params, graph, flags)
    f = aggregate(cache, flags, training=False)
    f_items = f[graph.num_users:]

    def score(user):
        return f_items @ f[user]

    return score


def evaluate(source, split, ks=(20, 40, 60, 80, 100)) -> MetricsReport:
    """Rank all items per test user and average recall/NDCG at each cutoff.

    ``source`` is either a QuantizedTable or a (ModelParams, VariantFlags)
    pair evaluated on the train graph. Train positives are excluded from
    every ranking; users without test positives are skipped.
    """
    graph = split.train
    if isinstance(source, QuantizedTable):
        if source.num_users != graph.num_users or source.num_items != graph.num_items:
            raise ValueError("table and split disagree on user/item counts")
        score = _table_scores(source)
    else:
        params, flags = source
        score = _model_scores(params, flags, graph)

    ks = tuple(sorted(int(k) for k in ks))
    k_max = ks[-1]
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    evaluated = 0
    for user in range(graph.num_users):
        positives = split.test_positives[user]
        if len(positives) == 0:
            continue
        ranked = topk(score(user), k_max, exclude=graph.items_of(user))
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, positives, k)
            ndcg_sums[k] += ndcg_at_k(ranked, positives, k)
        evaluated += 1
    if evaluated == 0:
        raise ValueError("no users with test positives to evaluate")
    return MetricsReport(
        ks=ks,
        recall={k: recall_sums[k] / evaluated for k in ks},
        ndcg={k: ndcg_sums[k] / evaluated for k in ks},
        num_users_evaluated=evaluated,
    )
