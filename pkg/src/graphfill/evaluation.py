"""Top-K ranking metrics, sparsity-bucketed reporting, and score export.

Rankings exclude each user's training items, break score ties by ascending
item index, and rank the full catalog (no sampled candidate sets). Users
without test items are skipped, never counted as zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ingest import InteractionSet, build_matrix, sparsity_groups


def rank_items(scores: np.ndarray, exclude: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top-k items by score, excluded items removed first.

    Ties break toward the smaller index. If fewer than k candidates remain
    after exclusion the list is just shorter.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    masked = scores.copy()
    exclude = np.asarray(exclude, dtype=np.int64)
    if exclude.size:
        masked[exclude] = -np.inf
    order = np.lexsort((np.arange(masked.size), -masked))
    top = order[:k]
    return top[np.isfinite(masked[top])]


def recall_at_k(ranked: np.ndarray, relevant, k: int | None = None) -> float:
    """Fraction of the relevant items that appear in the first k positions."""
    rel = set(int(i) for i in relevant)
    if not rel:
        raise ValueError("relevant set must be nonempty")
    top = np.asarray(ranked)[:k] if k is not None else np.asarray(ranked)
    hits = sum(1 for i in top.tolist() if i in rel)
    return hits / len(rel)


def ndcg_at_k(ranked: np.ndarray, relevant, k: int) -> float:
    """Binary-relevance NDCG: DCG over the first k positions / ideal DCG."""
    rel = set(int(i) for i in relevant)
    if not rel:
        raise ValueError("relevant set must be nonempty")
    top = np.asarray(ranked)[:k]
    dcg = sum(1.0 / np.log2(pos + 2.0) for pos, i in enumerate(top.tolist()) if i in rel)
    ideal = sum(1.0 / np.log2(pos + 2.0) for pos in range(min(k, len(rel))))
    return dcg / ideal


@dataclass
class MetricReport:
    ks: tuple
    recall: dict
    ndcg: dict
    n_users: int

    def to_json(self) -> str:
        payload = {
            "n_users": self.n_users,
            "recall": {str(k): self.recall[k] for k in self.ks},
            "ndcg": {str(k): self.ndcg[k] for k in self.ks},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["k,recall,ndcg"]
        for k in self.ks:
            lines.append(f"{k},{self.recall[k]!r},{self.ndcg[k]!r}")
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        parts = [f"users evaluated: {self.n_users}"]
        for k in self.ks:
            parts.append(f"  recall@{k} = {self.recall[k]:.4f}   ndcg@{k} = {self.ndcg[k]:.4f}")
        return "\n".join(parts)


def _test_lists(data: InteractionSet) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    te_users, te_items = data.pairs("test")
    for u, i in zip(te_users.tolist(), te_items.tolist()):
        out.setdefault(u, []).append(i)
    return out


def evaluate(state, data: InteractionSet, ks=(20, 40), chunk: int = 512) -> MetricReport:
    """Mean recall/NDCG over all users holding test items.

    `state` needs `score_users(users, pooled=None)` over the full catalog and
    (optionally) `pooled_embeddings()` so propagation runs once. Training
    items (the validation holdout included) are excluded from rankings.
    """
    ks = tuple(int(k) for k in ks)
    if not ks or min(ks) < 1:
        raise ValueError("ks must be positive")
    relevant = _test_lists(data)
    if not relevant:
        raise ValueError("no test interactions to evaluate")
    users = np.asarray(sorted(relevant), dtype=np.int64)
    r_train = build_matrix(data, "train")
    pooled = state.pooled_embeddings() if hasattr(state, "pooled_embeddings") else None
    kmax = max(ks)

    rec_sum = {k: 0.0 for k in ks}
    ndcg_sum = {k: 0.0 for k in ks}
    for start in range(0, users.size, chunk):
        batch = users[start : start + chunk]
        scores = state.score_users(batch, pooled=pooled)
        for row, u in enumerate(batch.tolist()):
            exclude = r_train.indices[r_train.indptr[u] : r_train.indptr[u + 1]]
            ranked = rank_items(scores[row], exclude, kmax)
            rel = relevant[u]
            for k in ks:
                rec_sum[k] += recall_at_k(ranked, rel, k)
                ndcg_sum[k] += ndcg_at_k(ranked, rel, k)
    n = int(users.size)
    return MetricReport(
        ks=ks,
        recall={k: float(rec_sum[k]) / n for k in ks},
        ndcg={k: float(ndcg_sum[k]) / n for k in ks},
        n_users=n,
    )


def sparsity_report(state, data: InteractionSet, n_groups: int = 5, k: int = 20) -> list[dict]:
    """Per-group NDCG@k for test users bucketed by training degree.

    Returns one row per group: group id, degree range, user count, ndcg.
    """
    groups = sparsity_groups(data, n_groups)
    relevant = _test_lists(data)
    r_train = build_matrix(data, "train")
    pooled = state.pooled_embeddings() if hasattr(state, "pooled_embeddings") else None

    rows = []
    for g in range(groups.n_groups):
        members = groups.users[groups.group == g]
        total = 0.0
        for start in range(0, members.size, 512):
            batch = members[start : start + 512]
            scores = state.score_users(batch, pooled=pooled)
            for row, u in enumerate(batch.tolist()):
                exclude = r_train.indices[r_train.indptr[u] : r_train.indptr[u + 1]]
                ranked = rank_items(scores[row], exclude, k)
                total += ndcg_at_k(ranked, relevant[u], k)
        lo, hi = groups.boundaries[g]
        rows.append(
            {
                "group": g,
                "min_degree": lo,
                "max_degree": hi,
                "n_users": int(members.size),
                f"ndcg{k}": float(total) / members.size if members.size else float("nan"),
            }
        )
    return rows


def export_heatmap(state, data: InteractionSet, user_keys, item_keys, path) -> None:
    """Write the score submatrix for the named users and items as CSV.

    Keys are the raw ids from the source data; unknown keys raise with the
    full offending list.
    """
    missing = [k for k in user_keys if k not in data.user_index]
    missing += [k for k in item_keys if k not in data.item_index]
    if missing:
        raise KeyError(f"unknown ids: {missing}")
    users = np.asarray([data.user_index[k] for k in user_keys], dtype=np.int64)
    items = np.asarray([data.item_index[k] for k in item_keys], dtype=np.int64)
    scores = state.score_users(users)[:, items]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user," + ",".join(str(k) for k in item_keys) + "\n")
        for row, key in enumerate(user_keys):
            fh.write(str(key) + "," + ",".join(repr(v) for v in scores[row].tolist()) + "\n")
