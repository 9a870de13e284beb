"""Deterministic synthetic interaction corpora with controllable structure.

The generator plants a low-rank user preference structure plus a popularity
skew, then deals interactions so that marginals are exact: every user and
every item gets at least one interaction, pair counts hit the requested total
exactly, and user activity follows a heavy-tailed profile. Useful both for
fast unit fixtures and for full-scale benchmark stand-ins whose size matches
a published corpus (e.g. the ml-100k marginals in ingest.KNOWN_DATASETS).
"""

from __future__ import annotations

import numpy as np

from .ingest import InteractionSet
from .numeric import Rng


def _gumbel(rng: Rng, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-300) + 1e-300)


def _degree_targets(rng: Rng, n_users: int, n_items: int, total: int, sigma: float) -> np.ndarray:
    """Heavy-tailed per-user degree targets: min 1, max n_items, exact sum."""
    act = np.exp(sigma * rng.standard_normal(n_users))
    frac = act / act.sum() * total
    d = np.clip(np.round(frac).astype(np.int64), 1, n_items)
    residual = frac - d
    diff = total - int(d.sum())
    step = 0
    while diff != 0:
        if diff > 0:
            order = np.lexsort((np.arange(n_users), -residual))
            for u in order:
                if d[u] < n_items:
                    d[u] += 1
                    residual[u] -= 1.0
                    diff -= 1
                    if diff == 0:
                        break
        else:
            order = np.lexsort((np.arange(n_users), residual))
            for u in order:
                if d[u] > 1:
                    d[u] -= 1
                    residual[u] += 1.0
                    diff += 1
                    if diff == 0:
                        break
        step += 1
        if step > 10_000:
            raise RuntimeError("degree allocation failed to converge")
    return d


def generate_pairs(
    seed: int,
    n_users: int,
    n_items: int,
    n_interactions: int,
    rank: int = 24,
    temperature: float = 2.2,
    pop_alpha: float = 1.0,
    activity_sigma: float = 0.95,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique (user, item) pairs plus each pair's latent affinity.

    Affinities come from a rank-`rank` factor model sharpened by
    `temperature`; `pop_alpha` controls how steep the item popularity skew is
    and `activity_sigma` how heavy the user activity tail is.
    """
    if n_interactions < max(n_users, n_items):
        raise ValueError("need at least one interaction per user and per item")
    if n_interactions > n_users * n_items:
        raise ValueError("more interactions than user-item pairs")
    rng = Rng(seed)
    u_fac = rng.standard_normal((n_users, rank)) / np.sqrt(rank)
    v_fac = rng.standard_normal((n_items, rank))
    pop = -pop_alpha * np.log1p(np.arange(n_items, dtype=np.float64))
    pop = pop[rng.permutation(n_items)]
    logits = temperature * (u_fac @ v_fac.T) + pop

    degree = _degree_targets(rng.child("degrees"), n_users, n_items, n_interactions, activity_sigma)

    held = [set() for _ in range(n_users)]
    assigned = np.zeros(n_users, dtype=np.int64)

    # first pass: give every item one holder among users with spare capacity
    cover_noise = _gumbel(rng.child("cover"), (n_users, n_items))
    for i in range(n_items):
        scores = logits[:, i] + cover_noise[:, i]
        scores[assigned >= degree] = -np.inf
        u = int(np.argmax(scores))
        held[u].add(i)
        assigned[u] += 1

    # second pass: fill each user's remaining quota by preference
    users_out = []
    items_out = []
    for u in range(n_users):
        need = int(degree[u] - assigned[u])
        if need > 0:
            noise = _gumbel(rng.child("fill", u), n_items)
            scores = logits[u] + noise
            if held[u]:
                scores[list(held[u])] = -np.inf
            pick = np.argpartition(-scores, need - 1)[:need]
            held[u].update(int(i) for i in pick)
        users_out.extend([u] * len(held[u]))
        items_out.extend(sorted(held[u]))

    users = np.asarray(users_out, dtype=np.int64)
    items = np.asarray(items_out, dtype=np.int64)
    if users.size != n_interactions:
        raise RuntimeError(f"generated {users.size} pairs, wanted {n_interactions}")
    order = rng.child("order").permutation(users.size)
    users, items = users[order], items[order]
    return users, items, logits[users, items]


def synthesize(
    seed: int,
    n_users: int = 943,
    n_items: int = 1674,
    n_interactions: int = 55375,
    **knobs,
) -> InteractionSet:
    """In-memory InteractionSet with the planted structure (all pairs train)."""
    users, items, _ = generate_pairs(seed, n_users, n_items, n_interactions, **knobs)
    user_ids = [f"u{u + 1}" for u in range(n_users)]
    item_ids = [f"i{i + 1}" for i in range(n_items)]
    # remap to first-seen order so a file round trip reproduces the same set
    u_seen: dict[int, int] = {}
    i_seen: dict[int, int] = {}
    for u in users.tolist():
        if u not in u_seen:
            u_seen[u] = len(u_seen)
    for i in items.tolist():
        if i not in i_seen:
            i_seen[i] = len(i_seen)
    new_users = np.asarray([u_seen[u] for u in users.tolist()], dtype=np.int64)
    new_items = np.asarray([i_seen[i] for i in items.tolist()], dtype=np.int64)
    user_ids = [user_ids[u] for u in sorted(u_seen, key=u_seen.get)]
    item_ids = [item_ids[i] for i in sorted(i_seen, key=i_seen.get)]
    return InteractionSet(
        user_ids=user_ids,
        item_ids=item_ids,
        users=new_users,
        items=new_items,
        split=np.zeros(users.size, dtype=np.int8),
    )


def write_ratings(path, seed: int, n_users: int = 943, n_items: int = 1674,
                  n_interactions: int = 55375, **knobs) -> None:
    """Write the synthetic corpus as a tab-separated ratings file.

    Ratings are 5 for pairs above the corpus-median affinity, else 4, so any
    threshold up to 4 keeps the file intact; timestamps are a row counter.
    """
    users, items, affinity = generate_pairs(seed, n_users, n_items, n_interactions, **knobs)
    median = float(np.median(affinity))
    with open(path, "w", encoding="utf-8") as fh:
        for row, (u, i, a) in enumerate(zip(users.tolist(), items.tolist(), affinity.tolist())):
            rating = 5 if a > median else 4
            fh.write(f"u{u + 1}\ti{i + 1}\t{rating}\t{800000000 + row}\n")
