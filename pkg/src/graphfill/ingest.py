"""Interaction data loading, train/test splitting, and sparsity bucketing.

Raw files come in three flavors: tab-separated ratings (user, item, rating,
optional timestamp), comma-separated ratings with an optional header row, and
bare whitespace-separated user-item pairs. Ratings below the threshold are
dropped, duplicate pairs collapse to their first occurrence, and ids are
remapped to contiguous indices in first-seen order.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .numeric import Rng, as_csr

FORMATS = ("tsv-rating", "csv-rating", "pair-list")

TRAIN, TEST = 0, 1


class ParseError(ValueError):
    """Malformed input line; message carries the 1-based line number."""


class EmptyDatasetError(ValueError):
    """No interactions survived loading/filtering."""


@dataclass
class DatasetStats:
    n_users: int
    n_items: int
    n_interactions: int
    density: float

    @property
    def density_pct(self) -> float:
        return 100.0 * self.density

    def describe(self) -> str:
        return (
            f"{self.n_users} users, {self.n_items} items, "
            f"{self.n_interactions} interactions, density {self.density_pct:.3f}%"
        )


# Published corpus sizes used to sanity-check ingestion when a file matches.
KNOWN_DATASETS = {
    "ml-100k": (943, 1674, 55375),
    "ml-1m": (6022, 3043, 995154),
    "yelp": (31668, 38048, 1561406),
    "amazon-electronics": (1435, 1522, 35931),
}


def match_known_dataset(stats: DatasetStats) -> str | None:
    """Name of the published corpus these stats correspond to, if any."""
    for name, (m, n, c) in KNOWN_DATASETS.items():
        if stats.n_users == m and stats.n_items == n and stats.n_interactions == c:
            return name
    return None


@dataclass
class InteractionSet:
    """Deduplicated user-item interactions with contiguous ids and split tags.

    `users`/`items` are parallel index arrays; `split` tags each pair TRAIN or
    TEST (everything is TRAIN until `split()` assigns a holdout). `user_ids` /
    `item_ids` map an index back to the raw key from the source file.
    """

    user_ids: list[str]
    item_ids: list[str]
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_index: dict[str, int] = field(repr=False, default_factory=dict)
    item_index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {k: i for i, k in enumerate(self.user_ids)}
        if not self.item_index:
            self.item_index = {k: i for i, k in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return self.users.size

    def stats(self) -> DatasetStats:
        total = self.n_users * self.n_items
        return DatasetStats(
            self.n_users, self.n_items, len(self), len(self) / total if total else 0.0
        )

    def pairs(self, which: str = "all") -> tuple[np.ndarray, np.ndarray]:
        if which == "all":
            return self.users, self.items
        tag = {"train": TRAIN, "test": TEST}[which]
        mask = self.split == tag
        return self.users[mask], self.items[mask]

    def degrees(self, which: str = "all") -> np.ndarray:
        u, _ = self.pairs(which)
        return np.bincount(u, minlength=self.n_users)


def _parse_rating_line(parts: list[str], lineno: int, min_fields: int):
    if len(parts) < min_fields:
        raise ParseError(f"line {lineno}: expected at least {min_fields} fields, got {len(parts)}")
    user, item = parts[0].strip(), parts[1].strip()
    if not user or not item:
        raise ParseError(f"line {lineno}: empty user or item key")
    if min_fields >= 3:
        try:
            rating = float(parts[2])
        except ValueError:
            raise ParseError(f"line {lineno}: rating '{parts[2]}' is not a number") from None
    else:
        rating = 1.0
    return user, item, rating


def load_interactions(
    path: str | os.PathLike,
    format: str = "tsv-rating",
    rating_threshold: float = 1.0,
) -> InteractionSet:
    """Read a rating/pair file into an InteractionSet.

    Args:
        path: input file.
        format: one of FORMATS.
        rating_threshold: keep interactions with rating >= this value
            (pair-list rows count as rating 1).

    Raises:
        ParseError on a malformed line (with its line number),
        EmptyDatasetError if nothing survives the threshold.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format '{format}', expected one of {FORMATS}")

    user_ids: list[str] = []
    item_ids: list[str] = []
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    users: list[int] = []
    items: list[int] = []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if format == "tsv-rating":
                user, item, rating = _parse_rating_line(line.split("\t"), lineno, 3)
            elif format == "csv-rating":
                parts = line.split(",")
                if lineno == 1 and len(parts) >= 3:
                    try:
                        float(parts[2])
                    except ValueError:
                        continue  # header row
                user, item, rating = _parse_rating_line(parts, lineno, 3)
            else:  # pair-list
                user, item, rating = _parse_rating_line(line.split(), lineno, 2)
            if rating < rating_threshold:
                continue
            u = user_index.get(user)
            if u is None:
                u = user_index[user] = len(user_ids)
                user_ids.append(user)
            v = item_index.get(item)
            if v is None:
                v = item_index[item] = len(item_ids)
                item_ids.append(item)
            if (u, v) in seen:
                continue
            seen.add((u, v))
            users.append(u)
            items.append(v)

    if not users:
        raise EmptyDatasetError(f"no interactions at threshold {rating_threshold} in {path}")

    return InteractionSet(
        user_ids=user_ids,
        item_ids=item_ids,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        split=np.zeros(len(users), dtype=np.int8),
        user_index=user_index,
        item_index=item_index,
    )


def split(
    data: InteractionSet,
    test_fraction: float,
    rng: Rng,
    min_train_per_user: int = 1,
) -> InteractionSet:
    """Per-user random holdout: floor(test_fraction * degree) pairs become test.

    Every user keeps at least `min_train_per_user` training pairs. Test pairs
    whose item never occurs in train are dropped with a warning, since such an
    item has no graph signal and no model could be asked to rank it.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0, 1], got {test_fraction}")
    tags = np.zeros(len(data), dtype=np.int8)
    order = np.argsort(data.users, kind="stable")
    degs = data.degrees("all")
    start = 0
    for u in range(data.n_users):
        deg = int(degs[u])
        if deg == 0:
            continue
        rows = order[start : start + deg]
        start += deg
        k = int(np.floor(test_fraction * deg))
        if deg - k < min_train_per_user:
            k = max(0, deg - min_train_per_user)
        if k > 0:
            pick = rng.choice(deg, size=k, replace=False)
            tags[rows[pick]] = TEST

    users, items = data.users.copy(), data.items.copy()
    train_item_deg = np.bincount(items[tags == TRAIN], minlength=data.n_items)
    orphan = (tags == TEST) & (train_item_deg[items] == 0)
    if orphan.any():
        warnings.warn(
            f"dropping {int(orphan.sum())} test pairs on items absent from train",
            stacklevel=2,
        )
        keep = ~orphan
        users, items, tags = users[keep], items[keep], tags[keep]

    return InteractionSet(
        user_ids=data.user_ids,
        item_ids=data.item_ids,
        users=users,
        items=items,
        split=tags,
        user_index=data.user_index,
        item_index=data.item_index,
    )


def build_matrix(data: InteractionSet, which: str = "train") -> sp.csr_matrix:
    """Binary user-by-item CSR matrix over the chosen split."""
    u, i = data.pairs(which)
    return as_csr(
        sp.coo_matrix(
            (np.ones(u.size), (u, i)), shape=(data.n_users, data.n_items)
        )
    )


@dataclass
class SparsityGroups:
    """Test users bucketed by training degree, roughly equal populations."""

    users: np.ndarray      # test users, ascending id
    degrees: np.ndarray    # their train degree
    group: np.ndarray      # group index per user, 0 = sparsest
    n_groups: int
    boundaries: list[tuple[int, int]]  # (min degree, max degree) per group


def sparsity_groups(data: InteractionSet, n_groups: int) -> SparsityGroups:
    """Bucket test users into n_groups by train degree.

    Boundaries are chosen on sorted distinct degree values, so all users
    sharing a degree land in the same group; with few distinct degrees the
    result can have fewer groups than asked for (single-group case warns).
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    test_mask = data.split == TEST
    if not test_mask.any():
        raise ValueError("no test pairs; split the data first")
    test_users = np.unique(data.users[test_mask])
    tdeg = data.degrees("train")[test_users]

    distinct, counts = np.unique(tdeg, return_counts=True)
    total = int(counts.sum())
    group_of_degree = {}
    bounds: list[tuple[int, int]] = []
    g, cum, lo = 0, 0, None
    for d, c in zip(distinct, counts):
        if lo is None:
            lo = int(d)
        group_of_degree[int(d)] = g
        cum += int(c)
        if g < n_groups - 1 and cum >= (g + 1) * total / n_groups:
            bounds.append((lo, int(d)))
            g += 1
            lo = None
    if lo is not None:
        bounds.append((lo, int(distinct[-1])))

    actual = len(bounds)
    if actual < n_groups:
        warnings.warn(
            f"only {actual} sparsity groups possible for {distinct.size} distinct degrees",
            stacklevel=2,
        )
    group = np.asarray([group_of_degree[int(d)] for d in tdeg], dtype=np.int64)
    return SparsityGroups(test_users, tdeg, group, actual, bounds)


# ---------------------------------------------------------------------------
# prepared-directory round trip
# ---------------------------------------------------------------------------

MANIFEST_NAME = "interactions.txt"
SPLIT_WORD = {TRAIN: "train", TEST: "test"}
WORD_SPLIT = {v: k for k, v in SPLIT_WORD.items()}


def write_prepared(out_dir: str | os.PathLike, data: InteractionSet, header: dict | None = None):
    """Write split manifest, id maps, and a flat stats file into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    for key in data.user_ids + data.item_ids:
        if any(ch.isspace() for ch in key):
            raise ValueError(f"raw key {key!r} contains whitespace; manifest format forbids it")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        for u, i, s in zip(data.users, data.items, data.split):
            fh.write(f"{data.user_ids[u]} {data.item_ids[i]} {SPLIT_WORD[int(s)]}\n")
    with open(os.path.join(out_dir, "user_ids.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(data.user_ids) + "\n")
    with open(os.path.join(out_dir, "item_ids.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(data.item_ids) + "\n")
    st = data.stats()
    lines = {
        "n_users": st.n_users,
        "n_items": st.n_items,
        "n_interactions": st.n_interactions,
        "density_pct": f"{st.density_pct:.6f}",
        "n_train": int(np.sum(data.split == TRAIN)),
        "n_test": int(np.sum(data.split == TEST)),
    }
    if header:
        lines.update(header)
    with open(os.path.join(out_dir, "stats.txt"), "w", encoding="utf-8") as fh:
        for k, v in lines.items():
            fh.write(f"{k} = {v}\n")


def read_prepared(dir_path: str | os.PathLike) -> InteractionSet:
    """Reload an InteractionSet written by write_prepared."""
    with open(os.path.join(dir_path, "user_ids.txt"), encoding="utf-8") as fh:
        user_ids = [ln for ln in fh.read().splitlines() if ln]
    with open(os.path.join(dir_path, "item_ids.txt"), encoding="utf-8") as fh:
        item_ids = [ln for ln in fh.read().splitlines() if ln]
    user_index = {k: i for i, k in enumerate(user_ids)}
    item_index = {k: i for i, k in enumerate(item_ids)}
    users, items, tags = [], [], []
    path = os.path.join(dir_path, MANIFEST_NAME)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in WORD_SPLIT:
                raise ParseError(f"line {lineno}: bad manifest row {line!r}")
            try:
                users.append(user_index[parts[0]])
                items.append(item_index[parts[1]])
            except KeyError as e:
                raise ParseError(f"line {lineno}: key {e} not in id maps") from None
            tags.append(WORD_SPLIT[parts[2]])
    if not users:
        raise EmptyDatasetError(f"empty manifest {path}")
    return InteractionSet(
        user_ids=user_ids,
        item_ids=item_ids,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        split=np.asarray(tags, dtype=np.int8),
        user_index=user_index,
        item_index=item_index,
    )
