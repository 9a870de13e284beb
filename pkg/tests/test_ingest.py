"""Loading, splitting, prepared-directory round trips, sparsity bucketing."""

import numpy as np
import pytest

from graphfill.ingest import (
    TEST,
    TRAIN,
    EmptyDatasetError,
    InteractionSet,
    KNOWN_DATASETS,
    ParseError,
    build_matrix,
    load_interactions,
    match_known_dataset,
    read_prepared,
    sparsity_groups,
    split,
    write_prepared,
)
from graphfill.numeric import Rng


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _toy_set(users, items, tags=None):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n_u, n_i = int(users.max()) + 1, int(items.max()) + 1
    return InteractionSet(
        user_ids=[f"u{k}" for k in range(n_u)],
        item_ids=[f"i{k}" for k in range(n_i)],
        users=users,
        items=items,
        split=np.zeros(users.size, dtype=np.int8) if tags is None else np.asarray(tags, dtype=np.int8),
    )


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def test_load_tsv_threshold_and_dedup(tmp_path):
    path = _write(
        tmp_path,
        "r.tsv",
        "196\t242\t3\t881250949\n"
        "186\t302\t5\t891717742\n"
        "196\t242\t4\t881250950\n"   # duplicate pair, first occurrence wins
        "22\t377\t1\t878887116\n",
    )
    data = load_interactions(path, "tsv-rating", rating_threshold=1.0)
    assert data.stats().n_interactions == 3
    assert data.user_ids == ["196", "186", "22"]  # first-seen order
    data4 = load_interactions(path, "tsv-rating", rating_threshold=4.0)
    assert data4.stats().n_interactions == 2  # the 3 and the 1 fall away
    assert len(data4) == 2


def test_load_csv_header_and_pairs(tmp_path):
    csv = _write(tmp_path, "r.csv", "user,item,rating\n1,10,5\n2,11,4\n")
    data = load_interactions(csv, "csv-rating")
    assert data.stats().n_interactions == 2
    pairs = _write(tmp_path, "p.txt", "a x\nb y\na z\n")
    dp = load_interactions(pairs, "pair-list")
    assert dp.n_users == 2 and dp.n_items == 3 and len(dp) == 3


def test_load_malformed_line_number(tmp_path):
    path = _write(tmp_path, "bad.tsv", "1\t2\t5\t0\n1\t2\n")
    with pytest.raises(ParseError, match="line 2"):
        load_interactions(path, "tsv-rating")
    path2 = _write(tmp_path, "bad2.tsv", "1\t2\tfive\t0\n")
    with pytest.raises(ParseError, match="line 1"):
        load_interactions(path2, "tsv-rating")


def test_load_empty_after_threshold(tmp_path):
    path = _write(tmp_path, "low.tsv", "1\t2\t1\t0\n")
    with pytest.raises(EmptyDatasetError):
        load_interactions(path, "tsv-rating", rating_threshold=4.0)


def test_unknown_format_rejected(tmp_path):
    path = _write(tmp_path, "r.tsv", "1\t2\t5\t0\n")
    with pytest.raises(ValueError, match="unknown format"):
        load_interactions(path, "parquet")


def test_stats_density():
    # [TRIVIAL] 6 pairs over a 3x4 grid
    data = _toy_set([0, 0, 1, 1, 2, 2], [0, 1, 1, 2, 2, 3])
    st = data.stats()
    assert st.n_users == 3 and st.n_items == 4
    assert st.density == pytest.approx(0.5)
    assert st.density_pct == pytest.approx(50.0)


def test_known_dataset_matching():
    assert match_known_dataset(_stats(943, 1674, 55375)) == "ml-100k"
    assert match_known_dataset(_stats(943, 1674, 55374)) is None
    assert set(KNOWN_DATASETS) == {"ml-100k", "ml-1m", "yelp", "amazon-electronics"}


def _stats(m, n, c):
    from graphfill.ingest import DatasetStats

    return DatasetStats(m, n, c, c / (m * n))


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def test_split_per_user_floor_and_min_train():
    # users 2..4 hold every item at degree <= 4 so their own floor is zero and
    # each item keeps a train holder no matter what users 0 and 1 pick: the
    # orphan drop can never touch the floor counts under test here
    users = [0] * 10 + [1] * 10 + [2] * 4 + [3] * 4 + [4] * 2 + [5] * 1
    items = list(range(10)) * 2 + [0, 1, 2, 3] + [4, 5, 6, 7] + [8, 9] + [5]
    data = _toy_set(users, items)
    tagged = split(data, 0.2, Rng(0).child("split"))
    te = tagged.split == TEST
    per_user = np.bincount(tagged.users[te], minlength=6)
    assert per_user[0] == 2       # floor(0.2 * 10)
    assert per_user[1] == 2
    assert per_user[2] == 0       # floor(0.2 * 4)
    assert per_user[3] == 0
    assert per_user[4] == 0
    assert per_user[5] == 0       # single interaction stays in train
    # every user holding test pairs still appears in train
    tr_users = set(tagged.users[tagged.split == TRAIN].tolist())
    assert set(tagged.users[te].tolist()) <= tr_users


def test_split_fraction_bounds():
    data = _toy_set([0, 0, 0, 1, 1], [0, 1, 2, 3, 4])
    all_train = split(data, 0.0, Rng(1))
    assert int((all_train.split == TEST).sum()) == 0
    keep_one = split(data, 1.0, Rng(1))
    tr_deg = np.bincount(keep_one.users[keep_one.split == TRAIN], minlength=2)
    assert np.all(tr_deg >= 1)
    with pytest.raises(ValueError):
        split(data, 1.5, Rng(1))


def test_split_deterministic():
    data = _toy_set(np.repeat(np.arange(20), 8), np.tile(np.arange(8), 20) + np.repeat(np.arange(20), 8) % 3)
    a = split(data, 0.25, Rng(9).child("s"))
    b = split(data, 0.25, Rng(9).child("s"))
    assert np.array_equal(a.split, b.split)
    c = split(data, 0.25, Rng(10).child("s"))
    assert not np.array_equal(a.split, c.split)


def test_split_drops_items_without_train_signal():
    # user 0 is the only holder of items 3 and 4; whichever of the two lands
    # in test is guaranteed to have no train signal and must be dropped
    data = _toy_set([0, 0, 1], [3, 4, 0])
    with pytest.warns(UserWarning, match="absent from train"):
        tagged = split(data, 0.5, Rng(0).child("split"))
    assert len(tagged) == 2
    assert int((tagged.split == TEST).sum()) == 0
    te_items = set(tagged.items[tagged.split == TEST].tolist())
    tr_items = set(tagged.items[tagged.split == TRAIN].tolist())
    assert te_items <= tr_items


def test_build_matrix_binary():
    data = _toy_set([0, 1, 1], [2, 0, 1], tags=[0, 0, 1])
    r = build_matrix(data, "train")
    dense = r.toarray()
    expect = np.zeros((2, 3))
    expect[0, 2] = 1.0
    expect[1, 0] = 1.0
    assert np.array_equal(dense, expect)
    assert build_matrix(data, "test").nnz == 1
    assert build_matrix(data, "all").nnz == 3


# ---------------------------------------------------------------------------
# sparsity groups
# ---------------------------------------------------------------------------


def _grouping_fixture(degrees):
    """Users with the given train degrees, each holding one extra test pair."""
    users, items, tags = [], [], []
    item = 0
    for u, d in enumerate(degrees):
        for _ in range(d):
            users.append(u)
            items.append(item)
            tags.append(TRAIN)
            item += 1
        users.append(u)
        items.append(item)
        tags.append(TEST)
        item += 1
    return _toy_set(users, items, tags)


def test_sparsity_groups_tie_blocks():
    # degrees {1,1,2,2,100,100} into 3 groups: one distinct degree each
    data = _grouping_fixture([1, 1, 2, 2, 100, 100])
    g = sparsity_groups(data, 3)
    assert g.n_groups == 3
    by_degree = {int(d): int(grp) for d, grp in zip(g.degrees, g.group)}
    assert by_degree == {1: 0, 2: 1, 100: 2}
    assert g.boundaries == [(1, 1), (2, 2), (100, 100)]


def test_sparsity_groups_singletons():
    data = _grouping_fixture([1, 2, 3, 4, 5])
    g = sparsity_groups(data, 5)
    assert g.n_groups == 5
    assert sorted(g.group.tolist()) == [0, 1, 2, 3, 4]


def test_sparsity_groups_all_equal_degree_single_group():
    data = _grouping_fixture([3, 3, 3, 3])
    with pytest.warns(UserWarning, match="sparsity groups"):
        g = sparsity_groups(data, 4)
    assert g.n_groups == 1
    assert np.all(g.group == 0)


def test_sparsity_groups_requires_split():
    data = _toy_set([0, 1], [0, 1])
    with pytest.raises(ValueError, match="no test pairs"):
        sparsity_groups(data, 2)


# ---------------------------------------------------------------------------
# prepared round trip
# ---------------------------------------------------------------------------


def test_prepared_round_trip(tmp_path):
    data = _toy_set([0, 0, 1, 2, 2], [0, 1, 1, 0, 2], tags=[0, 1, 0, 0, 1])
    out = tmp_path / "prep"
    write_prepared(out, data, header={"source": "unit"})
    back = read_prepared(out)
    assert back.user_ids == data.user_ids
    assert back.item_ids == data.item_ids
    assert np.array_equal(back.users, data.users)
    assert np.array_equal(back.items, data.items)
    assert np.array_equal(back.split, data.split)
    stats_text = (out / "stats.txt").read_text()
    assert "n_interactions = 5" in stats_text
    assert "source = unit" in stats_text


def test_prepared_rejects_whitespace_keys(tmp_path):
    data = _toy_set([0], [0])
    data.user_ids[0] = "user 0"
    with pytest.raises(ValueError, match="whitespace"):
        write_prepared(tmp_path / "prep", data)


def test_read_prepared_rejects_bad_rows(tmp_path):
    out = tmp_path / "prep"
    data = _toy_set([0], [0])
    write_prepared(out, data)
    (out / "interactions.txt").write_text("u0 i0 banana\n")
    with pytest.raises(ParseError, match="line 1"):
        read_prepared(out)
