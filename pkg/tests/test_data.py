import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csdm.data import (
    EXCLUDED,
    OLD,
    TEST,
    WARM_A,
    WARM_B,
    WARM_C,
    CacheFormatError,
    DatasetEmptyError,
    EncodedDataset,
    ParseError,
    ProtocolError,
    binarize,
    encode_movielens,
    load_movielens,
    read_cache,
    split_cold_warm,
    split_summary,
    synth_dataset,
    synth_schema,
    write_cache,
)

from conftest import write_movielens


def _toy_dataset(item_counts: dict[int, int], seed: int = 0, ties: bool = False) -> EncodedDataset:
    """Synthetic-schema dataset with a prescribed number of rows per item."""
    rng = np.random.default_rng(seed)
    n_items = max(item_counts) + 1
    items = np.concatenate([np.full(c, i) for i, c in item_counts.items()]).astype(np.int64)
    rng.shuffle(items)
    n = len(items)
    ts = rng.integers(0, 5 if ties else 10**6, size=n)
    schema = synth_schema(10, n_items)
    tables = {
        "user_group": np.zeros((10, 1), dtype=np.int64),
        "category": np.zeros((n_items, 1), dtype=np.int64),
        "tags": np.zeros((n_items, 1), dtype=np.int64),
    }
    return EncodedDataset(schema, rng.integers(0, 10, size=n), items, rng.integers(0, 2, size=n), ts, tables)


# MovieLens parsing ----------------------------------------------------------------


def test_parse_rating_line(tmp_path):
    d = write_movielens(tmp_path / "ml", [(1, 1193, 5, 978300760), (2, 1193, 3, 978300761)])
    raw = load_movielens(d)
    assert tuple(raw.ratings[0]) == (1, 1193, 5, 978300760)
    assert raw.movies[1193][2]  # genres parsed


def test_parse_error_reports_line_number(tmp_path):
    d = write_movielens(tmp_path / "ml", [(1, 10, 5, 1), (1, 11, 4, 2)])
    lines = (d / "ratings.dat").read_text().splitlines()
    lines.insert(1, "1::oops::4")
    (d / "ratings.dat").write_text("\n".join(lines))
    with pytest.raises(ParseError) as exc:
        load_movielens(d)
    assert exc.value.lineno == 2
    assert ":2:" in str(exc.value)


def test_missing_file_and_empty_ratings(tmp_path):
    d = write_movielens(tmp_path / "ml", [(1, 10, 5, 1)])
    (d / "movies.dat").unlink()
    with pytest.raises(FileNotFoundError):
        load_movielens(d)
    d2 = write_movielens(tmp_path / "ml2", [(1, 10, 5, 1)])
    (d2 / "ratings.dat").write_text("")
    with pytest.raises(DatasetEmptyError):
        load_movielens(d2)


def test_latin1_titles(tmp_path):
    d = write_movielens(tmp_path / "ml", [(1, 10, 5, 1)], movies=[(10, "Amélie (2001)", "Comedy|Romance")])
    raw = load_movielens(d)
    assert raw.movies[10][0] == "Amélie (2001)"
    assert raw.movies[10][1] == 2001


@pytest.mark.parametrize("rating,label", [(4, 1), (3, 0), (5, 1), (1, 0)])
def test_binarize(rating, label):
    assert binarize(rating) == label


@pytest.mark.parametrize("bad", [0, 6, 3.5, -1])
def test_binarize_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        binarize(bad)


def test_encode_movielens_schema_and_indices(tmp_path):
    ratings = [(u, m, 1 + (u * m) % 5, 1000 + u * 10 + m) for u in range(1, 6) for m in range(1, 9)]
    data = encode_movielens(load_movielens(write_movielens(tmp_path / "ml", ratings)))
    schema = data.schema
    assert schema.item_field not in schema.side_fields
    assert [schema.fields[i].name for i in schema.side_fields] == ["decade", "genres"]
    for pos, f in enumerate(schema.fields):
        idx, w = data.field_indices(pos, data.user, data.item)
        assert idx.max() < f.vocab_size and idx.min() >= 0
        np.testing.assert_allclose(w.sum(axis=1), 1.0)
    # mean pooling of a three-genre movie (m % 4 == 2 in the fixture)
    g = schema.index("genres")
    idx, w = data.field_indices(g, np.array([0]), np.array([1]))
    assert sorted(w[0][w[0] > 0]) == pytest.approx([1 / 3] * 3)
    np.testing.assert_array_equal(data.label, [int(r[2] >= 4) for r in ratings])


def test_every_item_has_side_info(tmp_path):
    ratings = [(1, m, 4, m) for m in (1, 2, 3)]
    movies = [(1, "A (1995)", "Action"), (2, "B (1960)", "Drama"), (3, "C (1988)", "Comedy"), (4, "Unrated (1999)", "War")]
    data = encode_movielens(load_movielens(write_movielens(tmp_path / "ml", ratings, movies=movies)))
    for item in range(data.n_items):
        info = data.item_side_info(item)
        assert set(info) == {"decade", "genres"} and info["genres"]


def test_load_stable_under_reordering(tmp_path):
    ratings = [(u, m, 1 + (u + m) % 5, 100 * u + m) for u in range(1, 8) for m in range(1, 6)]
    a = encode_movielens(load_movielens(write_movielens(tmp_path / "a", ratings)))
    shuffled = [ratings[i] for i in np.random.default_rng(0).permutation(len(ratings))]
    b = encode_movielens(load_movielens(write_movielens(tmp_path / "b", shuffled)))
    rows = lambda d: sorted(zip(d.user, d.item, d.label, d.timestamp))  # noqa: E731
    assert rows(a) == rows(b)


def test_instance_view(synth):
    data, _ = synth
    inst = data.instance(3)
    assert inst.user_idx == data.user[3] and inst.item_idx == data.item[3]
    assert len(inst.feature_idxs) == len(data.schema.fields)
    assert inst.label in (0, 1)


# split protocol ----------------------------------------------------------------------------


def test_split_worked_example():
    # item 0: 201 rows (old); item 1: 100 rows (new, 20/20/20/40); item 2: 60 rows (<= 3K, excluded)
    data = _toy_dataset({0: 201, 1: 100, 2: 60})
    s = split_cold_warm(data, 200, 20)
    g1 = s.group[data.item == 1]
    assert [(g1 == g).sum() for g in (WARM_A, WARM_B, WARM_C, TEST)] == [20, 20, 20, 40]
    assert np.all(s.group[data.item == 0] == OLD)
    assert np.all(s.group[data.item == 2] == EXCLUDED)
    assert list(s.old_item_ids) == [0]


def test_split_boundary_exactly_n_is_new():
    data = _toy_dataset({0: 201, 1: 200})
    s = split_cold_warm(data, 200, 20)
    assert 1 in s.new_item_ids and 1 in s.warm_item_ids


def test_split_protocol_errors():
    with pytest.raises(ProtocolError):
        split_cold_warm(_toy_dataset({0: 50, 1: 70}), 200, 20)  # no old item
    with pytest.raises(ProtocolError):
        split_cold_warm(_toy_dataset({0: 300, 1: 60}), 200, 20)  # no qualifying new item


def _check_split_invariants(data, s):
    k = s.k
    groups = [s.old_train, s.warm_a, s.warm_b, s.warm_c, s.test, s.excluded]
    allrows = np.concatenate(groups)
    assert len(allrows) == len(data) and len(np.unique(allrows)) == len(data)
    freq = np.bincount(data.item, minlength=data.n_items)
    for item in np.unique(data.item):
        g = s.group[data.item == item]
        if freq[item] > s.threshold:
            assert np.all(g == OLD)
            continue
        if freq[item] <= 3 * k:
            assert np.all(g == EXCLUDED)
            continue
        for w in (WARM_A, WARM_B, WARM_C):
            assert (g == w).sum() == k
        ts = data.timestamp[data.item == item]
        assert ts[g == WARM_A].max() <= ts[g == WARM_B].min()
        assert ts[g == WARM_B].max() <= ts[g == WARM_C].min()
        assert ts[g == WARM_C].max() <= ts[g == TEST].min()


@settings(max_examples=25, deadline=None)
@given(
    counts=st.lists(st.integers(1, 80), min_size=2, max_size=12),
    seed=st.integers(0, 10_000),
    ties=st.booleans(),
)
def test_split_invariants_property(counts, seed, ties):
    counts = [90] + counts  # guarantee an old item for threshold 60
    counts.append(40)  # and a qualifying new item for k=5
    data = _toy_dataset(dict(enumerate(counts)), seed, ties)
    _check_split_invariants(data, split_cold_warm(data, 60, 5))


def test_split_invariants_on_synthetic(synth):
    data, s = synth
    _check_split_invariants(data, s)


def test_timestamp_ties_keep_file_order():
    data = _toy_dataset({0: 20, 1: 13})
    data.timestamp[:] = 7
    s = split_cold_warm(data, 15, 3)  # item 0 old, item 1 new
    rows = np.flatnonzero(data.item == 1)
    np.testing.assert_array_equal(s.group[rows], [WARM_A] * 3 + [WARM_B] * 3 + [WARM_C] * 3 + [TEST] * 4)


def test_counts_through_is_cumulative(synth):
    data, s = synth
    c0 = s.counts_through(data, OLD)
    ca = s.counts_through(data, WARM_A)
    cc = s.counts_through(data, WARM_C)
    assert np.all(c0[s.warm_item_ids] == 0)
    assert np.all(ca[s.warm_item_ids] == s.k)
    assert np.all(cc[s.warm_item_ids] == 3 * s.k)
    np.testing.assert_array_equal(cc, s.item_freq(data))


# synthetic generator -------------------------------------------------------------------------


def test_synth_deterministic():
    a, b = synth_dataset(7, n_instances=2000), synth_dataset(7, n_instances=2000)
    for col in ("user", "item", "label", "timestamp"):
        np.testing.assert_array_equal(getattr(a, col), getattr(b, col))
    assert not np.array_equal(a.label, synth_dataset(8, n_instances=2000).label)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synth_label_mean_calibrated(seed):
    d = synth_dataset(seed, n_instances=10_000)
    assert 0.2 < d.label.mean() < 0.8


def test_synth_long_tail_ratio():
    d = synth_dataset(0)
    s = split_cold_warm(d, 150, 10)
    summary = split_summary(d, s)
    assert 0.7 <= summary["new_fraction"] <= 0.9


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_dataset(0, n_items=0)
    with pytest.raises(ValueError):
        synth_dataset(0, side_weight=1.5)


# cache ---------------------------------------------------------------------------------------------


def test_cache_byte_identical_and_roundtrip(tmp_path, tiny_synth):
    data, s = tiny_synth
    h1 = write_cache(tmp_path / "a.bin", data, s, {"seed": 1})
    h2 = write_cache(tmp_path / "b.bin", data, s, {"seed": 1})
    assert h1 == h2
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    d2, s2, header = read_cache(tmp_path / "a.bin")
    for col in ("user", "item", "label", "timestamp"):
        np.testing.assert_array_equal(getattr(d2, col), getattr(data, col))
    np.testing.assert_array_equal(s2.group, s.group)
    assert d2.schema == data.schema and header["params"] == {"seed": 1}


def test_cache_rejects_foreign_and_tampered_files(tmp_path, tiny_synth):
    data, s = tiny_synth
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a cache at all")
    with pytest.raises(CacheFormatError):
        read_cache(bad)
    p = tmp_path / "c.bin"
    write_cache(p, data, s)
    blob = bytearray(p.read_bytes())
    # flip the group code of the first record (last int64 of the record)
    hlen = int.from_bytes(blob[12:16], "little")
    off = 16 + hlen + 4 * 8
    blob[off] = (blob[off] + 1) % 6
    p.write_bytes(bytes(blob))
    with pytest.raises(CacheFormatError):
        read_cache(p)
