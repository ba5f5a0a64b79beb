import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrec.corpus import (
    CorpusError,
    Interaction,
    build_split,
    generate_synthetic_corpus,
    load_embeddings,
    load_interactions,
    write_embeddings,
)


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


def test_load_three_records(tmp_path):
    path = write_lines(
        tmp_path / "x.jsonl",
        [{"user_id": "u", "item_id": f"i{j}", "timestamp": j} for j in range(3)],
    )
    recs = load_interactions(path)
    assert [r.item_id for r in recs] == ["i0", "i1", "i2"]


def test_missing_timestamp_names_line(tmp_path):
    path = write_lines(
        tmp_path / "x.jsonl",
        [{"user_id": "u", "item_id": "a", "timestamp": 1}, {"user_id": "u", "item_id": "b"}],
    )
    with pytest.raises(CorpusError, match="line 2"):
        load_interactions(path)


@pytest.mark.parametrize(
    "bad",
    ["{not json", json.dumps([1, 2]), json.dumps({"user_id": 1, "item_id": "a", "timestamp": 1}),
     json.dumps({"user_id": "u", "item_id": "a", "timestamp": "noon"})],
)
def test_malformed_lines(tmp_path, bad):
    path = write_lines(tmp_path / "x.jsonl", [bad])
    with pytest.raises(CorpusError, match="line 1"):
        load_interactions(path)


def test_duplicates_dropped(tmp_path):
    row = {"user_id": "u", "item_id": "a", "timestamp": 5}
    path = write_lines(tmp_path / "x.jsonl", [row, row, {**row, "timestamp": 6}])
    assert len(load_interactions(path)) == 2


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(CorpusError, match="no interactions"):
        load_interactions(path)


# ---------------------------------------------------------------- split


def seq(user, items, start=0):
    return [Interaction(user, it, start + k) for k, it in enumerate(items)]


def test_leave_one_out_protocol():
    split = build_split(seq("u", "abcd"))
    (u,) = split.users
    assert u.train == ("a", "b") and u.valid_target == "c" and u.test_target == "d"
    assert list(split.valid_examples()) == [("u", ("a", "b"), "c")]
    assert list(split.test_examples()) == [("u", ("a", "b", "c"), "d")]
    assert list(split.train_examples()) == [("u", ("a",), "b")]


def test_short_users_excluded():
    split = build_split(seq("short", "ab") + seq("ok", "abc"))
    assert [u.user_id for u in split.users] == ["ok"]


def test_sorted_by_time_with_ties_in_input_order():
    rows = [Interaction("u", "late", 9), Interaction("u", "x", 1), Interaction("u", "y", 1), Interaction("u", "z", 1)]
    (u,) = build_split(rows).users
    assert u.train + (u.valid_target, u.test_target) == ("x", "y", "z", "late")


def test_all_equal_timestamps_keep_input_order():
    rows = [Interaction("u", it, 7) for it in "pqrs"]
    (u,) = build_split(rows).users
    assert u.train == ("p", "q") and u.test_target == "s"


def test_history_truncation():
    split = build_split(seq("u", "abcdefg"), max_history=3)
    assert list(split.test_examples())[0][1] == ("d", "e", "f")
    assert list(split.valid_examples())[0][1] == ("c", "d", "e")
    assert max(len(h) for _, h, _ in split.train_examples()) == 3


def test_min_len_validated():
    with pytest.raises(ValueError):
        build_split([], min_len=2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("uvw"), st.sampled_from("abcdefgh"), st.integers(0, 5)), max_size=40))
def test_split_is_a_partition_and_idempotent(rows):
    inter = [Interaction(u, i, t) for u, i, t in rows]
    a, b = build_split(inter), build_split(inter)
    assert a.users == b.users
    for u in a.users:
        full = [r for r in inter if r.user_id == u.user_id]
        assert len(u.train) + 2 == len(full)
    # each target sits strictly after its conditioning history in the user's sequence
    for examples in (a.train_examples(), a.valid_examples(), a.test_examples()):
        for user, hist, target in examples:
            u = next(x for x in a.users if x.user_id == user)
            full = u.train + (u.valid_target, u.test_target)
            pos = len(hist) if len(hist) == len(full) else None
            assert hist == full[: len(hist)] or len(hist) == a.max_history
            assert target in full


# ---------------------------------------------------------------- embeddings


def test_embedding_round_trip(tmp_path):
    emb = {"a": np.arange(4, dtype=np.float32), "bé": -np.ones(4, dtype=np.float32)}
    write_embeddings(tmp_path / "e.emb", emb)
    got = load_embeddings(tmp_path / "e.emb")
    assert set(got) == {"a", "bé"}
    for k in emb:
        np.testing.assert_array_equal(got[k], emb[k])


def test_embedding_binary_layout(tmp_path):
    write_embeddings(tmp_path / "e.emb", {"xy": np.array([1.0, 2.0], dtype=np.float32)})
    blob = (tmp_path / "e.emb").read_bytes()
    assert blob[:4] == b"EMB1"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 2
    assert int.from_bytes(blob[12:14], "little") == 2
    assert blob[14:16] == b"xy"
    assert np.frombuffer(blob[16:], dtype="<f4").tolist() == [1.0, 2.0]


def test_missing_item_named(tmp_path):
    write_embeddings(tmp_path / "e.emb", {"a": np.zeros(3, dtype=np.float32)})
    with pytest.raises(CorpusError, match="'zz'"):
        load_embeddings(tmp_path / "e.emb", required=["a", "zz"])


def test_truncated_embedding_file(tmp_path):
    write_embeddings(tmp_path / "e.emb", {"a": np.zeros(3, dtype=np.float32)})
    blob = (tmp_path / "e.emb").read_bytes()
    (tmp_path / "bad.emb").write_bytes(blob[:-4])
    with pytest.raises(CorpusError, match="truncated"):
        load_embeddings(tmp_path / "bad.emb")


def test_mixed_dimensions_rejected(tmp_path):
    with pytest.raises(CorpusError, match="different shapes"):
        write_embeddings(tmp_path / "e.emb", {"a": np.zeros(3), "b": np.zeros(4)})


# ---------------------------------------------------------------- synthetic


def test_synthetic_is_byte_identical(tmp_path):
    a = generate_synthetic_corpus(tmp_path / "a", n_items=50, n_users=30, seq_len=6, n_clusters=5, seed=7)
    b = generate_synthetic_corpus(tmp_path / "b", n_items=50, n_users=30, seq_len=6, n_clusters=5, seed=7)
    assert a.interactions_path.read_bytes() == b.interactions_path.read_bytes()
    assert a.embeddings_path.read_bytes() == b.embeddings_path.read_bytes()
    c = generate_synthetic_corpus(tmp_path / "c", n_items=50, n_users=30, seq_len=6, n_clusters=5, seed=8)
    assert c.interactions_path.read_bytes() != a.interactions_path.read_bytes()


def test_synthetic_round_trips_through_loaders(tmp_path):
    syn = generate_synthetic_corpus(tmp_path, n_items=40, n_users=20, seq_len=5, n_clusters=4, seed=1, dim=8)
    inter = load_interactions(syn.interactions_path)
    emb = load_embeddings(syn.embeddings_path, required={r.item_id for r in inter})
    assert len(inter) == 100
    assert len(emb) == 40 and all(v.shape == (8,) for v in emb.values())
    assert set(emb) == set(syn.item_ids)


def test_single_cluster_degenerate(tmp_path):
    syn = generate_synthetic_corpus(tmp_path, n_items=10, n_users=5, seq_len=4, n_clusters=1, seed=0)
    assert set(syn.labels) == {0}
    assert syn.transition.shape == (1, 1) and syn.transition[0, 0] == pytest.approx(1.0)


def test_n_clusters_bounded(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_corpus(tmp_path, n_items=3, n_users=1, n_clusters=4)


def test_planted_transitions_recovered(tmp_path):
    # empirical frequency oracle: 100k transitions, every entry within 0.05
    n_users, seq_len = 10_000, 11
    syn = generate_synthetic_corpus(
        tmp_path, n_items=40, n_users=n_users, seq_len=seq_len, n_clusters=4, seed=3, dim=4, concentration=1.0
    )
    label = dict(zip(syn.item_ids, syn.labels))
    counts = np.zeros((4, 4))
    split = build_split(load_interactions(syn.interactions_path), max_history=seq_len)
    for u in split.users:
        clusters = [label[i] for i in u.train + (u.valid_target, u.test_target)]
        for a, b in zip(clusters, clusters[1:]):
            counts[a, b] += 1
    assert counts.sum() == n_users * (seq_len - 1)
    estimate = counts / counts.sum(axis=1, keepdims=True)
    assert np.abs(estimate - syn.transition).max() < 0.05
