from hypothesis import given, settings
from hypothesis import strategies as st

import pytest

from crossrec.interactions import (
    DatasetSplit,
    Interactions,
    UserSequences,
    build_sequences,
    chronological_split,
)


def test_sequences_order_by_timestamp():
    """Ties in timestamp keep input order."""
    rows = [("u", "c", "X", 5), ("u", "a", "Y", 1), ("u", "b", "X", 1)]
    seq = Interactions.from_records(rows, domains=("X", "Y")).sequences()["u"]
    assert seq.seq_merged == [("a", 1), ("b", 0), ("c", 0)]
    assert seq.seq_x == ["b", "c"]
    assert seq.seq_y == ["a"]


def test_build_sequences_matches_verb():
    rows = [("u2", "a", "X", 2), ("u1", "b", "Y", 1), ("u1", "c", "X", 0)]
    log = Interactions.from_records(rows, domains=("X", "Y"))
    assert build_sequences(list(log)) == log.sequences()
    assert list(log.sequences()) == ["u1", "u2"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.integers(0, 1)), max_size=20))
def test_views_are_projections(merged):
    """The domain sequences are the merged sequence filtered by domain."""
    seq = UserSequences.from_merged("u", merged)
    assert seq.is_consistent()
    assert len(seq.seq_x) + len(seq.seq_y) == len(seq.seq_merged)


def test_inconsistent_views():
    seq = UserSequences("u", seq_x=["a"], seq_y=[], seq_merged=[("b", 0)])
    assert not seq.is_consistent()


def test_split_targets(toy_split):
    """The last two merged items become validation and test targets."""
    assert toy_split.test["u1"].item == "a3"
    assert toy_split.valid["u1"].item == "b2"
    assert toy_split.valid["u1"].domain == 1
    assert len(toy_split.train["u1"].seq_merged) == 5
    assert toy_split.train["u1"].is_consistent()


def test_split_is_disjoint(toy_split):
    """Targets never appear in the training sequences at their own positions."""
    for user in toy_split.users:
        train = toy_split.train[user].seq_merged
        history = toy_split.history(user, "test").seq_merged
        assert history[:-1] == train
        assert history[-1] == (toy_split.valid[user].item, toy_split.valid[user].domain)
        assert toy_split.history(user, "valid").seq_merged == train


logs = st.lists(
    st.tuples(st.sampled_from(["u1", "u2", "u3", "u4", "u5"]), st.integers(0, 1), st.integers(0, 9), st.integers(0, 50)),
    max_size=60,
)


@settings(max_examples=1000, deadline=None)
@given(rows=logs)
def test_split_of_random_logs(rows):
    """Train sequences plus the two targets give back each merged sequence, every view stays a projection."""
    log = Interactions.from_records([(u, f"{'xy'[d]}{i}", "XY"[d], t) for u, d, i, t in rows], domains=("X", "Y"))
    sequences = {u: s for u, s in log.sequences().items() if len(s.seq_merged) >= 3}
    split = chronological_split(sequences)
    assert split.users == sorted(sequences)
    for user, seq in sequences.items():
        train = split.train[user]
        valid, test = split.valid[user], split.test[user]
        assert train.seq_merged + [(valid.item, valid.domain), (test.item, test.domain)] == seq.seq_merged
        assert train.is_consistent()
        assert split.history(user, "valid").is_consistent()
        assert split.history(user, "test").is_consistent()


def test_split_short_user():
    with pytest.raises(ValueError, match="at least 3"):
        chronological_split({"u": UserSequences.from_merged("u", [("a", 0), ("b", 1)])})


def test_history_bad_split(toy_split):
    with pytest.raises(ValueError):
        toy_split.history("u1", "train")


def test_catalog_layout(toy_split):
    catalog = toy_split.item_catalog
    assert catalog.sizes == (4, 4)
    assert catalog.global_index("b0") == 4
    assert catalog.local_index("b0") == 0
    assert catalog.all_items()[:2] == ["a0", "a1"]


def test_catalog_rejects_shared_items(domains):
    from crossrec.interactions import ItemCatalog

    with pytest.raises(ValueError, match="more than one domain"):
        ItemCatalog([["a"], ["a"]], domains)


def test_split_write_read(tmp_path, toy_split):
    toy_split.write(tmp_path / "split.jsonl", tmp_path / "catalog.jsonl")
    again = DatasetSplit.read(tmp_path / "split.jsonl", tmp_path / "catalog.jsonl")
    assert again.train == toy_split.train
    assert again.valid == toy_split.valid
    assert again.test == toy_split.test
    assert again.item_catalog.all_items() == toy_split.item_catalog.all_items()
