import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilrec.data import (InteractionStore, NoiseSpec, RawInteraction, filter_sparse, inject_noise,
                         load_interactions, read_interactions, split, synthesize)
from tilrec.errors import EmptyDatasetError, ParseError


def _write(tmp_path, text, name="log.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _pairs(records):
    return sorted((r.user, r.item) for r in records)


# -- loading ---------------------------------------------------------------------------

def test_threshold_boundary(tmp_path):
    p = _write(tmp_path, "u1\ta\t4\nu1\tb\t3.9\nu2\ta\t5\n")
    kept = load_interactions(p, rating_threshold=4)
    assert _pairs(kept) == [("u1", "a"), ("u2", "a")]


def test_implicit_records_pass_through(tmp_path):
    p = _write(tmp_path, "".join(f"u{k},i{k}\n" for k in range(5)), "clicks.csv")
    assert len(load_interactions(p)) == 5


def test_header_detected_and_timestamp_parsed(tmp_path):
    p = _write(tmp_path, "user\titem\trating\ttimestamp\nu1\ta\t5\t100\n")
    recs = read_interactions(p)
    assert len(recs) == 1 and recs[0].timestamp == 100 and recs[0].rating == 5.0


def test_malformed_line_reports_line_number(tmp_path):
    p = _write(tmp_path, "u1\ta\t5\nonlyonefield\n")
    with pytest.raises(ParseError) as exc:
        read_interactions(p)
    assert exc.value.line_no == 2


def test_rating_out_of_range_is_a_parse_error(tmp_path):
    p = _write(tmp_path, "u1\ta\t7\n")
    with pytest.raises(ParseError):
        read_interactions(p)


def test_all_below_threshold_is_empty(tmp_path):
    p = _write(tmp_path, "u1\ta\t2\nu2\tb\t1\n")
    with pytest.raises(EmptyDatasetError):
        load_interactions(p)


def test_raw_interaction_rating_range():
    with pytest.raises(ValueError):
        RawInteraction("u", "i", rating=0.5)


# -- filtering ------------------------------------------------------------------------

def _grid(users, items):
    return [RawInteraction(u, i) for u in users for i in items]


def test_user_below_min_count_removed():
    recs = _grid([f"u{k}" for k in range(10)], [f"i{k}" for k in range(10)])
    recs += [RawInteraction("light", f"i{k}") for k in range(9)]
    out = filter_sparse(recs, 10)
    assert "light" not in {r.user for r in out}
    assert len(out) == 100


def test_min_count_zero_is_identity():
    recs = [RawInteraction("a", "x"), RawInteraction("b", "y")]
    assert filter_sparse(recs, 0) == recs


def test_cascade_reaches_fixed_point():
    # min_count 2: item z has a single user, so dropping it leaves u3 with one item,
    # which then drops u3, which drops item y to one user, and so on
    recs = [RawInteraction("u1", "x"), RawInteraction("u2", "x"), RawInteraction("u1", "w"),
            RawInteraction("u2", "w"), RawInteraction("u3", "y"), RawInteraction("u4", "y"),
            RawInteraction("u3", "z"), RawInteraction("u4", "v")]
    out = filter_sparse(recs, 2)
    assert _pairs(out) == [("u1", "w"), ("u1", "x"), ("u2", "w"), ("u2", "x")]


def test_everything_filtered_is_empty():
    with pytest.raises(EmptyDatasetError):
        filter_sparse([RawInteraction("a", "x")], 10)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=120),
       st.integers(1, 4))
def test_filter_is_idempotent(pairs, k):
    recs = [RawInteraction(f"u{u}", f"i{i}") for u, i in pairs]
    try:
        once = filter_sparse(recs, k)
    except EmptyDatasetError:
        return
    assert _pairs(filter_sparse(once, k)) == _pairs(once)


# -- splitting ------------------------------------------------------------------------

def _user_records(n, user="u"):
    return [RawInteraction(user, f"i{k}") for k in range(n)]


def test_ten_positives_split_8_1_1():
    store = split(_user_records(10), (0.8, 0.1, 0.1), seed=0)
    assert (store.train_pos[0].size, store.val_pos[0].size, store.test_pos[0].size) == (8, 1, 1)


def test_train_only_ratios():
    store = split(_user_records(7), (1.0, 0.0, 0.0), seed=0)
    assert store.train_pos[0].size == 7 and store.val_pos[0].size == 0 and store.test_pos[0].size == 0


def test_tiny_user_keeps_everything_in_train():
    store = split(_user_records(2), seed=0)
    assert store.train_pos[0].size == 2
    assert store.evaluable_users("test").size == 0


def test_split_is_deterministic():
    recs = _user_records(30, "a") + _user_records(25, "b")
    s1, s2 = split(recs, seed=3), split(recs, seed=3)
    for a, b in zip(s1.test_pos + s1.val_pos, s2.test_pos + s2.val_pos):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=8), st.integers(0, 2**16))
def test_split_disjoint_and_dense(sizes, seed):
    recs = [r for u, n in enumerate(sizes) for r in _user_records(n, f"u{u}")]
    store = split(recs, seed=seed)
    for u in range(store.n_users):
        tr, va, te = (set(x.tolist()) for x in (store.train_pos[u], store.val_pos[u], store.test_pos[u]))
        assert not (tr & va or tr & te or va & te)
        assert len(tr) + len(va) + len(te) == sizes[u]
    top = max(max(np.concatenate([store.train_pos[u], store.val_pos[u], store.test_pos[u]]))
              for u in range(store.n_users))
    assert top == store.n_items - 1


def test_store_roundtrip(tmp_path):
    store, _ = synthesize(20, 40, 2, noise_rate=0.2, seed=1)
    store.save(tmp_path / "s.json")
    back = InteractionStore.load(tmp_path / "s.json")
    assert back.n_users == store.n_users
    for a, b in zip(back.train_pos, store.train_pos):
        np.testing.assert_array_equal(a, b)
    assert back.rating_lookup == store.rating_lookup


# -- noise ----------------------------------------------------------------------------

def _one_user_store(n_train=8, n_items=40):
    return InteractionStore.from_lists(1, n_items, [np.arange(n_train)], [[n_train]], [[n_train + 1]])


def test_noisy_pos_adds_half():
    noisy = inject_noise(_one_user_store(), NoiseSpec("noisy_pos", 0.5, seed=0))
    assert noisy.train_pos[0].size == 12
    assert not set(noisy.train_pos[0].tolist()) & {8, 9}


def test_clean_mode_is_unchanged():
    store = _one_user_store()
    assert inject_noise(store, NoiseSpec("clean")) is store


def test_noisy_pos_neg_keeps_count():
    store = _one_user_store()
    noisy = inject_noise(store, NoiseSpec("noisy_pos_neg", 0.5, seed=0))
    tr = set(noisy.train_pos[0].tolist())
    assert len(tr) == 8
    assert len(tr & set(range(8))) == 4
    assert noisy.removed_pos[0].size == 4
    np.testing.assert_array_equal(noisy.val_pos[0], store.val_pos[0])
    np.testing.assert_array_equal(noisy.test_pos[0], store.test_pos[0])


def test_noise_skips_empty_users():
    store = InteractionStore.from_lists(2, 10, [[0, 1], []], [[], []], [[], []])
    noisy = inject_noise(store, NoiseSpec("noisy_pos", 1.0, seed=0))
    assert noisy.train_pos[1].size == 0 and noisy.train_pos[0].size == 4


def test_noise_accounting_exact():
    store, _ = synthesize(60, 200, 4, seed=5)
    noisy = inject_noise(store, NoiseSpec("noisy_pos", 0.3, seed=2))
    expected = sum(int(np.floor(0.3 * t.size + 0.5)) for t in store.train_pos)
    assert noisy.n_train - store.n_train == expected


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("noisy_pos", 1.5)
    with pytest.raises(ValueError):
        NoiseSpec("bogus")


# -- synthetic worlds ------------------------------------------------------------------

def test_clean_world_positives_are_above_threshold():
    store, aff = synthesize(40, 120, 3, noise_rate=0.0, seed=0)
    for u in range(store.n_users):
        pos = np.concatenate([store.train_pos[u], store.val_pos[u], store.test_pos[u]])
        rest = np.setdiff1d(np.arange(store.n_items), pos)
        assert aff[u, pos].min() > aff[u, rest].max()


def test_fake_positives_are_below_threshold():
    store, aff = synthesize(40, 120, 3, noise_rate=0.2, seed=0)
    for u, fake in enumerate(store.meta["fake_positives"]):
        if not fake:
            continue
        true = np.concatenate([store.val_pos[u], store.test_pos[u],
                               np.setdiff1d(store.train_pos[u], fake)])
        assert aff[u, fake].max() < aff[u, true].min()


def test_synthesize_is_seeded():
    a, _ = synthesize(30, 60, 2, noise_rate=0.1, seed=4)
    b, _ = synthesize(30, 60, 2, noise_rate=0.1, seed=4)
    assert a.to_dict() == b.to_dict()


def test_two_groups_low_rank():
    # no spread: every vector is a group center, so affinity has rank <= 2
    _, aff = synthesize(50, 80, 2, seed=0, item_spread=0.0, user_spread=0.0)
    sv = np.linalg.svd(aff, compute_uv=False)
    assert sv[2] < 1e-8 * sv[0]


def test_synthetic_grades_cover_case_study_cells():
    store, _ = synthesize(30, 200, 3, seed=0)
    grades = set(store.rating_lookup.values())
    assert {1.0, 2.0, 3.0, 4.0, 5.0} <= grades
