import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from geosdg import knn
from geosdg.errors import ConfigError, DegenerateIndex, FormatError, ShapeError


def brute_force(emb, labels, ids, q, k):
    """Independent oracle: sort every row by (exact distance, id), then vote."""
    rows = [(sum((float(a) - float(b)) ** 2 for a, b in zip(e, q)), rid, lab)
            for e, lab, rid in zip(emb, labels, ids)]
    rows.sort(key=lambda r: (r[0], r[1]))
    top = rows[:k]
    ones = sum(r[2] for r in top)
    if 2 * ones == k:
        return top[0][2]
    return int(2 * ones > k)


def test_build_index_examples(rng):
    idx = knn.build_index(rng.normal(size=(10, 4)), rng.integers(0, 2, 10))
    assert len(idx) == 10 and idx.dim == 4
    dup = knn.build_index(np.zeros((2, 3)), [0, 1])
    assert len(dup) == 2
    with pytest.raises(ShapeError):
        knn.build_index(np.zeros((3, 2)), [0, 1])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        knn.build_index(np.zeros((3, 2)), [1, 1, 1])
    assert any(issubclass(x.category, DegenerateIndex) for x in w)


def test_classify_examples():
    emb = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    idx = knn.build_index(emb, [1, 1, 0, 0, 0])
    nb = knn.classify(idx, [0.0], 1)
    assert nb.label == 1 and nb.distances[0] == 0.0
    nb = knn.classify(idx, [-0.5], 3)
    assert nb.label == 1 and nb.votes == {0: 1, 1: 2}
    assert nb.ids == (0, 1, 2)
    assert knn.PAPER_KS == (5, 10, 50, 100, 200)
    with pytest.raises(ConfigError):
        knn.classify(idx, [0.0], 6)


def test_vote_tie_goes_to_nearest():
    idx = knn.build_index(np.array([[1.0], [2.0], [3.0], [4.0]]), [0, 1, 1, 0])
    assert knn.classify(idx, [0.0], 4).label == 0
    assert knn.classify(idx, [5.0], 4).label == 0
    assert knn.classify(idx, [2.4], 2).label == 1


def test_boundary_ties_admit_smallest_id():
    emb = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    idx = knn.build_index(emb, [1, 0, 0, 1], row_ids=["d", "c", "b", "a"])
    nb = knn.classify(idx, [0.0], 2)
    assert nb.ids == ("a", "b")
    assert nb.label == 1   # equidistant vote tie: class of the smallest id


@pytest.mark.parametrize("seed", range(5))
def test_classify_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(200, 320)), int(rng.integers(1, 16))
    # a coarse lattice forces many exact distance ties
    emb = rng.integers(-2, 3, size=(n, d)).astype(np.float32)
    labels = rng.integers(0, 2, n)
    ids = rng.permutation(n)
    idx = knn.build_index(emb, labels, row_ids=ids)
    queries = rng.integers(-2, 3, size=(8, d)).astype(np.float32)
    for k in knn.PAPER_KS:
        batch = knn.predict(idx, queries, k)
        for q, b in zip(queries, batch):
            expect = brute_force(emb, labels, ids, q, k)
            assert knn.classify(idx, q, k).label == expect == b


@given(st.integers(0, 2**32 - 1))
def test_row_order_never_matters(seed):
    rng = np.random.default_rng(seed)
    emb = rng.integers(-1, 2, size=(30, 3)).astype(np.float32)
    labels = rng.integers(0, 2, 30)
    ids = [f"r{i:03d}" for i in range(30)]
    perm = rng.permutation(30)
    a = knn.build_index(emb, labels, row_ids=ids)
    b = knn.build_index(emb[perm], labels[perm], row_ids=[ids[i] for i in perm])
    q = rng.integers(-1, 2, size=(10, 3))
    for k in (1, 4, 5, 30):
        assert np.array_equal(knn.predict(a, q, k), knn.predict(b, q, k))


@given(st.integers(0, 1), st.integers(0, 2**32 - 1))
def test_single_class_index(label, seed):
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateIndex)
        idx = knn.build_index(rng.normal(size=(12, 2)), [label] * 12)
    assert set(knn.predict(idx, rng.normal(size=(5, 2)), 7)) == {label}


def test_evaluate_examples():
    r = knn.evaluate([0, 1, 1, 0], [0, 1, 1, 0])
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1, 1, 1, 1)
    pred = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
    true = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0]
    r = knn.evaluate(pred, true)
    assert (r.tp, r.fp, r.fn, r.tn) == (2, 1, 1, 6)
    assert r.precision == pytest.approx(2 / 3) and r.recall == pytest.approx(2 / 3)
    assert r.f1 == pytest.approx(2 / 3) and r.accuracy == pytest.approx(0.8)
    r = knn.evaluate([0, 0, 0], [1, 0, 1])
    assert r.precision == 0 and r.recall == 0 and "zero_denominator:precision" in r.flags


@given(hnp.arrays(np.int64, st.integers(2, 40), elements=st.integers(0, 1)).filter(lambda x: 0 < x.sum() < len(x)))
def test_evaluate_self_is_perfect(x):
    r = knn.evaluate(x, x)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1, 1, 1, 1) and r.flags == ()


def test_sweep_examples(rng):
    emb = rng.normal(size=(300, 4))
    lab = rng.integers(0, 2, 300)
    idx = knn.build_index(emb, lab)
    res = knn.sweep_k(idx, emb, lab, ks=(1,))
    assert res.reports[0].accuracy == 1.0
    res = knn.sweep_k(idx, emb[:20], lab[:20])
    assert [r.k for r in res.reports] == [5, 10, 50, 100, 200]
    assert knn.sweep_csv(res).count("\n") == 6


def test_sweep_prefers_small_k_on_tight_clusters():
    # six small clusters alternating labels: k=5 stays inside a cluster, k=50 swallows neighbours
    rng = np.random.default_rng(0)
    centres = [(i * 10.0, 0.0) for i in range(6)]
    emb, lab = [], []
    for ci, c in enumerate(centres):
        size = 30 if ci % 2 == 0 else 8
        emb.append(np.array(c) + rng.normal(scale=0.5, size=(size, 2)))
        lab += [ci % 2] * size
    emb, lab = np.concatenate(emb), np.array(lab)
    idx = knn.build_index(emb, lab)
    q = np.array([c for c in centres for _ in range(3)]) + rng.normal(scale=0.5, size=(18, 2))
    truth = np.repeat([0, 1, 0, 1, 0, 1], 3)
    res = knn.sweep_k(idx, q, truth, ks=(5, 50))
    acc = {r.k: r.accuracy for r in res.reports}
    assert acc[5] > acc[50] and res.best_k == 5
    oracle = [brute_force(emb, lab, range(len(lab)), x, 5) for x in q]
    assert np.array_equal(knn.predict(idx, q, 5), oracle)


def test_embeddings_csv_roundtrip(rng):
    emb = rng.normal(size=(6, 3)).astype(np.float32)
    t = knn.EmbeddingTable([f"t{i}" for i in range(6)], ["piped_water"] * 6, [0, 1, None, 1, 0, 1], emb)
    back = knn.parse_embeddings(knn.embeddings_csv(t))
    assert back.row_ids == t.row_ids and back.labels == t.labels
    assert np.array_equal(back.embeddings, emb)
    q = rng.normal(size=(4, 3))
    assert np.array_equal(knn.predict(t.index(), q, 3), knn.predict(back.index(), q, 3))


def test_embeddings_csv_errors():
    with pytest.raises(FormatError):
        knn.parse_embeddings("id,task,label,dim,e_0\n")
    with pytest.raises(FormatError) as err:
        knn.parse_embeddings("row_id,task,label,dim,e_0\na,piped_water,2,1,0.5\n")
    assert err.value.row == 2
    empty = knn.parse_embeddings("row_id,task,label,dim,e_0,e_1\n")
    assert len(empty) == 0 and empty.embeddings.shape == (0, 2)
