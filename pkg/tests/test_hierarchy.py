import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import codebook_with
from oracles import greedy_merge, silhouette_all_pairs
from merge_index.core import CoarsePrototype, IndexConfig
from merge_index.hierarchy import (
    MergeState,
    affinity,
    build_hierarchy,
    merge_pair,
    merge_round,
    prune,
    silhouette,
    silhouettes,
    slot_distances,
)

CFG = IndexConfig(d=4)


def proto(emb, n, members=(0,)):
    return CoarsePrototype(np.asarray(emb, dtype=float), float(n), list(members))


def test_affinity_examples():
    assert affinity(proto([1, 0, 0, 0], 1), proto([1, 0, 0, 0], 2), CFG) == pytest.approx(0.99, abs=1e-15)
    x, y = proto([1, 2, 0, 0], 5), proto([2, 1, 0, 1], 3)
    assert affinity(x, y, CFG.replace(lam=0.0)) == pytest.approx(4 / np.sqrt(5 * 6), abs=1e-15)
    assert affinity(proto([1, 0, 0, 0], 5), proto([0, 1, 0, 0], 3), CFG) == pytest.approx(-0.03, abs=1e-15)
    with pytest.raises(ValueError):
        affinity(proto([0, 0, 0, 0], 1), x, CFG)


def test_merge_pair_examples():
    m = merge_pair(proto([1, 0], 1, [0]), proto([0, 1], 3, [1]))
    np.testing.assert_allclose(m.embedding, [0.25, 0.75])
    assert m.ema_count == 4 and m.members == [0, 1]
    m = merge_pair(proto([1, 0], 2, [0]), proto([0, 1], 2, [1]))
    np.testing.assert_allclose(m.embedding, [0.5, 0.5])
    m = merge_pair(proto([1, 3], 2, [0]), proto([0, 1], 0, [1]))
    np.testing.assert_array_equal(m.embedding, [1, 3])
    with pytest.raises(ValueError):
        merge_pair(proto([1, 0], 0), proto([0, 1], 0))


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 100), min_size=2, max_size=30))
def test_count_conservation(counts):
    rng = np.random.default_rng(len(counts))
    protos = [proto(rng.normal(size=3), c, [i]) for i, c in enumerate(counts)]
    while len(protos) > 1:
        protos = [merge_pair(protos[0], protos[1])] + protos[2:]
    assert protos[0].ema_count == pytest.approx(sum(counts), rel=1e-6)


def test_merge_round_forced_pair():
    fine = codebook_with([[1, 0, 0, 0], [0.99, 0.1, 0, 0], [0, 0, 1, 0]])
    st_ = MergeState.from_fine(fine, 2)
    merge_round(st_, CFG)
    assert [p.members for p in st_.prototypes] == [[0, 1], [2]]
    before = [p.members for p in st_.prototypes]
    merge_round(st_, CFG)
    assert [p.members for p in st_.prototypes] == before


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 14), st.data())
def test_merge_round_equals_greedy_oracle(seed, n, data):
    target = data.draw(st.integers(1, n))
    rng = np.random.default_rng(seed)
    cw = rng.normal(size=(n, 4))
    counts = rng.uniform(0.3, 20, size=n)
    fine = codebook_with(cw, counts)
    state = MergeState.from_fine(fine, target)
    merge_round(state, CFG)
    oracle = greedy_merge(fine.codewords[:n], counts, target, CFG.lam)
    assert [p.members for p in state.prototypes] == [m for _, _, m in oracle]
    for p, (e, c, _) in zip(state.prototypes, oracle):
        np.testing.assert_allclose(p.embedding, e, rtol=1e-9, atol=1e-12)
        assert p.ema_count == pytest.approx(c, rel=1e-12)


def test_merge_round_tie_break():
    # three identical prototypes: every pair ties, the oracle picks (0, 1) first
    fine = codebook_with([[1, 0, 0, 0]] * 3)
    st_ = MergeState.from_fine(fine, 2)
    merge_round(st_, CFG)
    assert [p.members for p in st_.prototypes] == [[0, 1], [2]]


def test_silhouette_analytic():
    # a = 0.1, b = 0.9: build a distance matrix directly
    dist = np.array([[0, 0.1, 0.9], [0.1, 0, 0.9], [0.9, 0.9, 0.0]])
    state = MergeState([proto([1], 1, [0, 1]), proto([1], 1, [2])], target_size=2)
    sil = silhouettes(state, dist, {0: 0, 1: 1, 2: 2})
    assert sil[0] == pytest.approx(0.8 / 0.9, abs=1e-15)
    # a = b
    dist = np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0.0]])
    assert silhouettes(state, dist, {0: 0, 1: 1, 2: 2})[0] == 0.0


def test_silhouette_singletons_and_single_prototype():
    fine = codebook_with([[1, 0, 0, 0], [0, 1, 0, 0]])
    state = MergeState.from_fine(fine, 1)
    assert silhouette(0, state, fine, CFG) == 0.0
    merge_round(state, CFG)
    assert silhouette(0, state, fine, CFG) == 0.0


def _random_state(rng, n_slots, n_protos):
    cw = rng.normal(size=(n_slots, 4))
    counts = rng.uniform(0.3, 10, size=n_slots)
    fine = codebook_with(cw, counts)
    labels = np.concatenate([np.arange(n_protos), rng.integers(0, n_protos, n_slots - n_protos)])
    rng.shuffle(labels)
    groups = [sorted(np.flatnonzero(labels == c).tolist()) for c in range(n_protos)]
    state = MergeState([proto(cw[g].mean(axis=0), counts[g].sum(), g) for g in groups], target_size=n_protos)
    return fine, counts, groups, state


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_silhouette_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n_protos = int(rng.integers(2, 5))
    fine, counts, groups, state = _random_state(rng, int(rng.integers(n_protos, 13)), n_protos)
    expect = silhouette_all_pairs(fine.codewords[: len(counts)], counts, groups, CFG.lam)
    for q, v in expect.items():
        got = silhouette(q, state, fine, CFG)
        assert got == pytest.approx(v, abs=1e-9)
        assert -1 <= got <= 1


def test_prune_outlier_and_bounds():
    tight = [[1, 0.01 * i, 0, 0] for i in range(4)]
    fine = codebook_with(tight + [[0, 0, 1, 0], [0, 0, 1, 0.01], [0.05, 0, 1, 0.02]])
    groups = [[0, 1, 2, 3, 6], [4, 5]]
    mk = lambda: MergeState(
        [proto(fine.codewords[g].mean(axis=0), len(g), g) for g in groups], target_size=2
    )
    oracle = silhouette_all_pairs(fine.codewords[:7], np.ones(7), groups, CFG.lam)
    assert [q for q, v in oracle.items() if v < 0] == [6]
    state = mk()
    assert prune(state, fine, CFG) == {6}
    assert [p.members for p in state.prototypes] == [[0, 1, 2, 3], [4, 5], [6]]
    np.testing.assert_allclose(state.prototypes[0].embedding, fine.codewords[:4].mean(axis=0))
    assert prune(mk(), fine, CFG.replace(r=-1.0)) == set()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.floats(-1, 1), st.floats(0, 1))
def test_prune_monotone_in_r(seed, r, dr):
    rng = np.random.default_rng(seed)
    fine, _, _, state = _random_state(rng, 20, 3)
    copy = MergeState(list(state.prototypes), 3, merged_flags=list(state.merged_flags))
    lo = prune(state, fine, CFG.replace(r=r))
    hi = prune(copy, fine, CFG.replace(r=min(r + dr, 1.0)))
    assert lo <= hi


def test_build_identity_and_errors():
    fine = codebook_with(np.eye(4))
    coarse = build_hierarchy(fine, CFG, 4)
    assert [p.members for p in coarse.prototypes] == [[0], [1], [2], [3]]
    with pytest.raises(ValueError):
        build_hierarchy(fine, CFG, 5)
    with pytest.raises(ValueError):
        build_hierarchy(fine, CFG, 0)


def test_build_bipartition(rng):
    a = np.array([1.0, 1, 0, 0]) + 0.1 * rng.normal(size=(10, 4))
    b = -np.array([1.0, 1, 0, 0]) + 0.1 * rng.normal(size=(10, 4))
    order = rng.permutation(20)
    fine = codebook_with(np.vstack([a, b])[order])
    coarse = build_hierarchy(fine, CFG, 2)
    truth = {frozenset(np.flatnonzero(order < 10).tolist()), frozenset(np.flatnonzero(order >= 10).tolist())}
    assert {frozenset(p.members) for p in coarse.prototypes} == truth


def test_build_single_round_skips_prune(rng):
    fine = codebook_with(rng.normal(size=(30, 4)))
    one = build_hierarchy(fine, CFG, 5, max_rounds=1)
    state = MergeState.from_fine(fine, 5)
    merge_round(state, CFG)
    assert [p.members for p in one.prototypes] == [p.members for p in state.prototypes]


def test_build_skips_empty_slots(rng):
    fine = codebook_with(rng.normal(size=(8, 4)))
    fine.reset(3)
    coarse = build_hierarchy(fine, CFG, 3)
    assert coarse.parent[3] == -1
    assert sorted(m for p in coarse.prototypes for m in p.members) == [0, 1, 2, 4, 5, 6, 7]


def test_slot_distances_diagonal():
    fine = codebook_with([[1, 0, 0, 0], [0, 1, 0, 0]], counts=[2.0, 3.0])
    d = slot_distances(fine, [0, 1], CFG)
    assert d[0, 1] == pytest.approx(1 - (0 - 0.02))
    assert d[0, 0] == pytest.approx(0.02)
