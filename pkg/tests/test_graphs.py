"""Class-graph topology and episode sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protograph.data import Dataset
from protograph.graphs import (
    EpisodeSpec,
    build_graph,
    cycle_star_adjacency,
    sample_episode,
)
from protograph.numerics import tensor


def brute_force_adjacency(n: int) -> np.ndarray:
    """Edge enumeration: cycle (i, (i+1) mod n) for n >= 2, star (i, n)."""
    a = np.zeros((n + 1, n + 1), dtype=np.uint8)
    edges = set()
    for i in range(n):
        if n >= 2:
            j = (i + 1) % n
            if i != j:
                edges.add(frozenset((i, j)))
        edges.add(frozenset((i, n)))
    for e in edges:
        i, j = sorted(e)
        a[i, j] = a[j, i] = 1
    return a


@pytest.mark.parametrize("n", range(1, 13))
def test_adjacency_matches_brute_force(n):
    np.testing.assert_array_equal(cycle_star_adjacency(n), brute_force_adjacency(n))


def test_adjacency_degrees_n5():
    a = cycle_star_adjacency(5)
    deg = a.sum(axis=0)
    np.testing.assert_array_equal(deg[:5], [3, 3, 3, 3, 3])
    assert deg[5] == 5
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)


def test_adjacency_degenerate_n1_n2():
    a1 = cycle_star_adjacency(1)
    np.testing.assert_array_equal(a1, [[0, 1], [1, 0]])
    a2 = cycle_star_adjacency(2)
    # one undirected cycle edge, no double edge
    assert a2[0, 1] == 1 and a2[1, 0] == 1
    np.testing.assert_array_equal(a2.sum(axis=0), [2, 2, 2])


def test_adjacency_rejects_zero_nodes():
    with pytest.raises(ValueError):
        cycle_star_adjacency(0)


@given(st.integers(min_value=1, max_value=40))
@settings(max_examples=120, deadline=None)
def test_adjacency_properties(n):
    a = cycle_star_adjacency(n)
    assert a.shape == (n + 1, n + 1)
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)
    assert a[:, n].sum() == n  # prototype sees every impression node
    if n >= 3:
        np.testing.assert_array_equal(a.sum(axis=0)[:n], np.full(n, 3))


def test_build_graph_prototype_is_mean():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(4, 6))
    g = build_graph(tensor(emb), "c0", "support")
    np.testing.assert_allclose(g.proto_feat.data[0], emb.mean(axis=0), atol=1e-15)
    assert g.class_id == "c0" and g.role == "support"


def test_build_graph_identical_rows():
    v = np.array([1.0, 2.0, 3.0])
    g = build_graph(tensor(np.tile(v, (5, 1))), "c", "query")
    np.testing.assert_array_equal(g.proto_feat.data[0], v)


@given(st.integers(min_value=1, max_value=10), st.integers(min_value=1, max_value=8),
       st.integers(0, 2 ** 31 - 1))
@settings(max_examples=120, deadline=None)
def test_build_graph_prototype_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, d))
    perm = rng.permutation(n)
    p1 = build_graph(tensor(emb), "c", "support").proto_feat.data
    p2 = build_graph(tensor(emb[perm]), "c", "support").proto_feat.data
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_build_graph_rejects_non_matrix():
    with pytest.raises(ValueError):
        build_graph(tensor(np.zeros(3)), "c", "support")


def test_adjacency_cyclic_relabeling_isomorphic():
    # rotating impression labels maps the graph onto itself
    for n in range(3, 9):
        a = cycle_star_adjacency(n)
        perm = np.r_[np.roll(np.arange(n), 1), n]
        np.testing.assert_array_equal(a[np.ix_(perm, perm)], a)


# ---------------------------------------------------------------------------
# episodes


def make_dataset(classes=8, imps=30) -> Dataset:
    rng = np.random.default_rng(1)
    items = {
        f"c{c:02d}": {f"i{i:02d}": rng.normal(size=4) for i in range(imps)}
        for c in range(classes)
    }
    return Dataset("embeddings", items)


def test_episode_counting():
    ds = make_dataset()
    spec = EpisodeSpec(ways=5, graphs_per_class=4, images_per_graph=5)
    ep = sample_episode(ds, spec, 0)
    assert len(ep.class_ids) == 5
    assert sum(len(g) for g in ep.support) == 20
    assert sum(len(g) for g in ep.query) == 5
    for per_class in ep.support:
        for d in per_class:
            assert len(d.impression_ids) == 5 and d.role == "support"


def test_episode_deterministic():
    ds = make_dataset()
    spec = EpisodeSpec(ways=4, graphs_per_class=2, images_per_graph=3)
    a = sample_episode(ds, spec, 7)
    b = sample_episode(ds, spec, 7)
    assert a.class_ids == b.class_ids
    assert a.support == b.support and a.query == b.query
    c = sample_episode(ds, spec, 8)
    assert (a.class_ids, a.support) != (c.class_ids, c.support)


def test_episode_distinct_classes():
    ds = make_dataset(classes=5)
    spec = EpisodeSpec(ways=5, graphs_per_class=1, images_per_graph=2)
    for seed in range(20):
        ep = sample_episode(ds, spec, seed)
        assert len(set(ep.class_ids)) == 5


def test_episode_small_class_repeats_allowed():
    items = {f"c{c}": {"a": np.zeros(2), "b": np.ones(2)} for c in range(3)}
    ds = Dataset("embeddings", items)
    spec = EpisodeSpec(ways=2, graphs_per_class=1, images_per_graph=5)
    ep = sample_episode(ds, spec, 3)
    for per_class in ep.support + ep.query:
        for d in per_class:
            assert set(d.impression_ids) <= {"a", "b"}
            assert len(d.impression_ids) == 5


def test_episode_disjoint_pools_when_data_allows():
    # 30 impressions >= N*(K+Q) = 3*(2+1) = 9: support/query never overlap
    ds = make_dataset(classes=6, imps=30)
    spec = EpisodeSpec(ways=3, graphs_per_class=2, images_per_graph=3)
    for seed in range(25):
        ep = sample_episode(ds, spec, seed)
        for ci in range(3):
            sup_ids = {i for d in ep.support[ci] for i in d.impression_ids}
            qry_ids = {i for d in ep.query[ci] for i in d.impression_ids}
            assert not sup_ids & qry_ids


def test_episode_within_graph_distinct_when_possible():
    ds = make_dataset(classes=4, imps=30)
    spec = EpisodeSpec(ways=3, graphs_per_class=2, images_per_graph=4)
    for seed in range(25):
        ep = sample_episode(ds, spec, seed)
        for per_class in ep.support + ep.query:
            for d in per_class:
                assert len(set(d.impression_ids)) == len(d.impression_ids)


def test_episode_needs_enough_classes():
    ds = make_dataset(classes=3)
    with pytest.raises(ValueError):
        sample_episode(ds, EpisodeSpec(ways=4, graphs_per_class=1, images_per_graph=2), 0)


def test_episode_class_subset_respected():
    ds = make_dataset(classes=8)
    subset = ["c00", "c02", "c04"]
    spec = EpisodeSpec(ways=3, graphs_per_class=1, images_per_graph=2)
    for seed in range(10):
        ep = sample_episode(ds, spec, seed, class_ids=subset)
        assert set(ep.class_ids) <= set(subset)


def test_episode_spec_validation():
    with pytest.raises(ValueError):
        EpisodeSpec(ways=1, graphs_per_class=1, images_per_graph=1)
    with pytest.raises(ValueError):
        EpisodeSpec(ways=2, graphs_per_class=0, images_per_graph=1)
    with pytest.raises(ValueError):
        EpisodeSpec(ways=2, graphs_per_class=1, images_per_graph=1, query_graphs=0)
