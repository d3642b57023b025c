import numpy as np
import pytest
import scipy.sparse as sp

from mmkg_core.datastore import FeatureStore, InteractionData, split_interactions
from mmkg_core.exceptions import ContractViolationError, ValidationError
from mmkg_core.graph import (
    Variant,
    assemble_interaction_graph,
    assemble_mmkg,
    assemble_variant,
    normalize,
    read_fingerprint,
    write_fingerprint,
)
from mmkg_core.knn import NeighborList, topn_cosine
from mmkg_core.model import init_params, layer0_embeddings, project


def _store(n_items, modalities):
    rng = np.random.default_rng(0)
    return FeatureStore(
        modality_types=tuple(modalities),
        matrices={tau: rng.standard_normal((n_items, 3)) for tau in modalities},
        item_ids=tuple(f"i{j}" for j in range(n_items)),
    )


def _neighbors(store, n):
    return {tau: topn_cosine(store.matrix(tau), n) for tau in store.modality_types}


def _fixed(indices):
    indices = np.asarray(indices, dtype=np.int64)
    return NeighborList(indices=indices, similarities=np.ones(indices.shape), requested_n=indices.shape[1])


def test_two_items_two_modalities():
    """
    Tests the block layout for N=2, T=2, n=1: six nodes, four item-modal edges.
    """
    store = _store(2, ["image", "text"])
    graph = assemble_mmkg(store, _neighbors(store, 1))
    assert graph.n_nodes == 6
    assert graph.edge_counts["item_modal"] == 4
    dense = graph.adjacency.toarray()
    assert not dense[:2, :2].any()
    for k in range(2):
        for j in range(2):
            assert dense[j, (k + 1) * 2 + j] == 1.0


def test_mutual_picks_make_one_edge():
    store = _store(3, ["image"])
    graph = assemble_mmkg(store, {"image": _fixed([[1], [0], [0]])})
    assert graph.edge_counts["modal_modal"] == 2
    dense = graph.adjacency.toarray()
    assert dense[3, 4] == 1.0
    assert dense[3, 5] == 1.0
    assert dense.max() == 1.0
    np.testing.assert_array_equal(dense, dense.T)


def test_triples_keep_relations_directed():
    store = _store(3, ["image", "text"])
    neighbors = {"image": _fixed([[1], [0], [0]]), "text": _fixed([[2], [2], [1]])}
    graph = assemble_mmkg(store, neighbors)
    assert graph.relation_names == ("image_of", "similar_image", "text_of", "similar_text")
    relations = graph.triples[:, 1]
    assert np.sum(relations == 0) == 3
    assert np.sum(relations == 1) == 3
    text_similar = graph.triples[relations == 3]
    assert (7, 3, 8) in {tuple(t) for t in text_similar}


@pytest.mark.parametrize("t, extra", [(2, 1), (4, 6)])
def test_inter_modal_edges_per_item(t, extra):
    store = _store(5, [f"m{k}" for k in range(t)])
    neighbors = _neighbors(store, 2)
    base = assemble_mmkg(store, neighbors)
    graph = assemble_variant(store, neighbors, None, "inter_modal")
    assert graph.edge_counts["inter_modal"] == 5 * extra
    assert graph.adjacency.nnz // 2 == base.adjacency.nnz // 2 + 5 * extra


def test_interaction_variant_appends_users():
    store = _store(4, ["image"])
    data = split_interactions(
        InteractionData(
            user_ids=("a", "b", "c"), n_items=4,
            users=np.array([0, 1, 2, 2]), items=np.array([0, 1, 2, 3]),
        ),
        seed=1,
    )
    graph = assemble_variant(store, _neighbors(store, 1), data, Variant.INTERACTION)
    assert graph.n_nodes == 2 * 4 + 3
    assert graph.user_offset == 8
    assert graph.adjacency[8, 0] == 1.0
    assert graph.adjacency[9, 1] == 1.0


def test_interaction_variant_needs_split():
    store = _store(2, ["image"])
    data = InteractionData(user_ids=("a",), n_items=2, users=np.array([0]), items=np.array([1]))
    with pytest.raises(ValidationError):
        assemble_variant(store, _neighbors(store, 1), data, "interaction")


def test_item_item_matches_single_modality_knn():
    """
    Tests that with one modality the item-item graph is the symmetrized kNN graph.
    """
    store = _store(4, ["image"])
    neighbors = _neighbors(store, 1)
    graph = assemble_variant(store, neighbors, None, "item_item")
    expected = np.zeros((4, 4))
    for j, pick in enumerate(neighbors["image"].indices[:, 0]):
        expected[j, pick] = expected[pick, j] = 1.0
    np.testing.assert_array_equal(graph.adjacency.toarray(), expected)
    assert not graph.has_modality_nodes
    assert graph.n_nodes == 4


def test_unknown_variant():
    store = _store(3, ["image"])
    with pytest.raises(ValidationError):
        assemble_variant(store, _neighbors(store, 1), None, "hypergraph")


def test_single_edge_normalizes_to_one():
    op = normalize(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
    np.testing.assert_allclose(op.matrix.toarray(), [[0.0, 1.0], [1.0, 0.0]])


def test_star_weights():
    adjacency = np.zeros((5, 5))
    adjacency[0, 1:] = adjacency[1:, 0] = 1.0
    op = normalize(sp.csr_matrix(adjacency))
    np.testing.assert_allclose(op.matrix.toarray()[0, 1:], 0.5)
    assert op.degrees[0] == 4.0


def test_normalize_matches_dense():
    upper = sp.random(30, 30, density=0.15, random_state=3, format="csr")
    upper.data[:] = 1.0
    adjacency = sp.triu(upper, k=1)
    adjacency = (adjacency + adjacency.T).tocsr()
    dense = adjacency.toarray()
    degrees = dense.sum(axis=1)
    inv = np.where(degrees > 0, 1.0 / np.sqrt(np.where(degrees > 0, degrees, 1.0)), 0.0)
    expected = inv[:, None] * dense * inv[None, :]
    np.testing.assert_allclose(normalize(adjacency).matrix.toarray(), expected, atol=1e-6)


@pytest.mark.parametrize("matrix", [
    [[0.0, 1.0], [0.0, 0.0]],
    [[1.0, 0.0], [0.0, 0.0]],
])
def test_normalize_contract(matrix):
    with pytest.raises(ContractViolationError):
        normalize(sp.csr_matrix(np.array(matrix)))


def test_one_pair_interaction_graph():
    data = split_interactions(
        InteractionData(user_ids=("u",), n_items=1, users=np.array([0]), items=np.array([0])), seed=0
    )
    igraph = assemble_interaction_graph(data)
    assert igraph.n_nodes == 2
    assert igraph.adjacency.nnz == 2


def test_fingerprint_round_trip(tmp_path, small_graph):
    path = tmp_path / "fingerprint.txt"
    write_fingerprint(small_graph.fingerprint, path)
    loaded = read_fingerprint(path)
    assert loaded == small_graph.fingerprint
    assert len(loaded.digest) == 32


def test_fingerprint_tracks_neighbors(small_store, small_neighbors):
    first = assemble_mmkg(small_store, small_neighbors)
    other = {tau: topn_cosine(small_store.matrix(tau), 2) for tau in small_store.modality_types}
    second = assemble_mmkg(small_store, other)
    assert first.fingerprint.content_hash == assemble_mmkg(small_store, small_neighbors).fingerprint.content_hash
    assert first.fingerprint.content_hash != second.fingerprint.content_hash


def test_modality_order_permutes_graph_and_stack_blocks(small_store, small_neighbors):
    """Reordering the modality types moves whole node blocks, identically in the graph and the layer-0 stack."""
    reordered = small_store.reordered(small_store.modality_types[::-1])
    graph = assemble_mmkg(small_store, small_neighbors)
    swapped = assemble_mmkg(reordered, small_neighbors)
    n = small_store.n_items
    blocks = [np.arange(n)] + [
        np.arange(n) + (1 + small_store.modality_types.index(tau)) * n for tau in reordered.modality_types
    ]
    perm = np.concatenate(blocks)
    np.testing.assert_array_equal(swapped.adjacency.toarray(), graph.adjacency.toarray()[np.ix_(perm, perm)])

    params = init_params(small_store, n_users=2, dim=4, seed=0)
    projected = project(small_store, params)
    np.testing.assert_array_equal(
        layer0_embeddings(swapped, params, projected), layer0_embeddings(graph, params, projected)[perm]
    )
