import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import chisquare

from mmkg_core.exceptions import ValidationError
from mmkg_core.objectives import (
    SKIP_USER,
    BprNegativeContext,
    KgNegativeContext,
    NegativeKind,
    TripleBatch,
    bpr_loss,
    kg_loss,
    log_sigmoid,
    rotate,
    rotate_score,
    rotate_scores,
    sample_negatives,
    softplus,
)

STEP = 1e-6


def _numeric_grad(fn, x):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + STEP
        up = fn()
        x[idx] = old - STEP
        down = fn()
        x[idx] = old
        grad[idx] = (up - down) / (2 * STEP)
    return grad


# --- RotatE scoring ---

def test_zero_phase_same_vectors_score_zero(rng):
    h = rng.standard_normal(8)
    assert rotate_score(h, np.zeros(4), h) == pytest.approx(0.0)


def test_quarter_turn_maps_one_to_i():
    assert rotate_score([1.0, 0.0], [np.pi / 2], [0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)


def test_matches_complex_arithmetic(rng):
    """
    Tests the interleaved real layout against numpy complex multiplication.
    """
    h, t = rng.standard_normal(8), rng.standard_normal(8)
    phases = rng.uniform(0, 2 * np.pi, 4)
    hc = h[0::2] + 1j * h[1::2]
    tc = t[0::2] + 1j * t[1::2]
    expected = np.sum(np.abs(hc * np.exp(1j * phases) - tc) ** 2)
    assert rotate_score(h, phases, t) == pytest.approx(expected, rel=1e-6)


def test_rotation_preserves_norm(rng):
    h = rng.standard_normal((5, 6))
    rotated = rotate(h, rng.uniform(0, 2 * np.pi, (5, 3)))
    np.testing.assert_allclose(np.linalg.norm(rotated, axis=1), np.linalg.norm(h, axis=1))


def test_odd_dimension_rejected():
    with pytest.raises(ValidationError):
        rotate_scores(np.ones(3), np.zeros(1), np.ones(3))


# --- Loss values ---

def test_scalar_helpers():
    assert log_sigmoid(0.0) == pytest.approx(np.log(0.5))
    assert log_sigmoid(-10.0) == pytest.approx(-10.0000454, abs=1e-7)
    assert softplus(-20.0) == pytest.approx(2.06e-9, rel=1e-2)
    assert np.isfinite(softplus(800.0))


def _kg_setup(rng):
    nodes = rng.standard_normal((6, 4))
    phases = rng.uniform(0, 2 * np.pi, (2, 2))
    batch = TripleBatch(
        heads=np.array([0, 1, 0]),
        relations=np.array([0, 1, 1]),
        tails=np.array([2, 3, 4]),
        negatives=np.array([[4, 5], [5, 2], [1, 3]]),
    )
    return nodes, phases, batch


def test_equal_scores_give_log_half():
    nodes = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    batch = TripleBatch(heads=np.array([0]), relations=np.array([0]), tails=np.array([1]),
                        negatives=np.array([2]))
    result = kg_loss(batch, nodes, np.zeros((1, 1)))
    assert result.loss == pytest.approx(np.log(0.5))


def test_kg_margin_minus_ten():
    # f_pos = 0, f_neg = 10
    nodes = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, np.sqrt(10.0)]])
    batch = TripleBatch(heads=np.array([0]), relations=np.array([0]), tails=np.array([1]),
                        negatives=np.array([2]))
    result = kg_loss(batch, nodes, np.zeros((1, 1)))
    assert result.loss == pytest.approx(-10.0000454, abs=1e-6)


def test_bpr_equal_scores_give_log_two():
    users = np.ones((1, 2))
    items = np.array([[1.0, 0.0], [0.0, 1.0]])
    result = bpr_loss([0], [0], [1], users, items)
    assert result.loss == pytest.approx(np.log(2.0))


def test_bpr_large_margin_is_near_zero():
    users = np.array([[20.0, 0.0]])
    items = np.array([[1.0, 0.0], [0.0, 0.0]])
    result = bpr_loss([0], [0], [1], users, items)
    assert result.loss == pytest.approx(2.06e-9, rel=1e-2)


# --- Gradients ---

def test_kg_gradients_match_finite_differences(rng):
    """
    Tests node and phase gradients of the KG loss by central differences.
    """
    nodes, phases, batch = _kg_setup(rng)
    result = kg_loss(batch, nodes, phases)
    numeric_nodes = _numeric_grad(lambda: kg_loss(batch, nodes, phases).loss, nodes)
    numeric_phases = _numeric_grad(lambda: kg_loss(batch, nodes, phases).loss, phases)
    np.testing.assert_allclose(result.grad_nodes, numeric_nodes, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(result.grad_phases, numeric_phases, rtol=1e-5, atol=1e-7)


def test_bpr_gradients_match_finite_differences(rng):
    users = rng.standard_normal((2, 4))
    items = rng.standard_normal((4, 4))
    u, pos, neg = np.array([0, 1, 0]), np.array([1, 2, 3]), np.array([0, 0, 2])
    result = bpr_loss(u, pos, neg, users, items)
    numeric_users = _numeric_grad(lambda: bpr_loss(u, pos, neg, users, items).loss, users)
    numeric_items = _numeric_grad(lambda: bpr_loss(u, pos, neg, users, items).loss, items)
    np.testing.assert_allclose(result.grad_users, numeric_users, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(result.grad_items, numeric_items, rtol=1e-5, atol=1e-7)


def test_triple_batch_rejects_true_tail_as_negative():
    with pytest.raises(ValidationError):
        TripleBatch(heads=np.array([0]), relations=np.array([0]), tails=np.array([1]),
                    negatives=np.array([[2, 1]]))


# --- Negative sampling ---

def _positives(rows, n_items):
    users = np.concatenate([[u] * len(items) for u, items in enumerate(rows)])
    items = np.concatenate([items for items in rows])
    return sp.csr_matrix((np.ones(len(users)), (users, items)), shape=(len(rows), n_items))


def test_single_free_item_is_always_drawn():
    context = BprNegativeContext(users=np.zeros(50, dtype=np.int64), positives=_positives([[0, 1, 2, 4]], 5))
    draws = sample_negatives(NegativeKind.BPR, context, 3, np.random.default_rng(0))
    assert draws.shape == (50, 3)
    assert np.all(draws == 3)


def test_saturated_user_is_skipped():
    context = BprNegativeContext(users=np.array([0, 1]), positives=_positives([[0, 1, 2], [0]], 3))
    draws = sample_negatives("bpr", context, 2, np.random.default_rng(0))
    assert np.all(draws[0] == SKIP_USER)
    assert np.all(np.isin(draws[1], [1, 2]))


def test_bpr_draws_are_uniform_over_free_items():
    context = BprNegativeContext(users=np.zeros(8000, dtype=np.int64), positives=_positives([[0, 5]], 10))
    draws = sample_negatives("bpr", context, 1, np.random.default_rng(11)).ravel()
    assert not np.any(np.isin(draws, [0, 5]))
    observed = np.bincount(draws, minlength=10)[[1, 2, 3, 4, 6, 7, 8, 9]]
    assert chisquare(observed).pvalue > 1e-3


def test_kg_negatives_stay_in_the_tail_block(small_graph):
    triples = small_graph.triples
    context = KgNegativeContext(relations=triples[:, 1], tails=triples[:, 2], graph=small_graph)
    draws = sample_negatives(NegativeKind.KG, context, 4, np.random.default_rng(5))
    assert draws.shape == (len(triples), 4)
    for (head, relation, tail), row in zip(triples, draws):
        start, stop = small_graph.tail_block(int(relation))
        assert np.all((row >= start) & (row < stop))
        assert not np.any(row == tail)


def test_sampler_kind_must_match_context(small_graph):
    context = BprNegativeContext(users=np.array([0]), positives=_positives([[0]], 3))
    with pytest.raises(ValidationError):
        sample_negatives("kg", context, 1, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        sample_negatives("bpr", context, 0, np.random.default_rng(0))


def test_rotation_identities_on_random_draws():
    """
    Tests isometry, identity rotation and a tail built by rotating the head.
    """
    rng = np.random.default_rng(99)
    h = rng.standard_normal((1000, 8))
    phases = rng.uniform(0, 2 * np.pi, (1000, 4))
    np.testing.assert_allclose(rotate_scores(h, phases, np.zeros_like(h)), np.sum(h * h, axis=1), rtol=1e-6)
    np.testing.assert_allclose(rotate_scores(h, np.zeros_like(phases), h), 0.0, atol=1e-12)
    assert np.all(rotate_scores(h, phases, rotate(h, phases)) <= 1e-9)


# --- Invariances ---

def test_kg_loss_ignores_a_shared_offset_pair(rng):
    """
    Tests that a complex pair shared by every node shifts both scores of a triple by the same amount.
    """
    nodes, phases, batch = _kg_setup(rng)
    offset = np.tile([0.7, -1.3], (nodes.shape[0], 1))
    extended_nodes = np.hstack([nodes, offset])
    extended_phases = np.hstack([phases, [[0.9], [2.1]]])
    base = kg_loss(batch, nodes, phases)
    extended = kg_loss(batch, extended_nodes, extended_phases)
    assert extended.loss == pytest.approx(base.loss, abs=1e-6)
    shift = rotate_scores(extended_nodes[batch.heads], extended_phases[batch.relations], extended_nodes[batch.tails])
    plain = rotate_scores(nodes[batch.heads], phases[batch.relations], nodes[batch.tails])
    assert np.all(shift - plain > 0.1)
    np.testing.assert_allclose(extended.grad_phases[:, :-1], base.grad_phases, rtol=1e-9, atol=1e-12)


def test_kg_loss_ignores_a_global_rotation(rng):
    nodes, phases, batch = _kg_setup(rng)
    turned = rotate(nodes, np.tile(rng.uniform(0, 2 * np.pi, nodes.shape[1] // 2), (nodes.shape[0], 1)))
    assert kg_loss(batch, turned, phases).loss == pytest.approx(kg_loss(batch, nodes, phases).loss, abs=1e-9)


def test_bpr_loss_ignores_a_shared_item_coordinate(rng):
    users = rng.standard_normal((2, 4))
    items = rng.standard_normal((4, 4))
    u, pos, neg = np.array([0, 1, 0]), np.array([1, 2, 3]), np.array([0, 0, 2])
    extended_users = np.hstack([users, np.ones((2, 1))])
    extended_items = np.hstack([items, np.full((4, 1), 3.5)])
    base = bpr_loss(u, pos, neg, users, items)
    extended = bpr_loss(u, pos, neg, extended_users, extended_items)
    assert extended.loss == pytest.approx(base.loss, abs=1e-9)
    np.testing.assert_allclose(extended.grad_users[:, -1], 0.0, atol=1e-12)
    np.testing.assert_allclose(extended_users @ extended_items.T - users @ items.T, 3.5)


def test_kg_loss_ignores_a_translation_in_the_rotated_frame(rng):
    """
    Tests that shifting heads by c and every tail candidate by c rotated by the relation leaves the loss unchanged.
    """
    nodes = rng.standard_normal((7, 6))
    phases = rng.uniform(0, 2 * np.pi, (1, 3))
    batch = TripleBatch(
        heads=np.array([0, 1, 0, 1]),
        relations=np.zeros(4, dtype=np.int64),
        tails=np.array([2, 3, 4, 5]),
        negatives=np.array([[3, 6], [4, 2], [5, 6], [2, 4]]),
    )
    c = rng.standard_normal(6)
    shifted = nodes.copy()
    shifted[:2] += c
    shifted[2:] += rotate(c, phases[0])
    base = kg_loss(batch, nodes, phases)
    moved = kg_loss(batch, shifted, phases)
    assert moved.loss == pytest.approx(base.loss, abs=1e-9)
