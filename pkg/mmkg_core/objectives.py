"""
Rotation-based KG loss, BPR loss, negative sampling and their analytic gradients.

Embeddings of dimension d are read as d/2 complex numbers (x[2k], x[2k+1]);
a relation is a vector of phases, i.e. a unit-modulus complex rotation.
Both losses are terms of one minimized objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from mmkg_core.exceptions import ValidationError
from mmkg_core.graph import MMGraph

logger = logging.getLogger(__name__)

SKIP_USER = -1


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x):
    return -softplus(-np.asarray(x, dtype=np.float64))


def _check_even(d: int) -> None:
    if d % 2:
        raise ValidationError(f"Rotations need an even dimension, got {d}")


def rotate(h: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """h * r with r_k = cos(phi_k) + i sin(phi_k), on interleaved (re, im) pairs."""
    h = np.asarray(h)
    _check_even(h.shape[-1])
    re, im = h[..., 0::2], h[..., 1::2]
    cos, sin = np.cos(phases), np.sin(phases)
    out = np.empty(h.shape, dtype=np.result_type(h, phases))
    out[..., 0::2] = re * cos - im * sin
    out[..., 1::2] = re * sin + im * cos
    return out


def rotate_scores(h: np.ndarray, phases: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Squared distance ||h * r - t||^2 along the last axis."""
    diff = rotate(h, phases) - t
    return np.sum(diff * diff, axis=-1)


def rotate_score(h: np.ndarray, phases: np.ndarray, t: np.ndarray) -> float:
    return float(rotate_scores(np.asarray(h), np.asarray(phases), np.asarray(t)))


def _score_with_grads(h, phases, t):
    """Batch scores with gradients w.r.t. head, phases and tail."""
    cos, sin = np.cos(phases), np.sin(phases)
    rotated = rotate(h, phases)
    diff = rotated - t
    score = np.sum(diff * diff, axis=-1)
    d_re, d_im = diff[..., 0::2], diff[..., 1::2]
    grad_h = np.empty_like(diff)
    grad_h[..., 0::2] = 2.0 * (d_re * cos + d_im * sin)
    grad_h[..., 1::2] = 2.0 * (d_im * cos - d_re * sin)
    grad_phase = 2.0 * (d_im * rotated[..., 0::2] - d_re * rotated[..., 1::2])
    return score, grad_h, grad_phase, -2.0 * diff


@dataclass(frozen=True, eq=False)
class TripleBatch:
    """Positive triples, each with `negatives.shape[1]` corrupted tails."""
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        negatives = np.asarray(self.negatives, dtype=np.int64)
        if negatives.ndim == 1:
            negatives = negatives[:, None]
        object.__setattr__(self, "negatives", negatives)
        if not (len(self.heads) == len(self.relations) == len(self.tails) == len(negatives)):
            raise ValidationError("Triple batch arrays must have equal length")
        if np.any(negatives == np.asarray(self.tails)[:, None]):
            raise ValidationError("A negative tail equals its positive tail")

    def __len__(self) -> int:
        return len(self.heads)


@dataclass(frozen=True, eq=False)
class KgLossResult:
    loss: float
    grad_nodes: np.ndarray = field(repr=False)
    grad_phases: np.ndarray = field(repr=False)
    positive_scores: np.ndarray = field(repr=False)
    negative_scores: np.ndarray = field(repr=False)


def kg_loss(batch: TripleBatch, node_embeddings: np.ndarray, phases: np.ndarray) -> KgLossResult:
    """sum log sigmoid(f(h,r,t) - f(h,r,t')) with exact gradients.

    Minimizing it pushes positive distances below negative ones.
    """
    _check_even(node_embeddings.shape[1])
    m = batch.negatives.shape[1]
    heads = np.repeat(np.asarray(batch.heads, dtype=np.int64), m)
    relations = np.repeat(np.asarray(batch.relations, dtype=np.int64), m)
    tails = np.repeat(np.asarray(batch.tails, dtype=np.int64), m)
    negatives = batch.negatives.reshape(-1)

    h = node_embeddings[heads]
    phi = phases[relations]
    f_pos, gh_pos, gp_pos, gt_pos = _score_with_grads(h, phi, node_embeddings[tails])
    f_neg, gh_neg, gp_neg, gt_neg = _score_with_grads(h, phi, node_embeddings[negatives])

    margin = f_pos - f_neg
    loss = float(np.sum(log_sigmoid(margin)))
    weight = expit(-margin.astype(np.float64)).astype(node_embeddings.dtype)[:, None]

    grad_nodes = np.zeros_like(node_embeddings)
    np.add.at(grad_nodes, heads, weight * (gh_pos - gh_neg))
    np.add.at(grad_nodes, tails, weight * gt_pos)
    np.add.at(grad_nodes, negatives, -weight * gt_neg)
    grad_phases = np.zeros_like(phases)
    np.add.at(grad_phases, relations, weight * (gp_pos - gp_neg))
    return KgLossResult(
        loss=loss,
        grad_nodes=grad_nodes,
        grad_phases=grad_phases,
        positive_scores=f_pos,
        negative_scores=f_neg,
    )


@dataclass(frozen=True, eq=False)
class BprLossResult:
    loss: float
    grad_users: np.ndarray = field(repr=False)
    grad_items: np.ndarray = field(repr=False)


def bpr_loss(
    users: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    user_vecs: np.ndarray,
    item_vecs: np.ndarray,
) -> BprLossResult:
    """-sum log sigmoid(y_ui - y_uj) with y_ui = h_u . h_i, plus exact gradients."""
    users = np.asarray(users, dtype=np.int64)
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    u = user_vecs[users]
    delta = item_vecs[positives] - item_vecs[negatives]
    margin = np.sum(u * delta, axis=1)
    loss = float(np.sum(softplus(-margin)))
    coeff = -expit(-margin.astype(np.float64)).astype(user_vecs.dtype)[:, None]

    grad_users = np.zeros_like(user_vecs)
    np.add.at(grad_users, users, coeff * delta)
    grad_items = np.zeros_like(item_vecs)
    np.add.at(grad_items, positives, coeff * u)
    np.add.at(grad_items, negatives, -coeff * u)
    return BprLossResult(loss=loss, grad_users=grad_users, grad_items=grad_items)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

class NegativeKind(str, Enum):
    KG = "kg"
    BPR = "bpr"


@dataclass(frozen=True, eq=False)
class BprNegativeContext:
    """Users to draw for, against their train positives (users x items CSR)."""
    users: np.ndarray
    positives: sp.csr_matrix
    codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        positives = sp.csr_matrix(self.positives)
        positives.sort_indices()
        rows = np.repeat(np.arange(positives.shape[0], dtype=np.int64), np.diff(positives.indptr))
        codes = rows * positives.shape[1] + positives.indices.astype(np.int64)
        object.__setattr__(self, "positives", positives)
        object.__setattr__(self, "codes", codes)

    def with_users(self, users: np.ndarray) -> "BprNegativeContext":
        clone = object.__new__(BprNegativeContext)
        object.__setattr__(clone, "users", np.asarray(users, dtype=np.int64))
        object.__setattr__(clone, "positives", self.positives)
        object.__setattr__(clone, "codes", self.codes)
        return clone


@dataclass(frozen=True, eq=False)
class KgNegativeContext:
    """Relations and true tails of the triples, with the graph that types them."""
    relations: np.ndarray
    tails: np.ndarray
    graph: MMGraph


def _is_positive(context: BprNegativeContext, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    if context.codes.size == 0:
        return np.zeros(users.shape, dtype=bool)
    codes = users * context.positives.shape[1] + items
    pos = np.searchsorted(context.codes, codes)
    pos = np.minimum(pos, context.codes.size - 1)
    return context.codes[pos] == codes


def sample_bpr_negatives(context: BprNegativeContext, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform items the user has no train interaction with; SKIP_USER rows for saturated users."""
    users = np.asarray(context.users, dtype=np.int64)
    n_items = context.positives.shape[1]
    row_counts = np.diff(context.positives.indptr)
    saturated = row_counts[users] >= n_items
    out = np.full((users.size, count), SKIP_USER, dtype=np.int64)
    active = np.flatnonzero(~saturated)
    if saturated.any():
        logger.warning(f"Skipping {int(saturated.sum())} draws for users who interacted with every item")
    if active.size == 0:
        return out
    rows = np.repeat(active, count)
    cols = np.tile(np.arange(count), active.size)
    owners = users[rows]
    draws = rng.integers(0, n_items, size=rows.size)
    pending = np.flatnonzero(_is_positive(context, owners, draws))
    while pending.size:
        draws[pending] = rng.integers(0, n_items, size=pending.size)
        pending = pending[_is_positive(context, owners[pending], draws[pending])]
    out[rows, cols] = draws
    return out


def sample_kg_negatives(context: KgNegativeContext, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform corrupted tails from the tail's own node block, never the true tail."""
    relations = np.asarray(context.relations, dtype=np.int64)
    tails = np.asarray(context.tails, dtype=np.int64)
    block_start, block_stop = triple_blocks(context.graph)
    starts = np.repeat(block_start[relations], count)
    sizes = np.repeat(block_stop[relations] - block_start[relations], count)
    if np.any(sizes < 2):
        raise ValidationError("A relation's tail block has no candidate besides the true tail")
    truth = np.repeat(tails, count)
    draws = starts + rng.integers(0, sizes)
    pending = np.flatnonzero(draws == truth)
    while pending.size:
        draws[pending] = starts[pending] + rng.integers(0, sizes[pending])
        pending = pending[draws[pending] == truth[pending]]
    return draws.reshape(-1, count)


def sample_negatives(
    kind: Union[NegativeKind, str],
    context: Union[BprNegativeContext, KgNegativeContext],
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Dispatch to the BPR or KG sampler; returns shape (len(context), count)."""
    if count < 1:
        raise ValidationError(f"Negative count must be at least 1, got {count}")
    kind = NegativeKind(kind)
    if kind is NegativeKind.BPR:
        if not isinstance(context, BprNegativeContext):
            raise ValidationError("BPR sampling needs a BprNegativeContext")
        return sample_bpr_negatives(context, count, rng)
    if not isinstance(context, KgNegativeContext):
        raise ValidationError("KG sampling needs a KgNegativeContext")
    return sample_kg_negatives(context, count, rng)


def triple_blocks(graph: MMGraph) -> Tuple[np.ndarray, np.ndarray]:
    """(start, stop) tail-block bounds per relation id."""
    table = np.array([graph.tail_block(r) for r in range(2 * graph.n_modalities)], dtype=np.int64)
    return table[:, 0], table[:, 1]
