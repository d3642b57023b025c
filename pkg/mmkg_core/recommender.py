"""
Top-K recommendation from the unified item space.

User and item representations come from propagating over the user-item
graph; item representations are then fused with the item block of the
multimodal graph output. Scores are plain dot products.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from mmkg_core.datastore import FeatureStore
from mmkg_core.exceptions import ValidationError
from mmkg_core.graph import InteractionGraph, MMGraph
from mmkg_core.model import ParamSet, layer0_embeddings, project, propagate
from mmkg_core.ranking import cosine_normalize, top_k
from utility.utility import atomic_write_text

logger = logging.getLogger(__name__)


def fuse_items(item_interaction: np.ndarray, item_multimodal: np.ndarray) -> np.ndarray:
    """H_item = H_item^IN + H_item^MM."""
    if item_interaction.shape != item_multimodal.shape:
        raise ValidationError(
            f"Cannot fuse item blocks of shapes {item_interaction.shape} and {item_multimodal.shape}"
        )
    return item_interaction + item_multimodal


@dataclass(frozen=True, eq=False)
class EmbeddingSnapshot:
    """Propagated representations of one parameter state (read-only)."""
    user: np.ndarray = field(repr=False)
    item_interaction: np.ndarray = field(repr=False)
    item_multimodal: np.ndarray = field(repr=False)
    multimodal: np.ndarray = field(repr=False)

    @property
    def n_users(self) -> int:
        return int(self.user.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.item_interaction.shape[0])

    @property
    def unified(self) -> np.ndarray:
        return fuse_items(self.item_interaction, self.item_multimodal)

    def items(self, fused: bool = True) -> np.ndarray:
        return self.unified if fused else self.item_interaction


def compute_embeddings(
    params: ParamSet,
    store: FeatureStore,
    graph: MMGraph,
    igraph: InteractionGraph,
    layers: int,
) -> EmbeddingSnapshot:
    """Run both propagations for the current parameters."""
    if igraph.n_items != graph.n_items or igraph.n_users != params.user_embedding.shape[0]:
        raise ValidationError("Interaction graph does not match the parameter tables")
    projected = project(store, params) if graph.has_modality_nodes else {}
    multimodal = propagate(graph.operator, layer0_embeddings(graph, params, projected), layers).embeddings
    initial = np.vstack([params.user_embedding, params.interaction_item_embedding])
    interaction = propagate(igraph.operator, initial, layers).embeddings
    for arr in (multimodal, interaction):
        arr.flags.writeable = False
    return EmbeddingSnapshot(
        user=interaction[: igraph.n_users],
        item_interaction=interaction[igraph.n_users:],
        item_multimodal=multimodal[: graph.n_items],
        multimodal=multimodal,
    )


@dataclass(frozen=True, eq=False)
class RankedList:
    """Top-K items of one user (or query), best first."""
    entity: int
    items: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return int(self.items.size)


def _masked_scores(user: int, item_vectors: np.ndarray, user_vectors: np.ndarray,
                   train_positives: Optional[sp.csr_matrix]) -> np.ndarray:
    if not 0 <= user < user_vectors.shape[0]:
        raise ValidationError(f"User index {user} out of range")
    scores = item_vectors.astype(np.float64) @ user_vectors[user].astype(np.float64)
    if train_positives is not None:
        seen = train_positives.indices[train_positives.indptr[user]:train_positives.indptr[user + 1]]
        scores[seen] = -np.inf
    return scores


def rank_scores(entity: int, scores: np.ndarray, k: int) -> RankedList:
    """Top-k of a score vector where -inf marks excluded items."""
    if k < 1:
        raise ValidationError(f"K must be at least 1, got {k}")
    available = int(np.count_nonzero(scores != -np.inf))
    if k > available:
        logger.warning(f"K={k} exceeds the {available} unmasked items for entity {entity}; returning all")
    picked = top_k(scores, k)
    return RankedList(entity=entity, items=picked, scores=scores[picked])


def recommend(
    user: int,
    k: int,
    snapshot: EmbeddingSnapshot,
    train_positives: Optional[sp.csr_matrix] = None,
    fused: bool = True,
) -> RankedList:
    """Score every item by h_u . h_i, mask the user's train items, keep the top K."""
    scores = _masked_scores(user, snapshot.items(fused), snapshot.user, train_positives)
    return rank_scores(user, scores, k)


def recommend_baseline(
    user: int, k: int, snapshot: EmbeddingSnapshot, train_positives: Optional[sp.csr_matrix] = None
) -> RankedList:
    """Interaction-graph representations only, without multimodal fusion."""
    return recommend(user, k, snapshot, train_positives, fused=False)


def recommend_all(
    users: Sequence[int],
    k: int,
    snapshot: EmbeddingSnapshot,
    train_positives: Optional[sp.csr_matrix] = None,
    fused: bool = True,
    threads: int = 1,
) -> List[RankedList]:
    """One ranked list per user, in the order given; `threads` > 1 ranks users on a worker pool."""
    items = snapshot.items(fused).astype(np.float64)
    user_vectors = snapshot.user.astype(np.float64)

    def rank(u) -> RankedList:
        return rank_scores(int(u), _masked_scores(int(u), items, user_vectors, train_positives), k)

    if threads > 1 and len(users) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(rank, users))
    return [rank(u) for u in users]


def write_rankings(
    lists: Sequence[RankedList], user_ids: Sequence[str], item_ids: Sequence[str], path: Path
) -> None:
    """TSV lines "user_id<TAB>rank<TAB>item_id<TAB>score", ranks from 1."""
    lines = []
    for ranked in lists:
        for rank, (item, score) in enumerate(zip(ranked.items, ranked.scores), start=1):
            lines.append(f"{user_ids[ranked.entity]}\t{rank}\t{item_ids[item]}\t{float(score):.8g}\n")
    atomic_write_text(Path(path), "".join(lines))
    logger.info(f"Wrote {len(lists)} ranked lists to {path}")


def similar_items(item: int, k: int, item_vectors: np.ndarray) -> RankedList:
    """Cosine top-K neighbors of one item in the unified space, itself excluded."""
    if not 0 <= item < item_vectors.shape[0]:
        raise ValidationError(f"Item index {item} out of range")
    normalized = cosine_normalize(item_vectors)
    scores = normalized @ normalized[item]
    scores[item] = -np.inf
    return rank_scores(item, scores, k)
