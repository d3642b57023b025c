"""
Learnable parameters, modality projections and layer-mean propagation.

Propagation is linear and the normalized operators are symmetric, so the
map E0 -> H is self-adjoint; the trainer uses `propagate` itself to push
gradients from H back to E0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from mmkg_core.datastore import FeatureStore
from mmkg_core.exceptions import NumericalError, ValidationError
from mmkg_core.graph import MMGraph, NormalizedOperator
from utility.utility import stream_rng

logger = logging.getLogger(__name__)

ITEM_EMBEDDING = "item_embedding"
USER_EMBEDDING = "user_embedding"
RELATION_PHASE = "relation_phase"
ITEM_EMBEDDING_INTERACTION = "item_embedding_interaction"
PROJ_WEIGHT = "proj_weight"
PROJ_BIAS = "proj_bias"


@dataclass(eq=False)
class ParamSet:
    """All trainable tensors. Owned (and updated in place) by the trainer."""

    item_embedding: np.ndarray
    user_embedding: np.ndarray
    proj_weight: Dict[str, np.ndarray]
    proj_bias: Dict[str, np.ndarray]
    relation_phase: np.ndarray
    item_embedding_interaction: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.item_embedding.shape[1]
        if d % 2:
            raise ValidationError(f"Embedding dimension must be even, got {d}")
        if self.user_embedding.shape[1] != d:
            raise ValidationError("User and item embeddings must share the dimension")
        if list(self.proj_weight) != list(self.proj_bias):
            raise ValidationError("Projection weights and biases name different modalities")
        for tau, weight in self.proj_weight.items():
            if weight.ndim != 2 or weight.shape[1] != d:
                raise ValidationError(f"Projection {tau!r} has shape {weight.shape}, expected (d_tau, {d})")
            if self.proj_bias[tau].shape != (d,):
                raise ValidationError(f"Bias {tau!r} has shape {self.proj_bias[tau].shape}")
        expected = (2 * len(self.proj_weight), d // 2)
        if self.relation_phase.shape != expected:
            raise ValidationError(f"Relation phases have shape {self.relation_phase.shape}, expected {expected}")
        if self.item_embedding_interaction is not None and \
                self.item_embedding_interaction.shape != self.item_embedding.shape:
            raise ValidationError("Separate interaction item table must match the item table")

    @property
    def dim(self) -> int:
        return int(self.item_embedding.shape[1])

    @property
    def dtype(self) -> np.dtype:
        return self.item_embedding.dtype

    @property
    def modality_types(self) -> Tuple[str, ...]:
        return tuple(self.proj_weight)

    @property
    def separate_item_tables(self) -> bool:
        return self.item_embedding_interaction is not None

    @property
    def interaction_item_embedding(self) -> np.ndarray:
        """Layer-0 item rows of the interaction graph (shared with the MMKG by default)."""
        if self.item_embedding_interaction is not None:
            return self.item_embedding_interaction
        return self.item_embedding

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Live references in a fixed order; in-place edits update the ParamSet."""
        named = {ITEM_EMBEDDING: self.item_embedding, USER_EMBEDDING: self.user_embedding}
        for tau in self.proj_weight:
            named[f"{PROJ_WEIGHT}.{tau}"] = self.proj_weight[tau]
            named[f"{PROJ_BIAS}.{tau}"] = self.proj_bias[tau]
        named[RELATION_PHASE] = self.relation_phase
        if self.item_embedding_interaction is not None:
            named[ITEM_EMBEDDING_INTERACTION] = self.item_embedding_interaction
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray], modality_types: Sequence[str]) -> "ParamSet":
        try:
            return cls(
                item_embedding=named[ITEM_EMBEDDING],
                user_embedding=named[USER_EMBEDDING],
                proj_weight={t: named[f"{PROJ_WEIGHT}.{t}"] for t in modality_types},
                proj_bias={t: named[f"{PROJ_BIAS}.{t}"] for t in modality_types},
                relation_phase=named[RELATION_PHASE],
                item_embedding_interaction=named.get(ITEM_EMBEDDING_INTERACTION),
            )
        except KeyError as e:
            raise ValidationError(f"Missing parameter tensor {e}") from e

    def astype(self, dtype) -> "ParamSet":
        named = {k: np.array(v, dtype=dtype, copy=True) for k, v in self.named_tensors().items()}
        return ParamSet.from_named(named, self.modality_types)

    def copy(self) -> "ParamSet":
        return self.astype(self.dtype)

    def check_finite(self) -> None:
        for name, tensor in self.named_tensors().items():
            if not np.all(np.isfinite(tensor)):
                raise NumericalError(f"Parameter group {name!r} contains NaN or Inf")


def _glorot(rng: np.random.Generator, shape: Tuple[int, int], dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(
    store: FeatureStore,
    n_users: int,
    dim: int,
    seed: int,
    separate_item_tables: bool = False,
    dtype=np.float32,
) -> ParamSet:
    """Glorot-uniform tables and projections, zero biases, phases uniform in [0, 2pi)."""
    if dim <= 0 or dim % 2:
        raise ValidationError(f"Embedding dimension must be a positive even integer, got {dim}")
    rng = stream_rng(seed, "init")
    item = _glorot(rng, (store.n_items, dim), dtype)
    user = _glorot(rng, (n_users, dim), dtype)
    weights = {tau: _glorot(rng, (d_tau, dim), dtype) for tau, d_tau in store.dims.items()}
    biases = {tau: np.zeros(dim, dtype=dtype) for tau in store.modality_types}
    separate = _glorot(rng, (store.n_items, dim), dtype) if separate_item_tables else None
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(2 * store.n_modalities, dim // 2)).astype(dtype)
    logger.info(
        f"Initialized parameters: d={dim}, items={store.n_items}, users={n_users}, "
        f"modalities={list(store.modality_types)}"
    )
    return ParamSet(
        item_embedding=item,
        user_embedding=user,
        proj_weight=weights,
        proj_bias=biases,
        relation_phase=phases,
        item_embedding_interaction=separate,
    )


def project(store: FeatureStore, params: ParamSet) -> Dict[str, np.ndarray]:
    """Affine map of every modality into the shared space: Z = M W + b."""
    projected = {}
    for tau in store.modality_types:
        if tau not in params.proj_weight:
            raise ValidationError(f"No projection for modality {tau!r}")
        features = store.matrix(tau)
        weight = params.proj_weight[tau]
        if features.shape[1] != weight.shape[0]:
            raise ValidationError(
                f"Modality {tau!r} has dimension {features.shape[1]}, projection expects {weight.shape[0]}"
            )
        projected[tau] = features.astype(weight.dtype) @ weight + params.proj_bias[tau]
    return projected


def stack_embeddings(
    params: ParamSet, projected: Mapping[str, np.ndarray], modality_types: Sequence[str]
) -> np.ndarray:
    """[E^i; Z^tau_1; ...; Z^tau_T], modality blocks in catalog order."""
    n, d = params.item_embedding.shape
    blocks = [params.item_embedding]
    for tau in modality_types:
        block = projected[tau]
        if block.shape != (n, d):
            raise ValidationError(f"Block {tau!r} has shape {block.shape}, expected {(n, d)}")
        blocks.append(block)
    return np.vstack(blocks)


def layer0_embeddings(graph: MMGraph, params: ParamSet, projected: Mapping[str, np.ndarray]) -> np.ndarray:
    """Layer-0 rows for every node of `graph`, following its node layout."""
    if not graph.has_modality_nodes:
        return params.item_embedding.copy()
    stacked = stack_embeddings(params, projected, graph.modality_types)
    if graph.n_users:
        stacked = np.vstack([stacked, params.user_embedding])
    return stacked


@dataclass(frozen=True, eq=False)
class PropagationResult:
    embeddings: np.ndarray
    layers: Tuple[np.ndarray, ...] = field(default=(), repr=False)


def propagate(
    operator: NormalizedOperator, initial: np.ndarray, n_layers: int, keep_layers: bool = False
) -> PropagationResult:
    """H = (1/(L+1)) * sum_{l=0..L} A^l E0 by repeated sparse products."""
    if n_layers < 0:
        raise ValidationError(f"Layer count must be non-negative, got {n_layers}")
    if operator.size != initial.shape[0]:
        raise ValidationError(
            f"Operator has {operator.size} nodes but the embedding matrix has {initial.shape[0]} rows"
        )
    matrix = operator.matrix
    if matrix.dtype != initial.dtype:
        matrix = matrix.astype(initial.dtype)
    current = initial
    total = initial.copy()
    layers = [initial] if keep_layers else []
    for _ in range(n_layers):
        current = matrix @ current
        total += current
        if keep_layers:
            layers.append(current)
    total /= n_layers + 1
    return PropagationResult(embeddings=total, layers=tuple(layers))
