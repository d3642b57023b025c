"""
Multimodal knowledge-graph assembly.

Node layout for N items and T modality types: item j is node j, the
modality-k instance of item j is node (k+1)*N + j, and (interaction variant
only) user u is node (1+T)*N + u. Relation 2k is "<type>_of" (modality
instance -> item) and relation 2k+1 is "similar_<type>" (modality instance ->
neighboring instance of the same type).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel

from mmkg_core.datastore import FeatureStore, InteractionData, SplitLabel
from mmkg_core.exceptions import ContractViolationError, FormatError, ValidationError
from mmkg_core.knn import NeighborList
from utility.utility import atomic_write_text

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    """Graph structures compared in the ablation harness."""
    ORIGINAL = "original"
    INTERACTION = "interaction"
    INTER_MODAL = "inter_modal"
    ITEM_ITEM = "item_item"


@dataclass(frozen=True, eq=False)
class NormalizedOperator:
    """D^-1/2 A D^-1/2 with zero rows/columns for zero-degree nodes."""
    matrix: sp.csr_matrix
    degrees: np.ndarray

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def astype(self, dtype) -> "NormalizedOperator":
        return NormalizedOperator(matrix=self.matrix.astype(dtype), degrees=self.degrees)


def normalize(adjacency: sp.spmatrix) -> NormalizedOperator:
    """Symmetric normalization of a symmetric, zero-diagonal adjacency.

    Raises:
        ContractViolationError: If the input is not square, not symmetric, or
            has a non-zero diagonal
    """
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    if adjacency.shape[0] != adjacency.shape[1]:
        raise ContractViolationError(f"Adjacency must be square, got {adjacency.shape}")
    asymmetry = adjacency - adjacency.T
    if asymmetry.nnz and np.abs(asymmetry.data).max() > 0.0:
        raise ContractViolationError("Adjacency is not symmetric")
    if np.any(adjacency.diagonal() != 0.0):
        raise ContractViolationError("Adjacency has a non-zero diagonal")
    degrees = np.asarray(adjacency.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(degrees > 0.0, 1.0 / np.sqrt(degrees), 0.0)
    scale = sp.diags(inv_sqrt)
    matrix = sp.csr_matrix(scale @ adjacency @ scale)
    matrix.eliminate_zeros()
    matrix.sort_indices()
    return NormalizedOperator(matrix=matrix, degrees=degrees)


def _undirected(pairs: np.ndarray) -> np.ndarray:
    """Unique (a, b) with a < b from directed pairs; self pairs dropped."""
    if pairs.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    return np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)


def _symmetric_csr(edges: np.ndarray, n_nodes: int) -> sp.csr_matrix:
    """Binary symmetric adjacency from undirected edges (each listed once)."""
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.ones(rows.size, dtype=np.float64)
    matrix = sp.csr_matrix((data, (rows, cols)), shape=(n_nodes, n_nodes))
    matrix.sum_duplicates()
    matrix.data[:] = 1.0
    matrix.sort_indices()
    return matrix


def _digest_neighbors(neighbors: Mapping[str, NeighborList]) -> str:
    hasher = hashlib.sha256()
    for tau, nl in neighbors.items():
        hasher.update(tau.encode("utf-8"))
        hasher.update(np.ascontiguousarray(nl.indices, dtype="<i8").tobytes())
    return hasher.hexdigest()


class GraphFingerprint(BaseModel):
    """Human-readable summary plus a content hash that pins a graph."""
    variant: str
    n_items: int
    n_users: int
    n_nodes: int
    n_modality_nodes: int
    modality_types: Tuple[str, ...]
    knn_n: int
    edge_counts: Dict[str, int]
    relation_counts: Dict[str, int]
    content_hash: str

    @property
    def digest(self) -> bytes:
        return bytes.fromhex(self.content_hash)

    def render(self) -> str:
        lines = [
            f"variant: {self.variant}",
            f"n_items: {self.n_items}",
            f"n_users: {self.n_users}",
            f"n_nodes: {self.n_nodes}",
            f"n_modality_nodes: {self.n_modality_nodes}",
            f"modality_types: {','.join(self.modality_types)}",
            f"knn_n: {self.knn_n}",
        ]
        lines += [f"edges.{k}: {v}" for k, v in sorted(self.edge_counts.items())]
        lines += [f"relation.{k}: {v}" for k, v in sorted(self.relation_counts.items())]
        lines.append(f"content_hash: {self.content_hash}")
        return "\n".join(lines) + "\n"


def write_fingerprint(fingerprint: GraphFingerprint, path: Path) -> None:
    atomic_write_text(Path(path), fingerprint.render())
    logger.info(f"Wrote graph fingerprint to {path}")


def read_fingerprint(path: Path) -> GraphFingerprint:
    values: Dict[str, str] = {}
    edges: Dict[str, int] = {}
    relations: Dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(": ")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'key: value'")
        if key.startswith("edges."):
            edges[key[len("edges."):]] = int(value)
        elif key.startswith("relation."):
            relations[key[len("relation."):]] = int(value)
        else:
            values[key] = value
    try:
        return GraphFingerprint(
            variant=values["variant"],
            n_items=int(values["n_items"]),
            n_users=int(values["n_users"]),
            n_nodes=int(values["n_nodes"]),
            n_modality_nodes=int(values["n_modality_nodes"]),
            modality_types=tuple(t for t in values["modality_types"].split(",") if t),
            knn_n=int(values["knn_n"]),
            edge_counts=edges,
            relation_counts=relations,
            content_hash=values["content_hash"],
        )
    except KeyError as e:
        raise FormatError(f"{path}: missing fingerprint field {e}") from e


@dataclass(frozen=True, eq=False)
class MMGraph:
    """Node layout, binary adjacency and KG triples of one graph variant."""

    variant: Variant
    n_items: int
    modality_types: Tuple[str, ...]
    adjacency: sp.csr_matrix
    triples: np.ndarray
    edge_counts: Mapping[str, int]
    knn_n: int
    neighbor_digest: str
    n_users: int = 0
    components: Tuple[sp.csr_matrix, ...] = field(default=(), repr=False)

    @property
    def n_modalities(self) -> int:
        return len(self.modality_types)

    @property
    def has_modality_nodes(self) -> bool:
        return self.variant is not Variant.ITEM_ITEM

    @property
    def n_nodes(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def user_offset(self) -> int:
        return (1 + self.n_modalities) * self.n_items

    @property
    def relation_names(self) -> Tuple[str, ...]:
        names = []
        for tau in self.modality_types:
            names += [f"{tau}_of", f"similar_{tau}"]
        return tuple(names)

    def modality_offset(self, k: int) -> int:
        return (k + 1) * self.n_items

    def tail_block(self, relation: int) -> Tuple[int, int]:
        """Node range that holds the tails (and negative tails) of a relation."""
        if not 0 <= relation < 2 * self.n_modalities:
            raise ValidationError(f"Unknown relation id {relation}")
        if relation % 2 == 0 or not self.has_modality_nodes:
            return 0, self.n_items
        start = self.modality_offset(relation // 2)
        return start, start + self.n_items

    @cached_property
    def operator(self) -> NormalizedOperator:
        if self.components:
            # late aggregation: unweighted mean of per-modality normalized graphs
            parts = [normalize(c) for c in self.components]
            matrix = sum((p.matrix for p in parts[1:]), parts[0].matrix) / len(parts)
            matrix = sp.csr_matrix(matrix)
            matrix.sort_indices()
            degrees = np.asarray(self.adjacency.sum(axis=1)).ravel()
            return NormalizedOperator(matrix=matrix, degrees=degrees)
        return normalize(self.adjacency)

    @cached_property
    def fingerprint(self) -> GraphFingerprint:
        header = (
            f"{self.variant.value}|{self.n_items}|{self.n_users}|"
            f"{','.join(self.modality_types)}|{self.knn_n}"
        )
        hasher = hashlib.sha256(header.encode("utf-8"))
        hasher.update(np.ascontiguousarray(self.adjacency.indptr, dtype="<i8").tobytes())
        hasher.update(np.ascontiguousarray(self.adjacency.indices, dtype="<i8").tobytes())
        for component in self.components:
            hasher.update(np.ascontiguousarray(component.indices, dtype="<i8").tobytes())
        hasher.update(np.ascontiguousarray(self.triples, dtype="<i8").tobytes())
        hasher.update(self.neighbor_digest.encode("ascii"))
        names = self.relation_names
        counts = np.bincount(self.triples[:, 1], minlength=len(names))
        return GraphFingerprint(
            variant=self.variant.value,
            n_items=self.n_items,
            n_users=self.n_users,
            n_nodes=self.n_nodes,
            n_modality_nodes=self.n_items * self.n_modalities if self.has_modality_nodes else 0,
            modality_types=self.modality_types,
            knn_n=self.knn_n,
            edge_counts=dict(self.edge_counts),
            relation_counts={name: int(c) for name, c in zip(names, counts)},
            content_hash=hasher.hexdigest(),
        )


def _check_neighbors(store: FeatureStore, neighbors: Mapping[str, NeighborList]) -> int:
    if set(neighbors) != set(store.modality_types):
        raise ValidationError(
            f"Neighbor lists for {sorted(neighbors)} do not match modalities {store.modality_types}"
        )
    for tau in store.modality_types:
        if neighbors[tau].n_rows != store.n_items:
            raise ValidationError(f"Neighbor list for {tau!r} has {neighbors[tau].n_rows} rows")
    return neighbors[store.modality_types[0]].requested_n


def _base_edges(store: FeatureStore, neighbors: Mapping[str, NeighborList]):
    n = store.n_items
    items = np.arange(n, dtype=np.int64)
    edges = []
    triples = []
    counts: Dict[str, int] = {"item_modal": 0, "modal_modal": 0}
    for k, tau in enumerate(store.modality_types):
        offset = (k + 1) * n
        edges.append(np.stack([items, offset + items], axis=1))
        triples.append(np.stack([offset + items, np.full(n, 2 * k), items], axis=1))
        counts["item_modal"] += n

        directed = neighbors[tau].directed_pairs()
        undirected = _undirected(directed)
        edges.append(undirected + offset)
        triples.append(np.stack(
            [offset + directed[:, 0], np.full(len(directed), 2 * k + 1), offset + directed[:, 1]], axis=1
        ))
        counts["modal_modal"] += len(undirected)
        counts[f"similar_{tau}"] = len(undirected)
    return edges, np.concatenate(triples).astype(np.int64), counts


def assemble_mmkg(store: FeatureStore, neighbors: Mapping[str, NeighborList]) -> MMGraph:
    """Item nodes, modality-instance nodes, item-modal and union-symmetrized modal-modal edges."""
    knn_n = _check_neighbors(store, neighbors)
    n_nodes = (1 + store.n_modalities) * store.n_items
    edges, triples, counts = _base_edges(store, neighbors)
    adjacency = _symmetric_csr(np.concatenate(edges), n_nodes)
    graph = MMGraph(
        variant=Variant.ORIGINAL,
        n_items=store.n_items,
        modality_types=store.modality_types,
        adjacency=adjacency,
        triples=triples,
        edge_counts=counts,
        knn_n=knn_n,
        neighbor_digest=_digest_neighbors(neighbors),
    )
    logger.info(
        f"Assembled MMKG: {n_nodes} nodes, {counts['item_modal']} item-modal edges, "
        f"{counts['modal_modal']} modal-modal edges, {len(triples)} triples"
    )
    return graph


def assemble_variant(
    store: FeatureStore,
    neighbors: Mapping[str, NeighborList],
    interactions: Optional[InteractionData],
    variant: Variant | str,
) -> MMGraph:
    """Build one of the structural variants compared against the original graph.

    Raises:
        ValidationError: On an unknown variant tag, or missing/unsplit
            interactions for the interaction variant
    """
    try:
        variant = Variant(variant)
    except ValueError as e:
        raise ValidationError(f"Unknown graph variant {variant!r}") from e

    if variant is Variant.ORIGINAL:
        return assemble_mmkg(store, neighbors)

    knn_n = _check_neighbors(store, neighbors)
    n, t = store.n_items, store.n_modalities
    digest = _digest_neighbors(neighbors)

    if variant is Variant.ITEM_ITEM:
        components = []
        triples = []
        counts: Dict[str, int] = {}
        for k, tau in enumerate(store.modality_types):
            directed = neighbors[tau].directed_pairs()
            undirected = _undirected(directed)
            components.append(_symmetric_csr(undirected, n))
            triples.append(np.stack([directed[:, 0], np.full(len(directed), 2 * k + 1), directed[:, 1]], axis=1))
            counts[f"similar_{tau}"] = len(undirected)
        union = sum(components[1:], components[0])
        union = _symmetric_csr(_undirected(np.stack(union.nonzero(), axis=1)), n)
        counts["item_item"] = union.nnz // 2
        logger.info(f"Assembled item-item variant: {n} nodes, {counts['item_item']} edges")
        return MMGraph(
            variant=variant,
            n_items=n,
            modality_types=store.modality_types,
            adjacency=union,
            triples=np.concatenate(triples).astype(np.int64),
            edge_counts=counts,
            knn_n=knn_n,
            neighbor_digest=digest,
            components=tuple(components),
        )

    edges, triples, counts = _base_edges(store, neighbors)
    n_nodes = (1 + t) * n
    n_users = 0
    if variant is Variant.INTER_MODAL:
        items = np.arange(n, dtype=np.int64)
        extra = 0
        for k1 in range(t):
            for k2 in range(k1 + 1, t):
                edges.append(np.stack([(k1 + 1) * n + items, (k2 + 1) * n + items], axis=1))
                extra += n
        counts["inter_modal"] = extra
    elif variant is Variant.INTERACTION:
        if interactions is None or not interactions.is_split:
            raise ValidationError("The interaction variant needs split interactions")
        if interactions.n_items != n:
            raise ValidationError("Interactions and feature store disagree on the catalog size")
        users, items = interactions.pairs(SplitLabel.TRAIN)
        n_users = interactions.n_users
        edges.append(np.stack([n_nodes + users, items], axis=1))
        counts["interaction"] = int(users.size)
        n_nodes += n_users

    adjacency = _symmetric_csr(np.concatenate(edges), n_nodes)
    logger.info(f"Assembled {variant.value} variant: {n_nodes} nodes, {adjacency.nnz // 2} edges")
    return MMGraph(
        variant=variant,
        n_items=n,
        modality_types=store.modality_types,
        adjacency=adjacency,
        triples=triples,
        edge_counts=counts,
        knn_n=knn_n,
        neighbor_digest=digest,
        n_users=n_users,
    )


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Bipartite user-item graph over train pairs; users first, then items."""
    n_users: int
    n_items: int
    adjacency: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @cached_property
    def operator(self) -> NormalizedOperator:
        return normalize(self.adjacency)


def assemble_interaction_graph(data: InteractionData) -> InteractionGraph:
    if not data.is_split:
        raise ValidationError("The interaction graph is built from split interactions")
    users, items = data.pairs(SplitLabel.TRAIN)
    edges = np.stack([users, data.n_users + items], axis=1)
    adjacency = _symmetric_csr(edges, data.n_users + data.n_items)
    logger.info(f"Interaction graph: {data.n_users} users, {data.n_items} items, {users.size} edges")
    return InteractionGraph(n_users=data.n_users, n_items=data.n_items, adjacency=adjacency)
