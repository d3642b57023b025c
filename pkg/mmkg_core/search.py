"""
Product search with precomputed query vectors.

A query vector comes from one modality's encoder, so it is mapped into the
shared space with that modality's projection and ranked against the item
rows of the multimodal graph output by cosine similarity.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from pydantic import ValidationError as PydanticValidationError

from mmkg_core.datastore import FeatureStore, SyntheticDataset
from mmkg_core.exceptions import CatalogMismatchError, FormatError, ValidationError
from mmkg_core.model import ParamSet
from mmkg_core.ranking import cosine_normalize
from mmkg_core.recommender import EmbeddingSnapshot, RankedList, rank_scores
from utility.utility import atomic_write_text, stream_rng

logger = logging.getLogger(__name__)

QUERIES_FILE = "queries.jsonl"


class Query(BaseModel):
    query_id: str
    modality: str
    vector: List[float]
    relevant_items: List[str] = Field(default_factory=list)
    kind: Optional[Literal["fine", "coarse"]] = None


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Queries checked against a catalog: known modality, matching dimension, known items."""
    queries: Sequence[Query]
    store: FeatureStore

    def __post_init__(self):
        seen = set()
        for query in self.queries:
            if query.query_id in seen:
                raise ValidationError(f"Duplicate query id {query.query_id!r}")
            seen.add(query.query_id)
            if query.modality not in self.store.dims:
                raise ValidationError(f"Query {query.query_id!r}: unknown modality {query.modality!r}")
            expected = self.store.dims[query.modality]
            if len(query.vector) != expected:
                raise ValidationError(
                    f"Query {query.query_id!r}: vector has {len(query.vector)} values, "
                    f"{query.modality!r} features have {expected}"
                )
            unknown = [i for i in query.relevant_items if i not in self.store.item_index]
            if unknown:
                raise CatalogMismatchError(f"Query {query.query_id!r}: unknown items {unknown[:3]}")
        object.__setattr__(self, "queries", tuple(self.queries))

    def __len__(self) -> int:
        return len(self.queries)

    def relevant(self, kind: Optional[str] = None) -> Dict[str, List[int]]:
        """Relevant item indices per query id, optionally for one query kind."""
        return {
            q.query_id: [self.store.item_index[i] for i in q.relevant_items]
            for q in self.queries
            if kind is None or q.kind == kind
        }

    @property
    def kinds(self) -> List[str]:
        return sorted({q.kind for q in self.queries if q.kind})


def load_queries(path: Path, store: FeatureStore) -> QuerySet:
    """Read one JSON query object per line.

    Raises:
        FormatError: On malformed JSON or a line missing required fields
        ValidationError: On an unknown modality or a dimension mismatch
        CatalogMismatchError: If a relevant item is not in the catalog
    """
    path = Path(path)
    queries = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                queries.append(Query.model_validate(json.loads(line)))
            except (json.JSONDecodeError, PydanticValidationError) as e:
                raise FormatError(f"{path}:{lineno}: invalid query ({e})") from e
    logger.info(f"Loaded {len(queries)} queries from {path}")
    return QuerySet(queries=queries, store=store)


def write_queries(queries: QuerySet, path: Path) -> None:
    lines = [json.dumps(q.model_dump(exclude_none=True), sort_keys=True) + "\n" for q in queries.queries]
    atomic_write_text(Path(path), "".join(lines))
    logger.info(f"Wrote {len(queries)} queries to {path}")


def encode_query(query: Query, params: ParamSet) -> np.ndarray:
    """h_q = q W^tau + b^tau, the map applied to the items' modality instances."""
    if query.modality not in params.proj_weight:
        raise ValidationError(f"No projection for modality {query.modality!r}")
    weight = params.proj_weight[query.modality]
    vector = np.asarray(query.vector, dtype=np.float64)
    if vector.shape != (weight.shape[0],):
        raise ValidationError(
            f"Query {query.query_id!r} has dimension {vector.size}, projection expects {weight.shape[0]}"
        )
    return vector @ weight.astype(np.float64) + params.proj_bias[query.modality].astype(np.float64)


def _clamp_n_out(n_out: int, n: int) -> int:
    if n_out < 1:
        raise ValidationError(f"N_out must be at least 1, got {n_out}")
    if n_out > n:
        logger.warning(f"N_out={n_out} exceeds the catalog of {n} items; clamped")
        return n
    return n_out


def _cosine_rank(entity: int, query: np.ndarray, items: np.ndarray, n_out: int) -> RankedList:
    n_out = _clamp_n_out(n_out, items.shape[0])
    scores = cosine_normalize(items) @ cosine_normalize(query[None, :])[0]
    return rank_scores(entity, scores, n_out)


def search_topn(h_q: np.ndarray, item_vectors: np.ndarray, n_out: int, entity: int = 0) -> RankedList:
    """Exact cosine top-N over the item rows; zero-norm rows score 0."""
    return _cosine_rank(entity, np.asarray(h_q, dtype=np.float64), np.asarray(item_vectors), n_out)


def search_baseline(query: Query, store: FeatureStore, n_out: int, entity: int = 0) -> RankedList:
    """Best single-modality match: max cosine over raw modalities of the query's dimension."""
    n_out = _clamp_n_out(n_out, store.n_items)
    vector = np.asarray(query.vector, dtype=np.float64)
    matching = [tau for tau, d in store.dims.items() if d == vector.size]
    if not matching:
        raise ValidationError(f"Query {query.query_id!r}: no modality has dimension {vector.size}")
    unit = cosine_normalize(vector[None, :])[0]
    scores = np.max(np.stack([cosine_normalize(store.matrix(tau)) @ unit for tau in matching]), axis=0)
    return rank_scores(entity, scores, n_out)


def search_all(
    queries: QuerySet,
    params: ParamSet,
    snapshot: EmbeddingSnapshot,
    n_out: int,
    baseline: bool = False,
    threads: int = 1,
) -> Dict[str, RankedList]:
    """Rank every query; `baseline` uses raw-feature matching instead of the learned space.

    Queries are independent; with `threads` > 1 they run on a worker pool and
    results keep the query file order.
    """
    items = snapshot.item_multimodal

    def answer(k: int) -> RankedList:
        query = queries.queries[k]
        if baseline:
            return search_baseline(query, queries.store, n_out, entity=k)
        return search_topn(encode_query(query, params), items, n_out, entity=k)

    order = range(len(queries.queries))
    if threads > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranked = list(pool.map(answer, order))
    else:
        ranked = [answer(k) for k in order]
    results = {query.query_id: r for query, r in zip(queries.queries, ranked)}
    logger.info(f"Answered {len(results)} queries ({'baseline' if baseline else 'unified space'})")
    return results


def write_results(results: Dict[str, RankedList], item_ids: Sequence[str], path: Path) -> None:
    """TSV lines "query_id<TAB>rank<TAB>item_id<TAB>similarity"."""
    lines = []
    for query_id, ranked in results.items():
        for rank, (item, score) in enumerate(zip(ranked.items, ranked.scores), start=1):
            lines.append(f"{query_id}\t{rank}\t{item_ids[item]}\t{float(score):.8g}\n")
    atomic_write_text(Path(path), "".join(lines))
    logger.info(f"Wrote results for {len(results)} queries to {path}")


def generate_synthetic_queries(
    dataset: SyntheticDataset,
    n_fine: int = 100,
    n_coarse: int = 20,
    noise: float = 0.05,
    seed: int = 42,
) -> QuerySet:
    """Fine queries target one item's modality vector; coarse ones a planted cluster.

    A fine query is a noisy copy of item j's raw vector in one modality with
    {j} relevant. A coarse query is a noisy cluster centroid with the whole
    cluster relevant. Noise is scaled by 1/sqrt(d).
    """
    store = dataset.store
    rng = stream_rng(seed, "queries")
    queries: List[Query] = []
    for q in range(n_fine):
        tau = store.modality_types[int(rng.integers(store.n_modalities))]
        item = int(rng.integers(store.n_items))
        base = store.matrix(tau)[item].astype(np.float64)
        vector = base + rng.standard_normal(base.size) * (noise / np.sqrt(base.size))
        queries.append(Query(
            query_id=f"fine_{q:05d}",
            modality=tau,
            vector=vector.tolist(),
            relevant_items=[store.item_ids[item]],
            kind="fine",
        ))
    labels = np.asarray(dataset.item_clusters)
    n_clusters = int(labels.max()) + 1
    for q in range(n_coarse):
        tau = store.modality_types[int(rng.integers(store.n_modalities))]
        cluster = int(rng.integers(n_clusters))
        base = np.asarray(dataset.centroids[tau][cluster], dtype=np.float64)
        vector = base + rng.standard_normal(base.size) * (noise / np.sqrt(base.size))
        queries.append(Query(
            query_id=f"coarse_{q:05d}",
            modality=tau,
            vector=vector.tolist(),
            relevant_items=[store.item_ids[j] for j in np.flatnonzero(labels == cluster)],
            kind="coarse",
        ))
    logger.info(f"Generated {n_fine} fine and {n_coarse} coarse queries")
    return QuerySet(queries=queries, store=store)
