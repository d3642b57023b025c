"""
Offline evaluation: ranking metrics over ranked outputs and the cluster
cohesion analysis of an embedding space.

Relevance is binary everywhere. Ranked lists and relevant sets may hold any
hashable identifiers (dense indices or external IDs) as long as both sides
use the same kind.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Collection, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from rich.table import Table
from sklearn.cluster import kmeans_plusplus

from mmkg_core.exceptions import ValidationError
from mmkg_core.ranking import cosine_normalize
from utility.utility import stream_rng

logger = logging.getLogger(__name__)

METRICS = ("recall", "ndcg", "map")
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6


def _check(relevant: Collection[Hashable], k: int) -> None:
    if k < 1:
        raise ValidationError(f"Cutoff K must be at least 1, got {k}")
    if len(relevant) == 0:
        raise ValidationError("Relevant set is empty")


def _hits(ranked: Sequence[Hashable], relevant: Collection[Hashable], k: int) -> np.ndarray:
    relevant = set(relevant)
    return np.array([item in relevant for item in list(ranked)[:k]], dtype=bool)


def recall_at_k(ranked: Sequence[Hashable], relevant: Collection[Hashable], k: int) -> float:
    """|top-K ∩ relevant| / |relevant|."""
    _check(relevant, k)
    return float(_hits(ranked, relevant, k).sum()) / len(set(relevant))


def ndcg_at_k(ranked: Sequence[Hashable], relevant: Collection[Hashable], k: int) -> float:
    """DCG@K with gain 1/log2(rank+1), divided by the ideal DCG@K."""
    _check(relevant, k)
    hits = _hits(ranked, relevant, k)
    discounts = 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))
    dcg = float(discounts[: hits.size][hits].sum())
    idcg = float(discounts[: min(len(set(relevant)), k)].sum())
    return dcg / idcg


def map_at_k(ranked: Sequence[Hashable], relevant: Collection[Hashable], k: int) -> float:
    """Average precision truncated at K, normalized by min(|relevant|, K)."""
    _check(relevant, k)
    hits = _hits(ranked, relevant, k)
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, ranks.size + 1) / ranks
    return float(precision.sum()) / min(len(set(relevant)), k)


_METRIC_FUNCS = {"recall": recall_at_k, "ndcg": ndcg_at_k, "map": map_at_k}


class CutoffMetrics(BaseModel):
    k: int
    recall: float
    ndcg: float
    map: float


class EntityMetrics(BaseModel):
    entity: str
    values: Dict[str, float]


class MetricReport(BaseModel):
    """Per-cutoff means plus the per-user (or per-query) values behind them."""
    name: str = "ranking"
    cutoffs: Tuple[int, ...]
    evaluated: int = 0
    skipped: int = 0
    means: List[CutoffMetrics] = Field(default_factory=list)
    per_entity: List[EntityMetrics] = Field(default_factory=list)

    def mean(self, metric: str, k: int) -> float:
        for row in self.means:
            if row.k == k:
                return float(getattr(row, metric))
        raise KeyError(f"No cutoff {k} in report")


def evaluate_rankings(
    rankings: Mapping[Hashable, Sequence[Hashable]],
    relevant: Mapping[Hashable, Collection[Hashable]],
    cutoffs: Sequence[int],
    name: str = "ranking",
) -> MetricReport:
    """Recall, NDCG and MAP at every cutoff for each entity with a relevant set.

    Entities whose relevant set is empty are skipped and counted; an entity
    with no ranked list scores 0.
    """
    cutoffs = tuple(sorted(set(int(k) for k in cutoffs)))
    if not cutoffs or cutoffs[0] < 1:
        raise ValidationError(f"Cutoffs must be positive integers, got {cutoffs}")
    per_entity: List[EntityMetrics] = []
    skipped = 0
    for entity, rel in relevant.items():
        if len(rel) == 0:
            skipped += 1
            continue
        ranked = rankings.get(entity, ())
        values = {
            f"{metric}@{k}": func(ranked, rel, k)
            for k in cutoffs
            for metric, func in _METRIC_FUNCS.items()
        }
        per_entity.append(EntityMetrics(entity=str(entity), values=values))
    if skipped:
        logger.warning(f"Skipped {skipped} entities with an empty relevant set")

    means = []
    for k in cutoffs:
        row = {}
        for metric in METRICS:
            column = [e.values[f"{metric}@{k}"] for e in per_entity]
            row[metric] = float(np.mean(column)) if column else 0.0
        means.append(CutoffMetrics(k=k, **row))
    logger.info(f"Evaluated {len(per_entity)} entities for {name!r} ({skipped} skipped)")
    return MetricReport(
        name=name,
        cutoffs=cutoffs,
        evaluated=len(per_entity),
        skipped=skipped,
        means=means,
        per_entity=per_entity,
    )


def render_report(report: MetricReport, title: Optional[str] = None) -> Table:
    table = Table(title=title or f"{report.name} ({report.evaluated} evaluated, {report.skipped} skipped)")
    table.add_column("K", justify="right")
    for metric in METRICS:
        table.add_column(metric.upper() if metric == "map" else metric.capitalize(), justify="right")
    for row in report.means:
        table.add_row(str(row.k), f"{row.recall:.4f}", f"{row.ndcg:.4f}", f"{row.map:.4f}")
    return table


# ---------------------------------------------------------------------------
# Clustering and cohesion
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans(embeddings: np.ndarray, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves by KMEANS_TOL or more. An empty cluster is
    re-seeded with the point farthest from its current centroid.

    Raises:
        ValidationError: If k < 1 or k exceeds the number of rows
    """
    points = np.asarray(embeddings, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"K must lie in [1, {n}], got {k}")
    rng = stream_rng(seed, "kmeans")
    centroids, _ = kmeans_plusplus(points, n_clusters=k, random_state=int(rng.integers(2**31 - 1)))
    centroids = np.array(centroids, dtype=np.float64)

    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_distances(points, centroids)
        labels = np.argmin(d2, axis=1)
        closest = d2[np.arange(n), labels]
        counts = np.bincount(labels, minlength=k)
        updated = np.zeros_like(centroids)
        np.add.at(updated, labels, points)
        filled = counts > 0
        updated[filled] /= counts[filled, None]
        for c in np.flatnonzero(~filled):
            far = int(np.argmax(closest))
            updated[c] = points[far]
            closest[far] = -1.0
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < KMEANS_TOL:
            break

    d2 = _sq_distances(points, centroids)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    inertia = float(d2[np.arange(n), labels].sum())
    logger.info(f"K-means with K={k} finished after {iterations} iterations, inertia {inertia:.6g}")
    return KMeansResult(assignments=labels, centroids=centroids, inertia=inertia, iterations=iterations)


class SourceCohesion(BaseModel):
    source: str
    intra: Optional[float] = None
    inter: Optional[float] = None
    gap: Optional[float] = None


class CohesionReport(BaseModel):
    """Intra/inter-cluster mean cosine per embedding source, for one clustering."""
    n_clusters: int
    cluster_sizes: List[int]
    assignments: List[int] = Field(repr=False)
    sources: List[SourceCohesion]

    def source(self, name: str) -> SourceCohesion:
        for entry in self.sources:
            if entry.source == name:
                return entry
        raise KeyError(name)


def _pair_means(unit: np.ndarray, labels: np.ndarray, n_clusters: int) -> Tuple[Optional[float], Optional[float]]:
    """Exact mean cosine over same-cluster and cross-cluster unordered pairs."""
    sums = np.zeros((n_clusters, unit.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, unit)
    sizes = np.bincount(labels, minlength=n_clusters).astype(np.float64)
    self_dots = np.bincount(labels, weights=np.sum(unit * unit, axis=1), minlength=n_clusters)
    cluster_sq = np.sum(sums * sums, axis=1)
    total = sums.sum(axis=0)

    intra_pairs = float(np.sum(sizes * (sizes - 1.0)) / 2.0)
    inter_pairs = float((sizes.sum() ** 2 - np.sum(sizes * sizes)) / 2.0)
    intra = None
    inter = None
    if intra_pairs > 0:
        intra = float(np.sum(cluster_sq - self_dots) / 2.0 / intra_pairs)
        intra = float(np.clip(intra, -1.0, 1.0))
    if inter_pairs > 0:
        inter = float((total @ total - cluster_sq.sum()) / 2.0 / inter_pairs)
        inter = float(np.clip(inter, -1.0, 1.0))
    return intra, inter


def cohesion(embeddings_by_source: Mapping[str, np.ndarray], assignments: np.ndarray) -> CohesionReport:
    """Intra-inter cosine gap of one clustering, measured in each embedding space.

    A clustering of singletons has no intra pairs and a single cluster has no
    inter pairs; the undefined mean and the gap are reported as None.
    """
    labels = np.asarray(assignments, dtype=np.int64)
    if labels.ndim != 1 or (labels.size and labels.min() < 0):
        raise ValidationError("Assignments must be a 1-D array of non-negative cluster ids")
    n_clusters = int(labels.max()) + 1 if labels.size else 0
    sources = []
    for name, matrix in embeddings_by_source.items():
        matrix = np.asarray(matrix)
        if matrix.shape[0] != labels.size:
            raise ValidationError(
                f"Source {name!r} has {matrix.shape[0]} rows but {labels.size} assignments"
            )
        intra, inter = _pair_means(cosine_normalize(matrix), labels, n_clusters)
        gap = intra - inter if intra is not None and inter is not None else None
        if intra is None:
            logger.warning(f"Source {name!r}: every cluster is a singleton, intra-cluster cosine undefined")
        sources.append(SourceCohesion(source=name, intra=intra, inter=inter, gap=gap))
    return CohesionReport(
        n_clusters=n_clusters,
        cluster_sizes=np.bincount(labels, minlength=n_clusters).tolist(),
        assignments=labels.tolist(),
        sources=sources,
    )


def render_cohesion(report: CohesionReport) -> Table:
    table = Table(title=f"Cluster cohesion (K={report.n_clusters})")
    table.add_column("source")
    for column in ("intra", "inter", "gap"):
        table.add_column(column, justify="right")

    def fmt(value: Optional[float]) -> str:
        return "missing" if value is None else f"{value:.4f}"

    for entry in report.sources:
        table.add_row(entry.source, fmt(entry.intra), fmt(entry.inter), fmt(entry.gap))
    return table
