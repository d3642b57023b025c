"""
Exact top-n cosine neighbors over the rows of a feature matrix.

Similarities come from blocked products of row-normalized matrices; each
block of query rows is independent, so blocks may run on worker threads
and still produce the single-threaded result bit for bit.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from mmkg_core.exceptions import FormatError, ValidationError
from mmkg_core.ranking import cosine_normalize, top_k

logger = logging.getLogger(__name__)

BLOCK_ROWS = 512


@dataclass(frozen=True, eq=False)
class NeighborList:
    """Row j's n neighbors (self excluded), best first, with their cosines."""

    indices: np.ndarray
    similarities: np.ndarray
    requested_n: int
    clamped: bool = False

    @property
    def n(self) -> int:
        return int(self.indices.shape[1])

    @property
    def n_rows(self) -> int:
        return int(self.indices.shape[0])

    def directed_pairs(self) -> np.ndarray:
        """(row, neighbor) pairs of every pick, shape (N*n, 2)."""
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), self.n)
        return np.stack([rows, self.indices.reshape(-1)], axis=1)


def _rank_block(normalized: np.ndarray, start: int, stop: int, n: int,
                indices: np.ndarray, similarities: np.ndarray) -> None:
    sims = normalized[start:stop] @ normalized.T
    for offset, row in enumerate(range(start, stop)):
        scores = sims[offset]
        scores[row] = -np.inf
        picked = top_k(scores, n)
        indices[row] = picked
        similarities[row] = scores[picked]


def topn_cosine(matrix: np.ndarray, n: int, threads: int = 1) -> NeighborList:
    """Exact top-n cosine neighbors of every row.

    Ties go to the smaller row index and zero-norm rows have similarity 0
    against everything. An n that leaves fewer than n candidates is clamped
    to N-1 with a warning.

    Raises:
        ValidationError: If n < 1 or the matrix has fewer than two rows
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValidationError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    n_rows = matrix.shape[0]
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    if n_rows < 2:
        raise ValidationError("Neighbor search needs at least two rows")
    effective = n
    clamped = False
    if n >= n_rows:
        effective = n_rows - 1
        clamped = True
        logger.warning(f"Requested n={n} with only {n_rows} rows; clamped to {effective}")

    normalized = cosine_normalize(matrix)
    indices = np.empty((n_rows, effective), dtype=np.int64)
    similarities = np.empty((n_rows, effective), dtype=np.float64)
    blocks = [(s, min(s + BLOCK_ROWS, n_rows)) for s in range(0, n_rows, BLOCK_ROWS)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_rank_block, normalized, s, e, effective, indices, similarities)
                       for s, e in blocks]
            for future in futures:
                future.result()
    else:
        for s, e in blocks:
            _rank_block(normalized, s, e, effective, indices, similarities)
    logger.debug(f"Computed top-{effective} cosine neighbors for {n_rows} rows")
    return NeighborList(indices=indices, similarities=similarities, requested_n=n, clamped=clamped)


def save_neighbors(neighbors: Mapping[str, NeighborList], path: Path) -> None:
    """Store per-modality neighbor lists in one .npz archive (modality order kept)."""
    arrays: Dict[str, np.ndarray] = {"modalities": np.array(list(neighbors), dtype=np.str_)}
    for k, (tau, nl) in enumerate(neighbors.items()):
        arrays[f"indices_{k}"] = nl.indices
        arrays[f"similarities_{k}"] = nl.similarities
        arrays[f"meta_{k}"] = np.array([nl.requested_n, int(nl.clamped)], dtype=np.int64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    logger.info(f"Saved neighbor lists for {list(neighbors)} to {path}")


def load_neighbors(path: Path) -> Dict[str, NeighborList]:
    try:
        with np.load(Path(path), allow_pickle=False) as archive:
            modalities = [str(t) for t in archive["modalities"]]
            result = {}
            for k, tau in enumerate(modalities):
                requested, clamped = (int(x) for x in archive[f"meta_{k}"])
                result[tau] = NeighborList(
                    indices=archive[f"indices_{k}"].astype(np.int64),
                    similarities=archive[f"similarities_{k}"],
                    requested_n=requested,
                    clamped=bool(clamped),
                )
    except KeyError as e:
        raise FormatError(f"{path}: incomplete neighbor archive ({e})") from e
    return result
