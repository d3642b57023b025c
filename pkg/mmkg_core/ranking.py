"""Exact top-k selection shared by neighbor search, recommendation and search."""

import numpy as np


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest finite-or-not scores, best first.

    Ties are broken by the smaller index. Entries equal to -inf are never
    returned, so callers mask excluded candidates by setting them to -inf;
    the result may then be shorter than k.
    """
    scores = np.asarray(scores)
    eligible = np.flatnonzero(scores != -np.inf)
    if k <= 0 or eligible.size == 0:
        return np.empty(0, dtype=np.int64)
    values = scores[eligible]
    if k < eligible.size:
        # everything tied with the k-th value must stay a candidate
        kth = np.partition(values, values.size - k)[values.size - k]
        keep = values >= kth
        eligible, values = eligible[keep], values[keep]
    order = np.lexsort((eligible, -values))
    return eligible[order[:k]].astype(np.int64)


def cosine_normalize(matrix: np.ndarray) -> np.ndarray:
    """Row-normalize in float64; zero rows stay zero so their cosine is 0."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where(norms > 0.0, matrix / safe, 0.0)
