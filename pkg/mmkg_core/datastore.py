"""
On-disk formats, catalog loading, interaction splitting and synthetic data.

Feature matrices use a small binary container (magic "EMFM", u32 version,
u64 rows, u64 cols, then little-endian float32 row-major payload). Item and
user identifiers are plain UTF-8 text, one per line. Loaded objects are
immutable and safe to share between threads.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field, field_validator

from mmkg_core.exceptions import (
    CatalogMismatchError,
    DuplicateIdError,
    EmptyDataError,
    FormatError,
    TruncationError,
    ValidationError,
)
from utility.utility import atomic_write_bytes, atomic_write_text, stream_rng

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"EMFM"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_FLOAT = np.dtype("<f4")

ITEMS_FILE = "items.txt"
MODALITIES_FILE = "modalities.txt"
INTERACTIONS_FILE = "interactions.tsv"
CLUSTERS_FILE = "item_clusters.tsv"
FEATURE_SUFFIX = ".emfm"


class SplitLabel(IntEnum):
    TRAIN = 0
    VALIDATION = 1
    TEST = 2


# ---------------------------------------------------------------------------
# Feature matrices and ID maps
# ---------------------------------------------------------------------------

def encode_feature_matrix(matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValidationError(f"Feature matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols)
    return header + np.ascontiguousarray(matrix, dtype=_FLOAT).tobytes()


def decode_feature_matrix(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse a feature-matrix container.

    Raises:
        FormatError: If the header is short or magic/version are wrong
        TruncationError: If the payload size differs from rows*cols*4 bytes
    """
    if len(payload) < _HEADER.size:
        raise FormatError(f"{source}: file shorter than the {_HEADER.size}-byte header")
    magic, version, rows, cols = _HEADER.unpack_from(payload, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    expected = rows * cols * _FLOAT.itemsize
    body = len(payload) - _HEADER.size
    if body != expected:
        raise TruncationError(
            f"{source}: header declares {rows}x{cols} ({expected} bytes) "
            f"but payload has {body} bytes"
        )
    matrix = np.frombuffer(payload, dtype=_FLOAT, offset=_HEADER.size).reshape(rows, cols)
    return matrix.astype(np.float32)


def read_feature_matrix(path: Path) -> np.ndarray:
    path = Path(path)
    logger.debug(f"Reading feature matrix {path}")
    return decode_feature_matrix(path.read_bytes(), source=str(path))


def write_features(matrix: np.ndarray, path: Path) -> None:
    atomic_write_bytes(Path(path), encode_feature_matrix(matrix))
    logger.debug(f"Wrote feature matrix {np.shape(matrix)} to {path}")


def read_id_map(path: Path) -> Tuple[str, ...]:
    """Read one identifier per line; line i names row i.

    Raises:
        FormatError: On an empty identifier line
        DuplicateIdError: If an identifier repeats
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    ids = [line.rstrip("\r") for line in lines]
    seen: Dict[str, int] = {}
    for lineno, ident in enumerate(ids, start=1):
        if not ident:
            raise FormatError(f"{path}:{lineno}: empty identifier")
        if ident in seen:
            raise DuplicateIdError(
                f"{path}:{lineno}: identifier {ident!r} already on line {seen[ident]}"
            )
        seen[ident] = lineno
    return tuple(ids)


def write_id_map(ids: Sequence[str], path: Path) -> None:
    atomic_write_text(Path(path), "".join(f"{i}\n" for i in ids))


@dataclass(frozen=True, eq=False)
class ModalityMatrix:
    """One modality's features with the identifiers of its rows."""
    item_ids: Tuple[str, ...]
    matrix: np.ndarray


def load_features(path: Path, id_map_path: Path) -> ModalityMatrix:
    """Load one modality matrix and align it to its ID map."""
    matrix = read_feature_matrix(path)
    item_ids = read_id_map(id_map_path)
    if matrix.shape[0] != len(item_ids):
        raise FormatError(
            f"{path}: {matrix.shape[0]} rows but {id_map_path} lists {len(item_ids)} ids"
        )
    logger.info(f"Loaded features {Path(path).name}: {matrix.shape[0]}x{matrix.shape[1]}")
    return ModalityMatrix(item_ids=item_ids, matrix=matrix)


# ---------------------------------------------------------------------------
# FeatureStore
# ---------------------------------------------------------------------------

def _freeze(matrix: np.ndarray) -> np.ndarray:
    matrix = np.array(matrix, dtype=np.float32, copy=True)
    matrix.flags.writeable = False
    return matrix


@dataclass(frozen=True, eq=False)
class FeatureStore:
    """Per-modality feature matrices whose rows follow the item catalog order."""

    modality_types: Tuple[str, ...]
    matrices: Mapping[str, np.ndarray]
    item_ids: Tuple[str, ...]
    item_index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        types = tuple(self.modality_types)
        if not types:
            raise ValidationError("A feature store needs at least one modality type")
        if len(set(types)) != len(types):
            raise ValidationError(f"Modality types must be unique: {types}")
        if set(types) != set(self.matrices):
            raise ValidationError(
                f"Matrices {sorted(self.matrices)} do not match modality types {types}"
            )
        ids = tuple(self.item_ids)
        index = {ident: j for j, ident in enumerate(ids)}
        if len(index) != len(ids):
            raise DuplicateIdError("Item catalog contains duplicate identifiers")
        frozen = {}
        for tau in types:
            matrix = np.asarray(self.matrices[tau])
            if matrix.ndim != 2 or matrix.shape[0] != len(ids) or matrix.shape[1] < 1:
                raise ValidationError(
                    f"Modality {tau!r} has shape {matrix.shape}, expected ({len(ids)}, d>0)"
                )
            frozen[tau] = _freeze(matrix)
        object.__setattr__(self, "modality_types", types)
        object.__setattr__(self, "item_ids", ids)
        object.__setattr__(self, "matrices", frozen)
        object.__setattr__(self, "item_index", index)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_modalities(self) -> int:
        return len(self.modality_types)

    @property
    def dims(self) -> Dict[str, int]:
        return {tau: self.matrices[tau].shape[1] for tau in self.modality_types}

    def matrix(self, modality: str) -> np.ndarray:
        if modality not in self.matrices:
            raise ValidationError(f"Unknown modality type {modality!r}")
        return self.matrices[modality]

    def zeroed(self) -> "FeatureStore":
        """Same catalog and shapes with every feature set to zero."""
        return FeatureStore(
            modality_types=self.modality_types,
            matrices={t: np.zeros_like(m) for t, m in self.matrices.items()},
            item_ids=self.item_ids,
        )

    def reordered(self, modality_types: Sequence[str]) -> "FeatureStore":
        return FeatureStore(
            modality_types=tuple(modality_types),
            matrices=dict(self.matrices),
            item_ids=self.item_ids,
        )


def load_feature_store(data_dir: Path) -> FeatureStore:
    """Load every modality of a data directory against its items.txt catalog."""
    data_dir = Path(data_dir)
    order_file = data_dir / MODALITIES_FILE
    if order_file.exists():
        types = read_id_map(order_file)
    else:
        types = tuple(sorted(p.stem for p in data_dir.glob(f"*{FEATURE_SUFFIX}")))
    if not types:
        raise EmptyDataError(f"No modality feature files found in {data_dir}")
    id_map = data_dir / ITEMS_FILE
    matrices = {}
    item_ids: Tuple[str, ...] = ()
    for tau in types:
        sliced = load_features(data_dir / f"{tau}{FEATURE_SUFFIX}", id_map)
        matrices[tau] = sliced.matrix
        item_ids = sliced.item_ids
    store = FeatureStore(modality_types=types, matrices=matrices, item_ids=item_ids)
    logger.info(f"Feature store: {store.n_items} items, modalities {list(store.dims.items())}")
    return store


# ---------------------------------------------------------------------------
# Interactions
# ---------------------------------------------------------------------------

class InteractionLoadReport(BaseModel):
    """Counters collected while reading an interaction file."""
    lines_read: int = 0
    pairs_kept: int = 0
    duplicates_dropped: int = 0
    n_users: int = 0
    with_timestamps: int = 0


@dataclass(frozen=True, eq=False)
class InteractionData:
    """User-item pairs over dense indices, optionally carrying split labels."""

    user_ids: Tuple[str, ...]
    n_items: int
    users: np.ndarray
    items: np.ndarray
    split: Optional[np.ndarray] = None
    report: Optional[InteractionLoadReport] = None

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        if users.shape != items.shape or users.ndim != 1:
            raise ValidationError("users and items must be 1-D arrays of equal length")
        if users.size and (users.min() < 0 or users.max() >= len(self.user_ids)):
            raise ValidationError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise ValidationError("item index out of range")
        codes = users * self.n_items + items
        if np.unique(codes).size != codes.size:
            raise ValidationError("duplicate (user, item) pair")
        for arr in (users, items):
            arr.flags.writeable = False
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        if self.split is not None:
            split = np.asarray(self.split, dtype=np.int8)
            if split.shape != users.shape:
                raise ValidationError("split labels must align with pairs")
            split.flags.writeable = False
            object.__setattr__(self, "split", split)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_pairs(self) -> int:
        return int(self.users.size)

    @property
    def is_split(self) -> bool:
        return self.split is not None

    def pairs(self, label: Optional[SplitLabel] = None) -> Tuple[np.ndarray, np.ndarray]:
        """(users, items) of one split, or every pair when label is None."""
        if label is None:
            return self.users, self.items
        if self.split is None:
            raise ValidationError("Interactions have not been split yet")
        mask = self.split == int(label)
        return self.users[mask], self.items[mask]

    def positives(self, label: SplitLabel = SplitLabel.TRAIN) -> sp.csr_matrix:
        """Binary users x items CSR matrix of one split."""
        users, items = self.pairs(label)
        data = np.ones(users.size, dtype=np.float32)
        matrix = sp.csr_matrix((data, (users, items)), shape=(self.n_users, self.n_items))
        matrix.sort_indices()
        return matrix

    def items_by_user(self, label: SplitLabel) -> List[np.ndarray]:
        matrix = self.positives(label)
        return [matrix.indices[matrix.indptr[u]:matrix.indptr[u + 1]].copy()
                for u in range(self.n_users)]


def load_interactions(path: Path, store: FeatureStore) -> InteractionData:
    """Read "user<TAB>item[<TAB>timestamp]" lines against the store's catalog.

    Users get dense indices in order of first appearance. Repeated pairs are
    kept once and counted in the load report.

    Raises:
        EmptyDataError: If the file holds no pairs
        FormatError: On a line with the wrong number of fields
        CatalogMismatchError: If an item is not in the catalog
    """
    path = Path(path)
    report = InteractionLoadReport()
    user_index: Dict[str, int] = {}
    seen = set()
    users: List[int] = []
    items: List[int] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            report.lines_read += 1
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise FormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            user_id, item_id = fields[0], fields[1]
            if len(fields) == 3:
                report.with_timestamps += 1
            item = store.item_index.get(item_id)
            if item is None:
                raise CatalogMismatchError(f"{path}:{lineno}: unknown item {item_id!r}")
            user = user_index.setdefault(user_id, len(user_index))
            if (user, item) in seen:
                report.duplicates_dropped += 1
                continue
            seen.add((user, item))
            users.append(user)
            items.append(item)
    if not users:
        raise EmptyDataError(f"{path}: no interactions found")
    report.pairs_kept = len(users)
    report.n_users = len(user_index)
    if report.duplicates_dropped:
        logger.warning(f"Dropped {report.duplicates_dropped} duplicate interactions from {path}")
    logger.info(f"Loaded {report.pairs_kept} interactions for {report.n_users} users from {path}")
    return InteractionData(
        user_ids=tuple(user_index),
        n_items=store.n_items,
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        report=report,
    )


def write_interactions(
    data: InteractionData, item_ids: Sequence[str], path: Path, timestamps: bool = False
) -> None:
    lines = []
    for n, (u, i) in enumerate(zip(data.users, data.items)):
        row = f"{data.user_ids[u]}\t{item_ids[i]}"
        lines.append(f"{row}\t{n}\n" if timestamps else f"{row}\n")
    atomic_write_text(Path(path), "".join(lines))


def split_interactions(data: InteractionData, seed: int) -> InteractionData:
    """Per-user seeded shuffle, then ceil(80%) train / floor(10%) val / rest test."""
    counts = np.bincount(data.users, minlength=data.n_users)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValidationError(f"User {data.user_ids[missing]!r} has no interactions")
    rng = stream_rng(seed, "split")
    labels = np.empty(data.n_pairs, dtype=np.int8)
    order = np.argsort(data.users, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for u in range(data.n_users):
        positions = order[bounds[u]:bounds[u + 1]]
        k = positions.size
        shuffled = positions[rng.permutation(k)]
        n_train = (8 * k + 9) // 10
        n_val = k // 10
        labels[shuffled[:n_train]] = SplitLabel.TRAIN
        labels[shuffled[n_train:n_train + n_val]] = SplitLabel.VALIDATION
        labels[shuffled[n_train + n_val:]] = SplitLabel.TEST
    logger.info(
        f"Split {data.n_pairs} pairs: train={int((labels == 0).sum())} "
        f"val={int((labels == 1).sum())} test={int((labels == 2).sum())}"
    )
    return InteractionData(
        user_ids=data.user_ids,
        n_items=data.n_items,
        users=data.users,
        items=data.items,
        split=labels,
        report=data.report,
    )


# ---------------------------------------------------------------------------
# Synthetic planted-cluster data
# ---------------------------------------------------------------------------

class SyntheticConfig(BaseModel):
    """Sizes and knobs of a planted-cluster dataset."""
    n_items: int = Field(default=300, gt=0)
    n_users: int = Field(default=200, gt=0)
    modality_dims: Dict[str, int] = Field(default_factory=lambda: {"image": 32, "description": 32})
    n_clusters: int = Field(default=10, gt=0)
    n_interactions: int = Field(default=4000, gt=0)
    noise: float = Field(default=0.1, ge=0.0)
    preference: float = Field(default=0.9, ge=0.0, le=1.0)
    seed: int = 42

    @field_validator("modality_dims")
    @classmethod
    def validate_dims(cls, v):
        if not v or any(d <= 0 for d in v.values()):
            raise ValueError("modality_dims needs at least one positive dimension")
        return v


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    store: FeatureStore
    interactions: InteractionData
    item_clusters: np.ndarray
    user_clusters: Tuple[Tuple[int, ...], ...]
    centroids: Mapping[str, np.ndarray]


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """Items scattered around per-modality cluster centroids, users that prefer 1-2 clusters.

    Every modality shares the same planted item labels but has its own random
    unit centroids; noise is scaled by 1/sqrt(d) so `noise` is the expected
    noise norm. Each draw of a user picks from the preferred clusters with
    probability `preference`, uniformly from the catalog otherwise.
    """
    if config.n_clusters > config.n_items:
        raise ValidationError("n_clusters cannot exceed n_items")
    rng = stream_rng(config.seed, "synth")
    n, c = config.n_items, config.n_clusters
    labels = rng.permutation(np.arange(n) % c)

    matrices: Dict[str, np.ndarray] = {}
    centroids: Dict[str, np.ndarray] = {}
    for tau, dim in config.modality_dims.items():
        centers = rng.standard_normal((c, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        noise = rng.standard_normal((n, dim)) * (config.noise / np.sqrt(dim))
        matrices[tau] = (centers[labels] + noise).astype(np.float32)
        centroids[tau] = centers.astype(np.float32)
    item_ids = tuple(f"item_{j:05d}" for j in range(n))
    store = FeatureStore(modality_types=tuple(config.modality_dims), matrices=matrices, item_ids=item_ids)

    base, extra = divmod(config.n_interactions, config.n_users)
    users: List[int] = []
    items: List[int] = []
    preferred: List[Tuple[int, ...]] = []
    for u in range(config.n_users):
        n_pref = int(rng.integers(1, 3)) if c > 1 else 1
        prefs = tuple(sorted(int(x) for x in rng.choice(c, size=n_pref, replace=False)))
        preferred.append(prefs)
        pool = np.flatnonzero(np.isin(labels, prefs))
        taken = np.zeros(n, dtype=bool)
        count = max(1, base + (1 if u < extra else 0))
        for _ in range(count):
            if rng.random() < config.preference:
                candidates = pool[~taken[pool]]
            else:
                candidates = np.flatnonzero(~taken)
            if candidates.size == 0:
                break
            item = int(candidates[rng.integers(candidates.size)])
            taken[item] = True
            users.append(u)
            items.append(item)

    interactions = InteractionData(
        user_ids=tuple(f"user_{u:05d}" for u in range(config.n_users)),
        n_items=n,
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
    )
    logger.info(
        f"Generated synthetic dataset: {n} items, {config.n_users} users, "
        f"{interactions.n_pairs} interactions, {c} clusters"
    )
    return SyntheticDataset(
        store=store,
        interactions=interactions,
        item_clusters=labels,
        user_clusters=tuple(preferred),
        centroids=centroids,
    )


def write_dataset(dataset: SyntheticDataset, data_dir: Path) -> List[Path]:
    """Write a dataset in the layout `load_feature_store` and the CLI expect."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    store = dataset.store
    written = [data_dir / ITEMS_FILE, data_dir / MODALITIES_FILE]
    write_id_map(store.item_ids, written[0])
    write_id_map(store.modality_types, written[1])
    for tau in store.modality_types:
        path = data_dir / f"{tau}{FEATURE_SUFFIX}"
        write_features(store.matrix(tau), path)
        written.append(path)
    path = data_dir / INTERACTIONS_FILE
    write_interactions(dataset.interactions, store.item_ids, path, timestamps=True)
    written.append(path)
    path = data_dir / CLUSTERS_FILE
    atomic_write_text(
        path,
        "".join(f"{ident}\t{int(label)}\n" for ident, label in zip(store.item_ids, dataset.item_clusters)),
    )
    written.append(path)
    logger.info(f"Wrote synthetic dataset to {data_dir}")
    return written


def read_item_clusters(path: Path, store: FeatureStore) -> np.ndarray:
    labels = np.full(store.n_items, -1, dtype=np.int64)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        ident, _, label = line.partition("\t")
        if ident not in store.item_index:
            raise CatalogMismatchError(f"{path}:{lineno}: unknown item {ident!r}")
        try:
            labels[store.item_index[ident]] = int(label)
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: cluster label {label!r} is not an integer") from e
    return labels
