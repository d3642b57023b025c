"""
Joint training of the multimodal graph encoder and the recommender.

One step projects the modality features, propagates over the multimodal
graph and the user-item graph, fuses the item blocks and evaluates

    L = L_BPR + lambda_kg * L_KG + weight_decay * ||theta||^2.

Gradients are exact. Both propagations are linear with a symmetric
operator, so the gradient w.r.t. layer 0 is `propagate` applied to the
gradient w.r.t. the output; from there it splits into the stacked blocks
and flows through the affine projections.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field, field_validator

from mmkg_core.datastore import FeatureStore, InteractionData, SplitLabel
from mmkg_core.evaluator import ndcg_at_k, recall_at_k
from mmkg_core.exceptions import (
    ArtifactMismatchError,
    FormatError,
    NumericalError,
    TruncationError,
    ValidationError,
)
from mmkg_core.graph import InteractionGraph, MMGraph, NormalizedOperator, Variant, assemble_interaction_graph
from mmkg_core.model import (
    ITEM_EMBEDDING,
    ITEM_EMBEDDING_INTERACTION,
    PROJ_BIAS,
    PROJ_WEIGHT,
    RELATION_PHASE,
    USER_EMBEDDING,
    ParamSet,
    init_params,
    layer0_embeddings,
    project,
    propagate,
)
from mmkg_core.objectives import (
    SKIP_USER,
    BprNegativeContext,
    KgNegativeContext,
    NegativeKind,
    TripleBatch,
    bpr_loss,
    kg_loss,
    sample_negatives,
)
from mmkg_core.optim import Adam
from mmkg_core.recommender import compute_embeddings, recommend_all
from utility.utility import atomic_write_bytes, stream_rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EMKG"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_FLOAT = np.dtype("<f4")
FINGERPRINT_BYTES = 32

GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOL = 1e-3
GRAD_CHECK_MAX = 1e-2
GRAD_CHECK_FRACTION = 0.99


class TrainConfig(BaseModel):
    """Every knob of a training run; snapshotted into the checkpoint."""
    dim: int = Field(default=64, gt=0)
    layers: int = Field(default=2, ge=0)
    knn: int = Field(default=10, ge=1)
    lambda_kg: float = Field(default=1.0, ge=0.0)
    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    bpr_batch_size: int = Field(default=2048, gt=0)
    kg_batch_size: int = Field(default=2048, gt=0)
    epochs: int = Field(default=200, gt=0)
    patience: int = Field(default=10, gt=0)
    seed: int = 42
    variant: Variant = Variant.ORIGINAL
    grad_check: bool = False
    negatives: int = Field(default=1, ge=1)
    separate_item_tables: bool = False
    fusion: bool = True
    zero_modalities: bool = False
    eval_k: int = Field(default=20, gt=0)

    @field_validator("dim")
    @classmethod
    def validate_dim(cls, v):
        if v % 2:
            raise ValueError("dim must be even")
        return v

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.grad_check else np.float32)

    @classmethod
    def baseline(cls, **overrides) -> "TrainConfig":
        """Interaction-graph-only training: no fusion, no KG term."""
        return cls(**{**overrides, "fusion": False, "lambda_kg": 0.0})


@dataclass(frozen=True, eq=False)
class TrainingContext:
    """Inputs that stay fixed for a whole run, with operators cast to the run dtype."""
    store: FeatureStore
    graph: MMGraph
    igraph: InteractionGraph
    interactions: InteractionData
    config: TrainConfig
    mm_operator: NormalizedOperator = field(repr=False)
    in_operator: NormalizedOperator = field(repr=False)
    train_positives: sp.csr_matrix = field(repr=False)
    bpr_context: BprNegativeContext = field(repr=False)

    @classmethod
    def build(
        cls,
        store: FeatureStore,
        graph: MMGraph,
        interactions: InteractionData,
        config: TrainConfig,
        igraph: Optional[InteractionGraph] = None,
    ) -> "TrainingContext":
        if not interactions.is_split:
            raise ValidationError("Training needs split interactions")
        if interactions.n_items != store.n_items or graph.n_items != store.n_items:
            raise ValidationError("Feature store, graph and interactions disagree on the catalog size")
        if graph.modality_types != store.modality_types:
            raise ValidationError(
                f"Graph modalities {graph.modality_types} differ from store modalities {store.modality_types}"
            )
        if graph.n_users and graph.n_users != interactions.n_users:
            raise ValidationError("Interaction-variant graph was built for a different user set")
        train_users, _ = interactions.pairs(SplitLabel.TRAIN)
        if train_users.size == 0:
            raise ValidationError("The train split is empty")
        if config.zero_modalities:
            store = store.zeroed()
        igraph = igraph or assemble_interaction_graph(interactions)
        positives = interactions.positives(SplitLabel.TRAIN)
        return cls(
            store=store,
            graph=graph,
            igraph=igraph,
            interactions=interactions,
            config=config,
            mm_operator=graph.operator.astype(config.dtype),
            in_operator=igraph.operator.astype(config.dtype),
            train_positives=positives,
            bpr_context=BprNegativeContext(users=np.empty(0, dtype=np.int64), positives=positives),
        )


@dataclass(frozen=True, eq=False)
class TrainBatch:
    """BPR triples (user, positive, negative) and an optional KG triple batch."""
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    triples: Optional[TripleBatch] = None


@dataclass(frozen=True, eq=False)
class StepResult:
    loss_total: float
    loss_bpr: float
    loss_kg: float
    loss_reg: float
    grads: Dict[str, np.ndarray] = field(repr=False)


def forward_backward(params: ParamSet, batch: TrainBatch, context: TrainingContext) -> StepResult:
    """Total loss of one batch and its gradient for every named tensor.

    Raises:
        NumericalError: If any gradient group contains NaN or Inf
    """
    config = context.config
    store, graph = context.store, context.graph
    n_items, n_users, layers = graph.n_items, context.igraph.n_users, config.layers

    # forward
    projected = project(store, params) if graph.has_modality_nodes else {}
    h_mm = propagate(context.mm_operator, layer0_embeddings(graph, params, projected), layers).embeddings
    e_in = np.vstack([params.user_embedding, params.interaction_item_embedding])
    h_in = propagate(context.in_operator, e_in, layers).embeddings
    h_user, h_item = h_in[:n_users], h_in[n_users:]
    if config.fusion:
        h_item = h_item + h_mm[:n_items]

    keep = batch.negatives != SKIP_USER
    bpr = bpr_loss(batch.users[keep], batch.positives[keep], batch.negatives[keep], h_user, h_item)

    grad_h_mm = np.zeros_like(h_mm)
    grad_phase = np.zeros_like(params.relation_phase)
    loss_kg = 0.0
    if config.lambda_kg > 0.0 and batch.triples is not None and len(batch.triples):
        kg = kg_loss(batch.triples, h_mm, params.relation_phase)
        loss_kg = kg.loss
        grad_h_mm += config.lambda_kg * kg.grad_nodes
        grad_phase += config.lambda_kg * kg.grad_phases
    if config.fusion:
        grad_h_mm[:n_items] += bpr.grad_items

    # backward through both propagations
    grad_e_in = propagate(context.in_operator, np.vstack([bpr.grad_users, bpr.grad_items]), layers).embeddings
    grad_e_mm = propagate(context.mm_operator, grad_h_mm, layers).embeddings

    grads: Dict[str, np.ndarray] = {
        ITEM_EMBEDDING: grad_e_mm[:n_items].copy(),
        USER_EMBEDDING: grad_e_in[:n_users].copy(),
    }
    for k, tau in enumerate(params.modality_types):
        if graph.has_modality_nodes:
            offset = graph.modality_offset(k)
            grad_z = grad_e_mm[offset:offset + n_items]
            features = store.matrix(tau).astype(params.dtype)
            grads[f"{PROJ_WEIGHT}.{tau}"] = features.T @ grad_z
            grads[f"{PROJ_BIAS}.{tau}"] = grad_z.sum(axis=0)
        else:
            grads[f"{PROJ_WEIGHT}.{tau}"] = np.zeros_like(params.proj_weight[tau])
            grads[f"{PROJ_BIAS}.{tau}"] = np.zeros_like(params.proj_bias[tau])
    grads[RELATION_PHASE] = grad_phase
    if graph.n_users:
        grads[USER_EMBEDDING] += grad_e_mm[graph.user_offset:graph.user_offset + n_users]
    if params.separate_item_tables:
        grads[ITEM_EMBEDDING_INTERACTION] = grad_e_in[n_users:].copy()
    else:
        grads[ITEM_EMBEDDING] += grad_e_in[n_users:]

    loss_reg = 0.0
    if config.weight_decay > 0.0:
        for name, tensor in params.named_tensors().items():
            loss_reg += config.weight_decay * float(np.sum(np.square(tensor, dtype=np.float64)))
            grads[name] += (2.0 * config.weight_decay) * tensor

    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"Gradient of parameter group {name!r} contains NaN or Inf")
    loss_total = bpr.loss + config.lambda_kg * loss_kg + loss_reg
    return StepResult(
        loss_total=loss_total,
        loss_bpr=bpr.loss,
        loss_kg=loss_kg,
        loss_reg=loss_reg,
        grads=grads,
    )


def sample_batch(
    context: TrainingContext,
    users: np.ndarray,
    positives: np.ndarray,
    rng: np.random.Generator,
    kg_batch_size: Optional[int] = None,
) -> TrainBatch:
    """Draw BPR negatives for the given pairs and, if the KG term is on, a KG batch."""
    negatives = sample_negatives(NegativeKind.BPR, context.bpr_context.with_users(users), 1, rng)[:, 0]
    triples = None
    config = context.config
    all_triples = context.graph.triples
    if config.lambda_kg > 0.0 and len(all_triples):
        size = kg_batch_size or config.kg_batch_size
        picked = all_triples[rng.integers(0, len(all_triples), size=size)]
        kg_context = KgNegativeContext(relations=picked[:, 1], tails=picked[:, 2], graph=context.graph)
        triples = TripleBatch(
            heads=picked[:, 0],
            relations=picked[:, 1],
            tails=picked[:, 2],
            negatives=sample_negatives(NegativeKind.KG, kg_context, config.negatives, rng),
        )
    return TrainBatch(users=users, positives=positives, negatives=negatives, triples=triples)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class EpochRecord(BaseModel):
    epoch: int
    steps: int
    loss_total: float
    loss_bpr: float
    loss_kg: float
    loss_reg: float
    val_recall: Optional[float] = None
    val_ndcg: Optional[float] = None


class TrainingReport(BaseModel):
    config: TrainConfig
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_metric: Optional[float] = None
    stopped_early: bool = False

    @property
    def losses(self) -> List[float]:
        return [record.loss_total for record in self.epochs]


def validate(
    params: ParamSet, context: TrainingContext, k: int, threads: int = 1
) -> Tuple[Optional[float], Optional[float]]:
    """Mean Recall@k and NDCG@k over users with validation items, train items masked."""
    snapshot = compute_embeddings(
        params, context.store, context.graph, context.igraph, context.config.layers
    )
    relevant = context.interactions.items_by_user(SplitLabel.VALIDATION)
    users = [u for u, items in enumerate(relevant) if items.size]
    if not users:
        return None, None
    lists = recommend_all(users, k, snapshot, context.train_positives, fused=context.config.fusion, threads=threads)
    recalls = [recall_at_k(r.items.tolist(), relevant[r.entity].tolist(), k) for r in lists]
    ndcgs = [ndcg_at_k(r.items.tolist(), relevant[r.entity].tolist(), k) for r in lists]
    return float(np.mean(recalls)), float(np.mean(ndcgs))


def train(
    store: FeatureStore,
    graph: MMGraph,
    interactions: InteractionData,
    config: TrainConfig,
    metrics_stream: Optional[IO[str]] = None,
    igraph: Optional[InteractionGraph] = None,
    threads: int = 1,
) -> Tuple[ParamSet, TrainingReport]:
    """Adam over shuffled BPR batches with early stopping on validation Recall@eval_k.

    Returns the parameters of the best validation epoch (the last epoch when
    no user has validation items). Each epoch is written to `metrics_stream`
    as one JSON object with sorted keys. `threads` only parallelizes the
    validation ranking, so results do not depend on it.
    """
    context = TrainingContext.build(store, graph, interactions, config, igraph)
    params = init_params(
        context.store,
        interactions.n_users,
        config.dim,
        config.seed,
        separate_item_tables=config.separate_item_tables,
        dtype=config.dtype,
    )
    optimizer = Adam(lr=config.lr)
    rng = stream_rng(config.seed, "sampling")
    train_users, train_items = interactions.pairs(SplitLabel.TRAIN)
    n_train = train_users.size
    steps = math.ceil(n_train / config.bpr_batch_size)
    report = TrainingReport(config=config)
    best = params.copy()
    stale = 0
    logger.info(
        f"Training {config.variant.value} for up to {config.epochs} epochs: {n_train} train pairs, "
        f"{steps} steps/epoch, lambda_kg={config.lambda_kg}, fusion={config.fusion}"
    )

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        totals = np.zeros(4, dtype=np.float64)
        for step in range(steps):
            idx = order[step * config.bpr_batch_size:(step + 1) * config.bpr_batch_size]
            batch = sample_batch(context, train_users[idx], train_items[idx], rng)
            result = forward_backward(params, batch, context)
            optimizer.step(params.named_tensors(), result.grads)
            totals += (result.loss_total, result.loss_bpr, result.loss_kg, result.loss_reg)
        params.check_finite()
        totals /= steps

        val_recall, val_ndcg = validate(params, context, config.eval_k, threads)
        record = EpochRecord(
            epoch=epoch,
            steps=steps,
            loss_total=float(totals[0]),
            loss_bpr=float(totals[1]),
            loss_kg=float(totals[2]),
            loss_reg=float(totals[3]),
            val_recall=val_recall,
            val_ndcg=val_ndcg,
        )
        report.epochs.append(record)
        if metrics_stream is not None:
            metrics_stream.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
            metrics_stream.flush()
        logger.debug(f"Epoch {epoch}: loss={record.loss_total:.6f} val_recall@{config.eval_k}={val_recall}")

        if val_recall is None:
            best = params.copy()
            report.best_epoch = epoch
            continue
        if report.best_metric is None or val_recall > report.best_metric:
            report.best_metric = val_recall
            report.best_epoch = epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stopped_early = True
                logger.info(f"Early stop at epoch {epoch}; best epoch {report.best_epoch}")
                break

    logger.info(f"Training finished: best epoch {report.best_epoch}, best Recall@{config.eval_k}={report.best_metric}")
    return best, report


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

class GroupCheck(BaseModel):
    name: str
    checked: int
    within_tolerance: float
    max_relative_error: float
    passed: bool


class GradientCheckReport(BaseModel):
    groups: List[GroupCheck]
    checked: int
    within_tolerance: float
    max_relative_error: float
    passed: bool


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


def gradient_check(
    store: FeatureStore,
    graph: MMGraph,
    interactions: InteractionData,
    config: TrainConfig,
    coords_per_group: Optional[int] = None,
    batch_size: int = 64,
) -> GradientCheckReport:
    """Compare analytic gradients with central differences in 64-bit.

    One fixed batch (pairs, negatives and KG triples) defines the loss, so
    every evaluation sees the same function of the parameters. Every
    coordinate is checked unless `coords_per_group` caps it to a seeded
    sample. The run passes when at least 99% of all checked coordinates are
    within 1e-3 relative error and none exceeds 1e-2.
    """
    config = config.model_copy(update={"grad_check": True})
    context = TrainingContext.build(store, graph, interactions, config)
    params = init_params(
        context.store,
        interactions.n_users,
        config.dim,
        config.seed,
        separate_item_tables=config.separate_item_tables,
        dtype=np.float64,
    )
    rng = stream_rng(config.seed, "gradcheck")
    users, items = interactions.pairs(SplitLabel.TRAIN)
    chosen = np.sort(rng.choice(users.size, size=min(batch_size, users.size), replace=False))
    batch = sample_batch(context, users[chosen], items[chosen], rng, kg_batch_size=batch_size)
    analytic = forward_backward(params, batch, context).grads

    groups = []
    all_errors = []
    for name, tensor in params.named_tensors().items():
        flat = tensor.reshape(-1)
        if coords_per_group is None or coords_per_group >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=coords_per_group, replace=False))
        errors = []
        for c in coords:
            original = flat[c]
            flat[c] = original + GRAD_CHECK_STEP
            plus = forward_backward(params, batch, context).loss_total
            flat[c] = original - GRAD_CHECK_STEP
            minus = forward_backward(params, batch, context).loss_total
            flat[c] = original
            numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP)
            errors.append(_relative_error(float(analytic[name].reshape(-1)[c]), numeric))
        errors = np.array(errors)
        all_errors.append(errors)
        within = float(np.mean(errors <= GRAD_CHECK_TOL))
        worst = float(errors.max())
        passed = within >= GRAD_CHECK_FRACTION and worst <= GRAD_CHECK_MAX
        if not passed:
            logger.warning(f"Gradient check failed for {name!r}: max relative error {worst:.3g}")
        groups.append(GroupCheck(
            name=name, checked=int(coords.size), within_tolerance=within, max_relative_error=worst, passed=passed
        ))
    errors = np.concatenate(all_errors)
    within = float(np.mean(errors <= GRAD_CHECK_TOL))
    worst = float(errors.max())
    report = GradientCheckReport(
        groups=groups,
        checked=int(errors.size),
        within_tolerance=within,
        max_relative_error=worst,
        passed=within >= GRAD_CHECK_FRACTION and worst <= GRAD_CHECK_MAX,
    )
    logger.info(
        f"Gradient check {'passed' if report.passed else 'failed'}: {report.checked} coordinates, "
        f"{within:.2%} within {GRAD_CHECK_TOL}, max relative error {worst:.3g}"
    )
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Checkpoint:
    config: TrainConfig
    fingerprint: bytes
    params: ParamSet
    epoch: int = 0
    validation_metric: Optional[float] = None


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """EMKG header, JSON config blob, 32-byte fingerprint, then named float32 tensors."""
    if len(checkpoint.fingerprint) != FINGERPRINT_BYTES:
        raise ValidationError(f"Fingerprint must be {FINGERPRINT_BYTES} bytes")
    blob = json.dumps(
        {
            "config": checkpoint.config.model_dump(mode="json"),
            "epoch": checkpoint.epoch,
            "modality_types": list(checkpoint.params.modality_types),
            "validation_metric": checkpoint.validation_metric,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(blob)), blob, checkpoint.fingerprint]
    for name, tensor in checkpoint.params.named_tensors().items():
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(tensor.ndim)]
        parts += [_U64.pack(dim) for dim in tensor.shape]
        parts.append(np.ascontiguousarray(tensor, dtype=_FLOAT).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.source = source
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.payload):
            raise TruncationError(f"{self.source}: checkpoint ends early at byte {len(self.payload)}")
        chunk = self.payload[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(_U64.size))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.payload)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, source)
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        config = TrainConfig.model_validate(header["config"])
        modality_types = tuple(header["modality_types"])
    except (ValueError, KeyError) as e:
        raise FormatError(f"{source}: unreadable checkpoint header ({e})") from e
    fingerprint = reader.take(FINGERPRINT_BYTES)

    named: Dict[str, np.ndarray] = {}
    while not reader.done:
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: tensor name is not UTF-8 at byte {reader.pos}") from e
        shape = tuple(reader.u64() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(count * _FLOAT.itemsize), dtype=_FLOAT)
        named[name] = data.astype(np.float32).reshape(shape)
    try:
        params = ParamSet.from_named(named, modality_types)
    except ValidationError as e:
        raise FormatError(f"{source}: inconsistent tensors ({e})") from e
    if list(params.named_tensors()) != list(named):
        raise FormatError(f"{source}: unexpected tensor set {list(named)}")
    return Checkpoint(
        config=config,
        fingerprint=fingerprint,
        params=params,
        epoch=int(header.get("epoch", 0)),
        validation_metric=header.get("validation_metric"),
    )


def save_checkpoint(
    params: ParamSet,
    config: TrainConfig,
    fingerprint: bytes,
    path: Path,
    epoch: int = 0,
    validation_metric: Optional[float] = None,
) -> None:
    payload = encode_checkpoint(Checkpoint(
        config=config, fingerprint=fingerprint, params=params, epoch=epoch, validation_metric=validation_metric
    ))
    atomic_write_bytes(Path(path), payload)
    logger.info(f"Saved checkpoint ({len(payload)} bytes) to {path}")


def load_checkpoint(
    path: Path, expected_fingerprint: Optional[bytes] = None, allow_mismatch: bool = False
) -> Checkpoint:
    """Read a checkpoint and, if asked, verify it was trained on the expected graph.

    Raises:
        FormatError: On a bad magic, version or header
        TruncationError: If the tensor records do not fill the file exactly
        ArtifactMismatchError: On a graph fingerprint mismatch without `allow_mismatch`
    """
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes(), str(path))
    if expected_fingerprint is not None:
        verify_fingerprint(checkpoint, expected_fingerprint, allow_mismatch, str(path))
    return checkpoint


def verify_fingerprint(
    checkpoint: Checkpoint, expected: bytes, allow_mismatch: bool = False, source: str = "checkpoint"
) -> None:
    if checkpoint.fingerprint != expected:
        message = (
            f"{source}: checkpoint graph {checkpoint.fingerprint.hex()[:16]} does not match "
            f"{expected.hex()[:16]}"
        )
        if not allow_mismatch:
            raise ArtifactMismatchError(message)
        logger.warning(f"{message}; continuing because the mismatch was allowed")
