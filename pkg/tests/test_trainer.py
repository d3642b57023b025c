import io
import json

import numpy as np
import pytest

from mmkg_core.datastore import SyntheticConfig, generate_synthetic, split_interactions
from mmkg_core.exceptions import ArtifactMismatchError, FormatError, NumericalError, TruncationError
from mmkg_core.graph import assemble_mmkg, assemble_variant
from mmkg_core.knn import topn_cosine
from mmkg_core.model import init_params
from mmkg_core.trainer import (
    Checkpoint,
    TrainConfig,
    TrainingContext,
    decode_checkpoint,
    encode_checkpoint,
    forward_backward,
    gradient_check,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    train,
)

FAST = dict(dim=8, layers=2, epochs=3, bpr_batch_size=16, kg_batch_size=16, lr=0.01, seed=3)


@pytest.fixture
def trained(small_store, small_graph, small_interactions):
    return train(small_store, small_graph, small_interactions, TrainConfig(**FAST))


def test_odd_dimension_is_rejected():
    with pytest.raises(ValueError):
        TrainConfig(dim=7)


def test_baseline_config_disables_fusion_and_kg():
    config = TrainConfig.baseline(dim=8, lambda_kg=5.0)
    assert config.fusion is False
    assert config.lambda_kg == 0.0
    assert config.dim == 8


def test_grad_check_mode_runs_in_64_bit():
    assert TrainConfig(grad_check=True).dtype == np.float64
    assert TrainConfig().dtype == np.float32


@pytest.mark.parametrize("variant, separate", [
    ("original", False),
    ("original", True),
    ("interaction", False),
    ("inter_modal", False),
    ("item_item", False),
])
def test_gradients_match_finite_differences(small_store, small_neighbors, small_interactions, variant, separate):
    """
    Tests every coordinate of every parameter group against central differences in 64-bit.
    """
    graph = assemble_variant(small_store, small_neighbors, small_interactions, variant)
    config = TrainConfig(dim=8, layers=2, weight_decay=1e-2, seed=5, separate_item_tables=separate)
    params = init_params(small_store, small_interactions.n_users, 8, seed=5, separate_item_tables=separate)
    report = gradient_check(small_store, graph, small_interactions, config, batch_size=16)
    assert report.checked == sum(t.size for t in params.named_tensors().values())
    assert {g.name for g in report.groups} == set(params.named_tensors())
    assert report.within_tolerance >= 0.99
    assert report.max_relative_error <= 1e-2
    assert report.passed


def test_nan_gradient_is_reported(small_store, small_graph, small_interactions):
    config = TrainConfig(**FAST)
    context = TrainingContext.build(small_store, small_graph, small_interactions, config)
    params = init_params(small_store, small_interactions.n_users, 8, seed=1)
    params.relation_phase[0, 0] = np.nan
    users, items = small_interactions.pairs()
    batch = sample_batch(context, users[:8], items[:8], np.random.default_rng(0))
    with pytest.raises(NumericalError, match="parameter group"):
        forward_backward(params, batch, context)


def test_training_is_deterministic(small_store, small_graph, small_interactions):
    config = TrainConfig(**FAST)
    _, first = train(small_store, small_graph, small_interactions, config)
    _, second = train(small_store, small_graph, small_interactions, config)
    assert first.losses == second.losses
    assert len(first.epochs) == 3


def test_metrics_stream_has_one_line_per_epoch(small_store, small_graph, small_interactions):
    stream = io.StringIO()
    _, report = train(small_store, small_graph, small_interactions, TrainConfig(**FAST), metrics_stream=stream)
    lines = stream.getvalue().splitlines()
    assert len(lines) == len(report.epochs)
    record = json.loads(lines[0])
    assert record["epoch"] == 1
    assert list(record) == sorted(record)


def test_baseline_training_has_no_kg_term(small_store, small_graph, small_interactions):
    _, report = train(small_store, small_graph, small_interactions, TrainConfig.baseline(**FAST))
    assert all(e.loss_kg == 0.0 for e in report.epochs)


def test_zeroed_modalities_without_kg_leave_projections_untouched(small_store, small_graph, small_interactions):
    """Zero features give the projection weights no gradient, so only item, user and bias tables learn."""
    config = TrainConfig(**{**FAST, "lambda_kg": 0.0, "weight_decay": 0.0, "zero_modalities": True})
    params, report = train(small_store, small_graph, small_interactions, config)
    initial = init_params(small_store, small_interactions.n_users, 8, seed=3)
    assert all(e.loss_kg == 0.0 for e in report.epochs)
    for tau in small_store.modality_types:
        np.testing.assert_array_equal(params.proj_weight[tau], initial.proj_weight[tau])
    np.testing.assert_array_equal(params.relation_phase, initial.relation_phase)
    assert not np.array_equal(params.item_embedding, initial.item_embedding)


def test_training_moves_parameters(trained, small_store, small_interactions):
    params, report = trained
    initial = init_params(small_store, small_interactions.n_users, 8, seed=3)
    assert not np.array_equal(params.item_embedding, initial.item_embedding)
    assert 1 <= report.best_epoch <= 3


def test_checkpoint_round_trip_is_byte_identical(tmp_path, trained, small_graph):
    params, report = trained
    first = tmp_path / "a.emkg"
    second = tmp_path / "b.emkg"
    save_checkpoint(params, report.config, small_graph.fingerprint.digest, first, epoch=report.best_epoch)
    loaded = load_checkpoint(first, expected_fingerprint=small_graph.fingerprint.digest)
    save_checkpoint(loaded.params, loaded.config, loaded.fingerprint, second, epoch=loaded.epoch)
    assert first.read_bytes() == second.read_bytes()
    assert loaded.config == report.config
    np.testing.assert_array_equal(loaded.params.user_embedding, params.user_embedding)


def test_checkpoint_refuses_other_graph(tmp_path, trained, small_graph):
    params, report = trained
    path = tmp_path / "c.emkg"
    save_checkpoint(params, report.config, small_graph.fingerprint.digest, path)
    with pytest.raises(ArtifactMismatchError):
        load_checkpoint(path, expected_fingerprint=b"\x01" * 32)
    assert load_checkpoint(path, expected_fingerprint=b"\x01" * 32, allow_mismatch=True).params is not None


def test_truncated_checkpoint(trained, small_graph):
    params, report = trained
    payload = encode_checkpoint(Checkpoint(config=report.config, fingerprint=small_graph.fingerprint.digest,
                                           params=params))
    with pytest.raises(TruncationError):
        decode_checkpoint(payload[:-5])
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + payload[4:])


def test_full_model_matches_or_beats_baseline_median_recall():
    """
    Trains the fused model and the interaction-only baseline on five planted-cluster catalogs.

    The fused model's median validation Recall@10 must not fall below the
    baseline's, and its training loss must fall in most epochs.
    """
    knobs = dict(dim=32, layers=2, epochs=20, patience=20, lr=5e-3, bpr_batch_size=512,
                    kg_batch_size=512, eval_k=10)
    full_recalls, baseline_recalls, falling = [], [], []
    for seed in range(5):
        dataset = generate_synthetic(SyntheticConfig(
            n_items=300, n_users=200, modality_dims={"image": 32, "description": 16},
            n_clusters=10, n_interactions=4000, preference=0.9, seed=seed,
        ))
        store = dataset.store
        interactions = split_interactions(dataset.interactions, seed=seed)
        graph = assemble_mmkg(store, {tau: topn_cosine(store.matrix(tau), 10) for tau in store.modality_types})
        _, full = train(store, graph, interactions, TrainConfig(**knobs, seed=seed))
        _, base = train(store, graph, interactions, TrainConfig.baseline(**knobs, seed=seed, zero_modalities=True))
        assert base.config.lambda_kg == 0.0 and not base.config.fusion
        full_recalls.append(full.best_metric)
        baseline_recalls.append(base.best_metric)
        falling.append(sum(b < a for a, b in zip(full.losses, full.losses[1:])))
    assert np.median(full_recalls) >= np.median(baseline_recalls)
    assert all(count >= 15 for count in falling), falling
