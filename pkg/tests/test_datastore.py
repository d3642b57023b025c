import struct

import numpy as np
import pytest

from mmkg_core.datastore import (
    FEATURE_MAGIC,
    FeatureStore,
    InteractionData,
    SplitLabel,
    SyntheticConfig,
    decode_feature_matrix,
    generate_synthetic,
    load_feature_store,
    load_features,
    load_interactions,
    read_feature_matrix,
    read_id_map,
    read_item_clusters,
    split_interactions,
    write_dataset,
    write_features,
    write_id_map,
)
from mmkg_core.exceptions import (
    CatalogMismatchError,
    DuplicateIdError,
    EmptyDataError,
    FormatError,
    TruncationError,
    ValidationError,
)
from mmkg_core.ranking import cosine_normalize


def _header(rows, cols, magic=FEATURE_MAGIC, version=1):
    return struct.pack("<4sIQQ", magic, version, rows, cols)


@pytest.fixture
def tiny_store():
    return FeatureStore(
        modality_types=("image",),
        matrices={"image": np.eye(3, dtype=np.float32)},
        item_ids=("a", "b", "c"),
    )


# --- Feature files ---

def test_decode_header_and_payload():
    """
    Tests that a 3x4 header with 48 payload bytes yields a 3x4 matrix.
    """
    values = np.arange(12, dtype="<f4")
    matrix = decode_feature_matrix(_header(3, 4) + values.tobytes())
    assert matrix.shape == (3, 4)
    np.testing.assert_array_equal(matrix.ravel(), values)


def test_decode_short_payload_is_truncation():
    with pytest.raises(TruncationError):
        decode_feature_matrix(_header(3, 4) + b"\x00" * 44)


@pytest.mark.parametrize("payload", [
    _header(1, 1, magic=b"XXXX") + b"\x00" * 4,
    _header(1, 1, version=2) + b"\x00" * 4,
    b"EMFM",
])
def test_decode_rejects_bad_header(payload):
    with pytest.raises(FormatError):
        decode_feature_matrix(payload)


def test_feature_file_round_trip_is_byte_identical(tmp_path, rng):
    """
    Tests that reading and rewriting a feature file reproduces it byte for byte.
    """
    first = tmp_path / "a.emfm"
    second = tmp_path / "b.emfm"
    write_features(rng.standard_normal((5, 7)).astype(np.float32), first)
    write_features(read_feature_matrix(first), second)
    assert first.read_bytes() == second.read_bytes()


# --- ID maps ---

def test_id_map_duplicate(tmp_path):
    path = tmp_path / "items.txt"
    path.write_text("A\nB\nA", encoding="utf-8")
    with pytest.raises(DuplicateIdError):
        read_id_map(path)


def test_id_map_empty_line(tmp_path):
    path = tmp_path / "items.txt"
    path.write_text("A\n\nB\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_id_map(path)


def test_id_map_round_trip(tmp_path):
    path = tmp_path / "items.txt"
    write_id_map(["x", "y", "z"], path)
    assert path.read_text(encoding="utf-8") == "x\ny\nz\n"
    assert read_id_map(path) == ("x", "y", "z")


def test_load_features_row_count_mismatch(tmp_path):
    write_features(np.zeros((2, 3), dtype=np.float32), tmp_path / "image.emfm")
    write_id_map(["a", "b", "c"], tmp_path / "items.txt")
    with pytest.raises(FormatError):
        load_features(tmp_path / "image.emfm", tmp_path / "items.txt")


def test_feature_store_rejects_misaligned_rows():
    with pytest.raises(ValidationError):
        FeatureStore(
            modality_types=("image", "text"),
            matrices={"image": np.zeros((3, 2)), "text": np.zeros((2, 2))},
            item_ids=("a", "b", "c"),
        )


def test_feature_store_is_read_only(tiny_store):
    with pytest.raises(ValueError):
        tiny_store.matrix("image")[0, 0] = 5.0


def test_zeroed_store_keeps_shapes(tiny_store):
    zeroed = tiny_store.zeroed()
    assert zeroed.dims == tiny_store.dims
    assert not zeroed.matrix("image").any()


# --- Interactions ---

def test_load_interactions_counts_users(tmp_path, tiny_store):
    path = tmp_path / "interactions.tsv"
    path.write_text("u1\ta\nu2\tb\nu1\tc\t17\n", encoding="utf-8")
    data = load_interactions(path, tiny_store)
    assert data.n_users == 2
    assert data.user_ids == ("u1", "u2")
    assert data.n_pairs == 3
    assert data.report.with_timestamps == 1


def test_load_interactions_unknown_item(tmp_path, tiny_store):
    path = tmp_path / "interactions.tsv"
    path.write_text("u1\ta\nu1\tzzz\n", encoding="utf-8")
    with pytest.raises(CatalogMismatchError):
        load_interactions(path, tiny_store)


def test_load_interactions_deduplicates(tmp_path, tiny_store):
    path = tmp_path / "interactions.tsv"
    path.write_text("u1\ta\nu1\ta\nu1\tb\n", encoding="utf-8")
    data = load_interactions(path, tiny_store)
    assert data.n_pairs == 2
    assert data.report.duplicates_dropped == 1


def test_load_interactions_empty(tmp_path, tiny_store):
    path = tmp_path / "interactions.tsv"
    path.write_text("\n", encoding="utf-8")
    with pytest.raises(EmptyDataError):
        load_interactions(path, tiny_store)


def test_load_interactions_bad_line(tmp_path, tiny_store):
    path = tmp_path / "interactions.tsv"
    path.write_text("u1 a\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_interactions(path, tiny_store)


def _single_user(k, n_items=20):
    return InteractionData(
        user_ids=("u",),
        n_items=n_items,
        users=np.zeros(k, dtype=np.int64),
        items=np.arange(k, dtype=np.int64),
    )


@pytest.mark.parametrize("k, expected", [
    (10, (8, 1, 1)),
    (1, (1, 0, 0)),
    (3, (3, 0, 0)),
    (17, (14, 1, 2)),
])
def test_split_proportions(k, expected):
    """
    Tests the ceil(80%) / floor(10%) / remainder rule per user.
    """
    split = split_interactions(_single_user(k), seed=3)
    counts = tuple(int(np.sum(split.split == label)) for label in SplitLabel)
    assert counts == expected


def test_split_is_deterministic(small_dataset):
    first = split_interactions(small_dataset.interactions, seed=11)
    second = split_interactions(small_dataset.interactions, seed=11)
    assert first.split.tobytes() == second.split.tobytes()


def test_every_user_keeps_a_train_pair(small_interactions):
    users, _ = small_interactions.pairs(SplitLabel.TRAIN)
    assert set(users.tolist()) == set(range(small_interactions.n_users))


def test_duplicate_pairs_rejected():
    with pytest.raises(ValidationError):
        InteractionData(user_ids=("u",), n_items=3, users=np.array([0, 0]), items=np.array([1, 1]))


# --- Synthetic data ---

def test_synthetic_items_sit_near_their_centroid():
    """
    Tests that at noise 0.1 nearly every item's closest centroid is its planted one.
    """
    dataset = generate_synthetic(SyntheticConfig(n_items=50, n_clusters=5, modality_dims={"image": 16}, seed=5))
    sims = cosine_normalize(dataset.store.matrix("image")) @ cosine_normalize(dataset.centroids["image"]).T
    agreement = np.mean(np.argmax(sims, axis=1) == dataset.item_clusters)
    assert agreement >= 0.9


def test_synthetic_full_preference_stays_in_clusters():
    dataset = generate_synthetic(SyntheticConfig(n_items=60, n_users=20, n_interactions=200, preference=1.0, seed=9))
    data = dataset.interactions
    for u, i in zip(data.users, data.items):
        assert dataset.item_clusters[i] in dataset.user_clusters[u]


def test_synthetic_same_seed_same_bytes(tmp_path):
    config = SyntheticConfig(n_items=30, n_users=10, n_interactions=60, seed=4)
    write_dataset(generate_synthetic(config), tmp_path / "a")
    write_dataset(generate_synthetic(config), tmp_path / "b")
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_written_dataset_loads_back(tmp_path, small_dataset):
    write_dataset(small_dataset, tmp_path)
    store = load_feature_store(tmp_path)
    assert store.modality_types == small_dataset.store.modality_types
    np.testing.assert_array_equal(store.matrix("image"), small_dataset.store.matrix("image"))
    data = load_interactions(tmp_path / "interactions.tsv", store)
    assert data.n_pairs == small_dataset.interactions.n_pairs
    labels = read_item_clusters(tmp_path / "item_clusters.tsv", store)
    np.testing.assert_array_equal(labels, small_dataset.item_clusters)
