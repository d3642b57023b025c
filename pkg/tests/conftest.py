import numpy as np
import pytest

from mmkg_core.datastore import SyntheticConfig, generate_synthetic, split_interactions
from mmkg_core.graph import assemble_interaction_graph, assemble_mmkg
from mmkg_core.knn import topn_cosine

SEED = 7


@pytest.fixture
def small_dataset():
    """20 items in 4 planted clusters, 10 users, two modalities of different width."""
    config = SyntheticConfig(
        n_items=20,
        n_users=10,
        modality_dims={"image": 6, "description": 4},
        n_clusters=4,
        n_interactions=80,
        seed=SEED,
    )
    return generate_synthetic(config)


@pytest.fixture
def small_store(small_dataset):
    return small_dataset.store


@pytest.fixture
def small_interactions(small_dataset):
    return split_interactions(small_dataset.interactions, seed=SEED)


@pytest.fixture
def small_neighbors(small_store):
    return {tau: topn_cosine(small_store.matrix(tau), 3) for tau in small_store.modality_types}


@pytest.fixture
def small_graph(small_store, small_neighbors):
    return assemble_mmkg(small_store, small_neighbors)


@pytest.fixture
def small_igraph(small_interactions):
    return assemble_interaction_graph(small_interactions)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
