import numpy as np
import pytest

from bitgcf.graph import InteractionGraph, split_train_test


def graph_from_edges(num_users, num_items, edges):
    """Build a graph from an explicit [(u, i), ...] list."""
    users = np.array([e[0] for e in edges], dtype=np.int64)
    items = np.array([e[1] for e in edges], dtype=np.int64)
    return InteractionGraph.from_edge_arrays(num_users, num_items, users, items)


def random_graph(rng, num_users, num_items, density=0.3):
    """Random bipartite graph; every user gets at least one edge."""
    mask = rng.random((num_users, num_items)) < density
    for u in range(num_users):
        if not mask[u].any():
            mask[u, rng.integers(num_items)] = True
    users, items = np.nonzero(mask)
    return InteractionGraph.from_edge_arrays(num_users, num_items, users, items)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_split(rng):
    graph = random_graph(rng, 8, 9, density=0.45)
    return split_train_test(graph, 0.25, seed=3)
