"""Shared fixtures: the two six-node demo graphs, Scotland, graph builders."""

from importlib import resources

import numpy as np
import pytest

from carscale.graphs import Graph, parse_graph

# connected demo graph: two triangles joined through a hub node
FIG1_TEXT = "6\n1 2 2 3\n2 2 1 3\n3 4 1 2 5 6\n4 2 5 6\n5 2 3 4\n6 2 3 4\n"

# disconnected demo graph: triangle + pair + singleton
FIG2_TEXT = "6\n1 2 2 3\n2 2 1 3\n3 2 1 2\n4 1 5\n5 1 4\n6 0\n"


@pytest.fixture
def fig1() -> Graph:
    return parse_graph(FIG1_TEXT)


@pytest.fixture
def fig2() -> Graph:
    return parse_graph(FIG2_TEXT)


@pytest.fixture(scope="session")
def scotland_graph_path() -> str:
    return str(resources.files("carscale.data").joinpath("scotland.graph"))


@pytest.fixture(scope="session")
def scotland_data_path() -> str:
    return str(resources.files("carscale.data").joinpath("scotland.csv"))


def lattice_graph(m: int) -> Graph:
    """m x m grid with rook adjacency."""
    edges = []
    for r in range(m):
        for c in range(m):
            v = r * m + c
            if c + 1 < m:
                edges.append((v, v + 1))
            if r + 1 < m:
                edges.append((v, v + m))
    return Graph.from_edges(m * m, edges)


def random_spatial_graph(rng: np.random.Generator, n: int, k: int = 4) -> Graph:
    """Connected random graph with spatial locality.

    Nodes are points in the unit square joined to their k nearest
    neighbours; a chain along the x-sorted order guarantees connectivity
    while preserving locality.
    """
    pts = rng.random((n, 2))
    order = np.argsort(pts[:, 0])
    edges = set()
    for a, b in zip(order[:-1], order[1:]):
        edges.add((min(a, b), max(a, b)))
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argsort(d2, axis=1)[:, :k]
    for i in range(n):
        for j in nearest[i]:
            edges.add((min(i, int(j)), max(i, int(j))))
    return Graph.from_edges(n, edges)


def random_graph(rng: np.random.Generator, n: int, p: float) -> Graph:
    """Erdos-Renyi style graph, possibly disconnected."""
    edges = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < p
    ]
    return Graph.from_edges(n, edges)


def batch_se(values: np.ndarray, n_batches: int = 25) -> np.ndarray:
    """Monte-Carlo standard error of the mean by batch means.

    Accepts draws of shape (m,) or (m, d); returns the SE per column.
    """
    v = np.atleast_2d(np.asarray(values).T).T
    m = (v.shape[0] // n_batches) * n_batches
    bm = v[:m].reshape(n_batches, -1, v.shape[1]).mean(axis=1)
    return bm.std(axis=0, ddof=1) / np.sqrt(n_batches)
