"""Undirected graphs: adjacency-list parsing, editing, connected components.

The on-disk format is the symmetric adjacency-list layout: line one holds the
node count n, followed by exactly n lines reading ``i k j1 ... jk`` where i is
the (1-based) node index, k its neighbour count and j1..jk its neighbours.
Every edge must appear in both endpoint lists; asymmetric listings are
rejected rather than silently repaired so that data bugs surface early.

Node indices are 0-based everywhere inside the library; the 1-based
convention of the file format is translated only at the I/O boundary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np


class GraphFormatError(ValueError):
    """A graph file violates the adjacency-list format."""


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on nodes 0..n-1.

    Edges are stored canonically as sorted (i, j) pairs with i < j; no
    self-loops or duplicates. Instances are immutable and safe to share.
    """

    n: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError(f"node count must be positive, got {self.n}")
        seen: set[tuple[int, int]] = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
            if i > j:
                raise ValueError(f"edge ({i}, {j}) must be stored with i < j")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))

    @classmethod
    def from_edges(cls, n: int, pairs: Iterable[tuple[int, int]]) -> "Graph":
        """Build a graph from unordered 0-based node pairs (deduplicated)."""
        canon = sorted({(min(i, j), max(i, j)) for i, j in pairs})
        return cls(n=n, edges=tuple(canon))

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbour tuple per node."""
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        deg.flags.writeable = False
        return deg


@dataclass(frozen=True)
class ComponentPartition:
    """Partition of graph nodes into connected components.

    Component ids are assigned in order of the smallest node index contained,
    so `labels[0] == 0`. `sizes[k]` is the node count of component k and
    `singleton_ids` lists the (0-based) nodes forming size-1 components.
    """

    labels: np.ndarray
    sizes: np.ndarray
    singleton_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if int(self.sizes.sum()) != self.labels.shape[0]:
            raise ValueError("component sizes do not sum to node count")
        self.labels.flags.writeable = False
        self.sizes.flags.writeable = False

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.sizes.shape[0])

    @cached_property
    def members(self) -> tuple[np.ndarray, ...]:
        """Sorted member index array per component."""
        out = []
        for k in range(self.n_components):
            m = np.flatnonzero(self.labels == k)
            m.flags.writeable = False
            out.append(m)
        return tuple(out)

    @cached_property
    def non_singleton_components(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.n_components) if self.sizes[k] > 1)


def parse_graph(text: str) -> Graph:
    """Parse adjacency-list text (see module docstring) into a Graph.

    Raises GraphFormatError with a line number on malformed headers, indices
    out of range, duplicate neighbour entries, or asymmetric listings.
    """
    lines = [(no + 1, ln.strip()) for no, ln in enumerate(text.splitlines())]
    body = [(no, ln) for no, ln in lines if ln]
    if not body:
        raise GraphFormatError("line 1: empty graph file")
    head_no, head = body[0]
    try:
        n = int(head)
    except ValueError:
        raise GraphFormatError(f"line {head_no}: expected node count, got {head!r}") from None
    if n <= 0:
        raise GraphFormatError(f"line {head_no}: node count must be positive, got {n}")
    if len(body) - 1 != n:
        raise GraphFormatError(
            f"expected {n} node lines after the header, found {len(body) - 1}"
        )

    neighbours: dict[int, set[int]] = {}
    line_of: dict[int, int] = {}
    for no, ln in body[1:]:
        fields = ln.split()
        try:
            values = [int(f) for f in fields]
        except ValueError:
            raise GraphFormatError(f"line {no}: non-integer token in {ln!r}") from None
        if len(values) < 2:
            raise GraphFormatError(f"line {no}: expected 'i k j1 ... jk'")
        node, k, rest = values[0], values[1], values[2:]
        if not 1 <= node <= n:
            raise GraphFormatError(f"line {no}: node index {node} out of range 1..{n}")
        if node in neighbours:
            raise GraphFormatError(f"line {no}: node {node} listed twice")
        if k != len(rest):
            raise GraphFormatError(
                f"line {no}: node {node} declares {k} neighbours but lists {len(rest)}"
            )
        nb: set[int] = set()
        for j in rest:
            if not 1 <= j <= n:
                raise GraphFormatError(f"line {no}: neighbour index {j} out of range 1..{n}")
            if j == node:
                raise GraphFormatError(f"line {no}: node {node} lists itself as neighbour")
            if j in nb:
                raise GraphFormatError(f"line {no}: duplicate neighbour {j} for node {node}")
            nb.add(j)
        neighbours[node] = nb
        line_of[node] = no

    missing = [i for i in range(1, n + 1) if i not in neighbours]
    if missing:
        raise GraphFormatError(f"missing adjacency line for node(s) {missing}")

    for i in range(1, n + 1):
        for j in neighbours[i]:
            if i not in neighbours[j]:
                raise GraphFormatError(
                    f"line {line_of[i]}: node {i} lists {j} but node {j} "
                    f"does not list {i} (asymmetric)"
                )

    edges = {(min(i, j) - 1, max(i, j) - 1) for i in neighbours for j in neighbours[i]}
    return Graph(n=n, edges=tuple(sorted(edges)))


def read_graph(path: str | Path) -> Graph:
    return parse_graph(Path(path).read_text())


def serialize_graph(g: Graph) -> str:
    """Render a Graph in the adjacency-list format (inverse of parse_graph)."""
    out = [str(g.n)]
    for i, nb in enumerate(g.adjacency):
        parts = [str(i + 1), str(len(nb))] + [str(j + 1) for j in nb]
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def write_graph(g: Graph, path: str | Path) -> None:
    Path(path).write_text(serialize_graph(g))


def connected_components(g: Graph) -> ComponentPartition:
    """Label connected components by iterative breadth-first search."""
    labels = np.full(g.n, -1, dtype=np.int64)
    sizes: list[int] = []
    adj = g.adjacency
    for start in range(g.n):
        if labels[start] >= 0:
            continue
        comp = len(sizes)
        labels[start] = comp
        count = 1
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if labels[w] < 0:
                    labels[w] = comp
                    count += 1
                    queue.append(w)
        sizes.append(count)
    size_arr = np.asarray(sizes, dtype=np.int64)
    singles = tuple(int(v) for v in np.flatnonzero(size_arr[labels] == 1))
    return ComponentPartition(labels=labels, sizes=size_arr, singleton_ids=singles)


def isolate_nodes(g: Graph, nodes: Iterable[int]) -> Graph:
    """Drop every edge incident to any of the given (0-based) nodes.

    The node count is unchanged; listed nodes become singletons.
    """
    target = set(nodes)
    for v in target:
        if not 0 <= v < g.n:
            raise ValueError(f"node index {v} out of range 0..{g.n - 1}")
    kept = tuple(e for e in g.edges if e[0] not in target and e[1] not in target)
    return Graph(n=g.n, edges=kept)
