import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carscale.graphs import (
    Graph,
    GraphFormatError,
    connected_components,
    isolate_nodes,
    parse_graph,
    read_graph,
    serialize_graph,
)

from conftest import FIG2_TEXT


@st.composite
def graphs(draw, max_n=12):
    n = draw(st.integers(min_value=1, max_value=max_n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if pairs:
        edges = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs)))
    else:
        edges = []
    return Graph.from_edges(n, edges)


class TestParse:
    def test_three_node_path(self):
        g = parse_graph("3\n1 1 2\n2 2 1 3\n3 1 2\n")
        assert g.n == 3
        assert g.edges == ((0, 1), (1, 2))

    def test_connected_demo_degrees(self, fig1):
        assert list(fig1.degrees) == [2, 2, 4, 2, 2, 2]
        assert len(fig1.edges) == 7

    def test_asymmetric_listing_is_an_error(self):
        with pytest.raises(GraphFormatError, match="asymmetric"):
            parse_graph("3\n1 1 2\n2 0\n3 0\n")

    def test_malformed_header(self):
        with pytest.raises(GraphFormatError, match="node count"):
            parse_graph("abc\n1 0\n")

    def test_node_index_out_of_range(self):
        with pytest.raises(GraphFormatError, match="out of range"):
            parse_graph("2\n1 1 3\n2 0\n")

    def test_duplicate_neighbour_entry(self):
        with pytest.raises(GraphFormatError, match="duplicate neighbour"):
            parse_graph("2\n1 2 2 2\n2 1 1\n")

    def test_neighbour_count_mismatch(self):
        with pytest.raises(GraphFormatError, match="declares"):
            parse_graph("2\n1 2 2\n2 1 1\n")

    def test_self_neighbour(self):
        with pytest.raises(GraphFormatError, match="itself"):
            parse_graph("2\n1 1 1\n2 0\n")

    def test_missing_node_line(self):
        with pytest.raises(GraphFormatError):
            parse_graph("3\n1 1 2\n2 1 1\n")

    def test_node_listed_twice(self):
        with pytest.raises(GraphFormatError, match="twice"):
            parse_graph("2\n1 0\n1 0\n")

    @given(graphs())
    @settings(max_examples=60, deadline=None)
    def test_serialize_roundtrip(self, g):
        assert parse_graph(serialize_graph(g)) == g


class TestComponents:
    def test_disconnected_demo(self, fig2):
        part = connected_components(fig2)
        assert list(part.sizes) == [3, 2, 1]
        assert part.singleton_ids == (5,)
        assert list(part.labels) == [0, 0, 0, 1, 1, 2]

    def test_complete_graph(self):
        g = Graph.from_edges(4, [(i, j) for i in range(4) for j in range(i + 1, 4)])
        part = connected_components(g)
        assert list(part.sizes) == [4]

    def test_edgeless_graph(self):
        part = connected_components(Graph.from_edges(4, []))
        assert list(part.sizes) == [1, 1, 1, 1]
        assert part.singleton_ids == (0, 1, 2, 3)

    @given(graphs(), st.randoms(use_true_random=False))
    @settings(max_examples=40, deadline=None)
    def test_relabeling_permutes_components(self, g, rnd):
        perm = list(range(g.n))
        rnd.shuffle(perm)
        permuted = Graph.from_edges(g.n, [(perm[i], perm[j]) for i, j in g.edges])
        a = connected_components(g)
        b = connected_components(permuted)
        assert sorted(a.sizes) == sorted(b.sizes)
        # two nodes share a component iff their images do
        for i, j in g.edges:
            assert (a.labels[i] == a.labels[j]) == (b.labels[perm[i]] == b.labels[perm[j]])


class TestIsolate:
    def test_scotland_islands(self, scotland_graph_path):
        g = read_graph(scotland_graph_path)
        assert g.n == 56
        assert connected_components(g).n_components == 1
        cut = isolate_nodes(g, [5, 7, 10])  # nodes 6, 8, 11 in file numbering
        part = connected_components(cut)
        assert sorted(part.sizes, reverse=True) == [53, 1, 1, 1]
        assert part.singleton_ids == (5, 7, 10)

    def test_empty_set_is_identity(self, fig1):
        assert isolate_nodes(fig1, []) == fig1

    def test_already_isolated_node_is_identity(self, fig2):
        assert isolate_nodes(fig2, [5]) == fig2

    def test_out_of_range(self, fig1):
        with pytest.raises(ValueError, match="out of range"):
            isolate_nodes(fig1, [6])

    @given(graphs(), st.data())
    @settings(max_examples=40, deadline=None)
    def test_isolated_nodes_become_singletons(self, g, data):
        nodes = data.draw(st.sets(st.integers(0, g.n - 1), max_size=g.n))
        cut = isolate_nodes(g, nodes)
        assert cut.n == g.n
        part = connected_components(cut)
        for v in nodes:
            assert cut.degrees[v] == 0
            assert v in part.singleton_ids


def test_scotland_data_head(scotland_data_path):
    rows = open(scotland_data_path).read().splitlines()
    assert rows[0] == "Counts,E,X,Region"
    assert rows[1] == "9,1.4,16,1"
    assert rows[2] == "39,8.7,16,2"
