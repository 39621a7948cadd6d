from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphalign.graph import GraphError, make_synthetic
from graphalign.template import PAD, NeighborDetailTemplate, NodeSequence, build_tree, sequence_embeddings, tree_length

from conftest import small_graph

GOLDEN = Path(__file__).parent / "fixtures" / "golden_tree.json"


def geometric_sum(s, h):
    return sum(s**i for i in range(h + 1))


def test_worked_example_matches_golden(example_graph):
    t0 = time.perf_counter()
    seq = build_tree(example_graph, 0, 3, 2, seed=0)
    assert time.perf_counter() - t0 < 1.0
    assert seq == NodeSequence.from_json(json.loads(GOLDEN.read_text()))
    assert [i for i, e in enumerate(seq.entries) if e == PAD] == [6, 8, 9, 12]


def test_isolated_node():
    g = small_graph(3, [(0, 1)])
    assert build_tree(g, 2, 2, 1, 0).entries == (2, PAD, PAD)


def test_length_s10_h2(synthetic):
    assert len(build_tree(synthetic, 0, 10, 2, 0)) == 111 == geometric_sum(10, 2)


@pytest.mark.parametrize("s", range(1, 6))
@pytest.mark.parametrize("h", range(1, 4))
def test_length_law_exhaustive(s, h):
    g = make_synthetic(40, 2, 0.5, seed=s * 10 + h)
    assert tree_length(s, h) == geometric_sum(s, h)
    assert len(build_tree(g, 0, s, h, 0)) == geometric_sum(s, h)


def test_invalid_arguments(example_graph):
    with pytest.raises(GraphError):
        build_tree(example_graph, 9, 3, 2, 0)
    with pytest.raises(GraphError):
        build_tree(example_graph, 0, 0, 2, 0)
    with pytest.raises(GraphError):
        build_tree(example_graph, 0, 3, 0, 0)


def check_tree(graph, seq):
    s = seq.s
    assert seq.entries[0] == seq.center
    for p, node in enumerate(seq.entries[: tree_length(s, seq.h - 1)]):
        kids = [seq.entries[c] for c in seq.children(p)]
        if node == PAD:
            assert all(k == PAD for k in kids)
            continue
        real = [k for k in kids if k != PAD]
        nbrs = set(graph.adjacency[node])
        assert set(real) <= nbrs
        assert len(real) == len(set(real)) == min(s, len(nbrs))
        # pads only trail
        assert kids[: len(real)] == real
        if len(nbrs) <= s:
            assert real == sorted(nbrs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 3))
def test_tree_structure_properties(seed, s, h):
    g = make_synthetic(50, 3, 0.8, seed=seed % 17)
    v = seed % 50
    seq = build_tree(g, v, s, h, seed)
    check_tree(g, seq)
    assert build_tree(g, v, s, h, seed) == seq


def test_seeds_only_matter_when_subsampling():
    g = small_graph(4, [(0, 1), (0, 2), (1, 2), (2, 3)])
    # every node has <= 3 neighbours: no sampling, all seeds agree
    assert len({build_tree(g, 0, 3, 3, seed).entries for seed in range(20)}) == 1
    hub = make_synthetic(60, 2, 0.5, seed=0, avg_degree=12)
    assert len({build_tree(hub, 0, 2, 2, seed).entries for seed in range(20)}) > 1


def test_sequence_embeddings_pad_rows_zero(example_graph):
    seq = build_tree(example_graph, 0, 3, 2, 0)
    x = sequence_embeddings(example_graph, seq)
    assert x.shape == (13, example_graph.feature_dim)
    norms = np.linalg.norm(x, axis=1)
    assert set(np.flatnonzero(norms == 0)) == {6, 8, 9, 12}
    for i, e in enumerate(seq.entries):
        if e != PAD:
            np.testing.assert_array_equal(x[i], example_graph.nodes[e].features)


def test_sequence_embeddings_isolated():
    g = small_graph(3, [(0, 1)])
    x = sequence_embeddings(g, build_tree(g, 2, 2, 1, 0))
    np.testing.assert_array_equal(x[0], g.nodes[2].features)
    assert not x[1:].any()


def test_sequence_embeddings_leaf_heavy_lookup_oracle():
    g = make_synthetic(30, 2, 0.5, seed=4, avg_degree=1.5)
    seq = build_tree(g, 3, 4, 2, 11)
    x = sequence_embeddings(g, seq)
    oracle = np.array([np.zeros(g.feature_dim) if e == PAD else g.feature_matrix[e] for e in seq.entries])
    np.testing.assert_array_equal(x, oracle)
    assert ((np.linalg.norm(x, axis=1) == 0) == (np.array(seq.entries) == PAD)).all()


def test_template_interface(example_graph):
    t = NeighborDetailTemplate(s=3, h=2)
    assert t.describe(example_graph, 0, 0) == build_tree(example_graph, 0, 3, 2, 0)


def test_node_sequence_validation():
    with pytest.raises(ValueError):
        NodeSequence(0, (0, 1), 3, 1)
    with pytest.raises(ValueError):
        NodeSequence(0, (1, PAD, PAD, PAD), 3, 1)
