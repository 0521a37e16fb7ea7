import hashlib

import numpy as np
import pytest
import torch

from conftest import delaunay
from utils.errors import GraphParseError, GraphValidationError, NodeBoundsError, ValidationError
from utils.graph import (ObservationMask, SparseGraph, delaunay_graph, generate_delaunay_graph, generate_mask,
                         generate_nested_masks, k_hop_graph, load_edge_list, load_mask, load_node_vector,
                         normalized_adjacency_apply, save_edge_list, save_mask, save_node_vector)


def write_lines(path, *lines):
    path.write_text('\n'.join(lines) + '\n')
    return str(path)


def test_load_single_edge(tmp_path):
    graph = load_edge_list(write_lines(tmp_path / 'edges.txt', '0 1'), 2)
    assert graph.col_indices.shape[0] == 2
    assert torch.equal(graph.degrees, torch.tensor([1.0, 1.0], dtype=torch.float64))


def test_load_drops_self_loops_and_duplicates(tmp_path):
    graph = load_edge_list(write_lines(tmp_path / 'edges.txt', '0 1', '1 0', '1 1'), 2)
    assert graph.col_indices.shape[0] == 2
    assert graph.n_edges == 1


def test_load_weighted_triangle(tmp_path):
    path = write_lines(tmp_path / 'edges.txt', '# weighted triangle', '0 1 2', '1 2 3', '0 2 4')
    graph = load_edge_list(path, 3)
    assert graph.degrees.tolist() == [6.0, 5.0, 7.0]


def test_parse_error_carries_line_number(tmp_path):
    path = write_lines(tmp_path / 'edges.txt', '0 1', 'zero one')
    with pytest.raises(GraphParseError) as error:
        load_edge_list(path, 2)
    assert error.value.line_number == 2


def test_node_outside_range(tmp_path):
    with pytest.raises(NodeBoundsError):
        load_edge_list(write_lines(tmp_path / 'edges.txt', '0 1', '1 5'), 3)


def test_disconnected_graph_rejected():
    with pytest.raises(GraphValidationError):
        SparseGraph.from_edges(4, [(0, 1), (2, 3)])


def test_isolated_node_rejected():
    with pytest.raises(GraphValidationError, match='isolated'):
        SparseGraph.from_edges(3, [(0, 1)])


def test_edge_list_round_trip(tmp_path):
    graph = delaunay(40, seed=3, weighted=True)
    save_edge_list(tmp_path / 'edges.txt', graph)
    loaded = load_edge_list(tmp_path / 'edges.txt', graph.n_nodes)
    assert loaded.graph_hash() == graph.graph_hash()


def test_csr_invariants(small_graph):
    offsets, cols = small_graph.row_offsets, small_graph.col_indices
    for i in range(small_graph.n_nodes):
        row = cols[offsets[i]:offsets[i + 1]]
        assert torch.all(row[1:] > row[:-1])
        assert not bool((row == i).any())
    dense = small_graph.to_dense()
    assert torch.equal(dense, dense.T)


def test_adjacency_apply_matches_dense(small_graph, generator):
    v = torch.randn(small_graph.n_nodes, 3, generator=generator, dtype=torch.float64)
    expected = small_graph.to_dense() @ v
    assert torch.allclose(small_graph.adjacency_apply(v), expected, atol=1e-12)


def test_normalized_adjacency_on_edge(edge_graph):
    v = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert normalized_adjacency_apply(edge_graph, v).tolist() == [0.0, 1.0]


def test_normalized_adjacency_is_linear(small_graph):
    zero = torch.zeros(small_graph.n_nodes, dtype=torch.float64)
    assert torch.equal(normalized_adjacency_apply(small_graph, zero), zero)


def test_normalized_adjacency_on_triangle(triangle):
    ones = torch.ones(3, dtype=torch.float64)
    assert torch.allclose(normalized_adjacency_apply(triangle, ones), ones)


def test_two_hop_path(path_graph):
    two_hop = k_hop_graph(path_graph, 2)
    assert two_hop.n_edges == 3
    assert two_hop.to_dense()[0, 2] == 1.0


def test_one_hop_keeps_structure_with_unit_weights():
    graph = SparseGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)], weights=[2.0, 3.0, 4.0])
    one_hop = k_hop_graph(graph, 1)
    assert torch.equal(one_hop.col_indices, graph.col_indices)
    assert torch.equal(one_hop.weights, torch.ones_like(graph.weights))


def test_three_hop_pattern_matches_boolean_power():
    graph = delaunay(20, seed=5)
    pattern = (graph.to_dense() != 0).to(torch.float64) + torch.eye(20, dtype=torch.float64)
    expected = torch.linalg.matrix_power(pattern, 3) > 0
    expected &= ~torch.eye(20, dtype=torch.bool)
    assert torch.equal(k_hop_graph(graph, 3).to_dense() != 0, expected)


def test_k_hop_rejects_zero(path_graph):
    with pytest.raises(ValidationError):
        k_hop_graph(path_graph, 0)


def test_delaunay_triangle():
    graph = delaunay_graph(np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 0.9]]))
    assert graph.n_edges == 3


def test_delaunay_convex_quadrilateral():
    # four points in convex position: four hull edges and one diagonal
    graph = delaunay_graph(np.array([[0.0, 0.0], [1.0, 0.0], [1.1, 1.0], [0.0, 0.9]]))
    assert graph.n_edges == 5


def test_delaunay_is_planar():
    graph, points = generate_delaunay_graph(3000, seed=0)
    assert graph.n_nodes == 3000
    assert points.shape == (3000, 2)
    assert graph.n_edges <= 3 * 3000 - 6


def test_delaunay_is_seeded():
    assert delaunay(200, seed=7).graph_hash() == delaunay(200, seed=7).graph_hash()
    assert delaunay(200, seed=7).graph_hash() != delaunay(200, seed=8).graph_hash()


def test_weighted_delaunay_uses_inverse_distance():
    points = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    graph = delaunay_graph(points, weighted=True, eps=0.0)
    dense = graph.to_dense()
    assert dense[0, 1] == pytest.approx(1.0 / 3.0)
    assert dense[1, 2] == pytest.approx(1.0 / 5.0)


def test_mask_counts():
    assert generate_mask(100, 0.5, seed=0).m_count == 50
    assert int(generate_mask(3000, 0.25, seed=0).unobserved.sum()) == 750


def test_nested_masks():
    masks = generate_nested_masks(500, [0.05, 0.2, 0.4], seed=11)
    for smaller, larger in zip(masks, masks[1:]):
        assert not bool((smaller.observed & ~larger.observed).any())
        assert smaller.m_count < larger.m_count


def test_mask_fraction_range():
    with pytest.raises(ValidationError):
        generate_mask(10, 1.0, seed=0)


def test_mask_needs_an_observed_node():
    with pytest.raises(ValidationError):
        ObservationMask(np.zeros(4, dtype=bool))


def test_node_files_round_trip(tmp_path, generator):
    values = torch.randn(25, generator=generator, dtype=torch.float64)
    save_node_vector(tmp_path / 'y.txt', values)
    assert torch.equal(load_node_vector(tmp_path / 'y.txt'), values)

    mask = generate_mask(25, 0.4, seed=2)
    save_mask(tmp_path / 'mask.txt', mask)
    assert torch.equal(load_mask(tmp_path / 'mask.txt').observed, mask.observed)


def dense_normalized(graph):
    scale = torch.diag(graph.degrees ** -0.5)
    return scale @ graph.to_dense() @ scale


def test_normalized_adjacency_matches_dense(generator):
    graph = delaunay(60, seed=9, weighted=True)
    v = torch.randn(60, 2, generator=generator, dtype=torch.float64)
    expected = dense_normalized(graph) @ v
    assert torch.allclose(normalized_adjacency_apply(graph, v), expected, rtol=0.0, atol=1e-12)


@pytest.mark.parametrize('a, b', [(1, 3), (2, 2), (2, 3)])
def test_k_hop_composes(a, b):
    graph = delaunay(40, seed=6)
    nested = k_hop_graph(k_hop_graph(graph, a), b)
    assert torch.equal(nested.to_dense() != 0, k_hop_graph(graph, a * b).to_dense() != 0)


def test_graph_hash_is_computed_once(monkeypatch):
    graph = delaunay(50, seed=4)
    first = graph.graph_hash()

    def fail():
        raise AssertionError('hash recomputed')

    monkeypatch.setattr(hashlib, 'sha256', fail)
    assert graph.graph_hash() is first
