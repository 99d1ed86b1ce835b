import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcomp.domain_grid import (
    CARDINAL,
    build_grid,
    build_neighbor_graph,
    normalize_township,
)
from gridcomp.errors import InvalidArgumentError


def test_single_cell_grid():
    grid = build_grid(1, 1, 0)
    assert grid.n_cells == 1
    graph = build_neighbor_graph(grid, CARDINAL)
    assert graph.neighbors(0) == []


def test_2x2_grid_each_cell_two_cardinal_neighbors():
    grid = build_grid(2, 2, 0)
    assert grid.n_cells == 4
    graph = build_neighbor_graph(grid, CARDINAL)
    assert np.all(graph.degree(CARDINAL) == 2)


def test_buffered_grid_cell_count():
    # 146 x 180 core plus a 6-cell ring: (146+12) * (180+12)
    grid = build_grid(146, 180, 6)
    assert grid.n_cells == 30336
    assert grid.n_core_cells == 146 * 180


def test_invalid_dimensions_rejected():
    with pytest.raises(InvalidArgumentError):
        build_grid(0, 5)
    with pytest.raises(InvalidArgumentError):
        build_grid(5, -1)
    with pytest.raises(InvalidArgumentError):
        build_grid(5, 5, -1)


def test_3x3_cardinal_center_degree():
    grid = build_grid(3, 3, 0)
    graph = build_neighbor_graph(grid, CARDINAL)
    center = grid.index(1, 1)
    assert graph.degree(CARDINAL)[center] == 4


def test_3x3_extended_center_classes():
    grid = build_grid(3, 3, 0)
    graph = build_neighbor_graph(grid, "extended")
    center = grid.index(1, 1)
    assert graph.degree(CARDINAL)[center] == 4
    assert graph.degree("diagonal")[center] == 4
    # the (+-2, 0) / (0, +-2) offsets all fall outside a 3x3 lattice
    assert graph.degree("second_order")[center] == 0


def test_5x5_extended_center_classes():
    grid = build_grid(5, 5, 0)
    graph = build_neighbor_graph(grid, "extended")
    center = grid.index(2, 2)
    assert graph.degree(CARDINAL)[center] == 4
    assert graph.degree("diagonal")[center] == 4
    assert graph.degree("second_order")[center] == 4


def test_corner_and_edge_cardinal_degrees():
    grid = build_grid(4, 3, 0)
    graph = build_neighbor_graph(grid, CARDINAL)
    deg = graph.degree(CARDINAL)
    assert deg[grid.index(0, 0)] == 2
    assert deg[grid.index(0, 1)] == 3
    assert deg[grid.index(1, 1)] == 4


@settings(max_examples=40, deadline=None)
@given(
    nx=st.integers(1, 6),
    ny=st.integers(1, 6),
    buffer=st.integers(0, 2),
    order=st.sampled_from([CARDINAL, "extended"]),
)
def test_graph_symmetry_property(nx, ny, buffer, order):
    grid = build_grid(nx, ny, buffer)
    graph = build_neighbor_graph(grid, order)
    for kind, e in graph.edges.items():
        fwd = set(map(tuple, e))
        rev = set(map(tuple, e[:, ::-1]))
        assert fwd == rev, f"{kind} edges not symmetric"


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(1, 6), ny=st.integers(1, 6))
def test_handshake_lemma(nx, ny):
    grid = build_grid(nx, ny, 0)
    graph = build_neighbor_graph(grid, CARDINAL)
    deg_sum = int(graph.degree(CARDINAL).sum())
    n_undirected = graph.edges[CARDINAL].shape[0] // 2
    assert deg_sum == 2 * n_undirected


def test_buffered_interior_matches_unbuffered_graph():
    inner = build_grid(3, 4, 0)
    outer = build_grid(3, 4, 2)
    g_in = build_neighbor_graph(inner, CARDINAL)
    g_out = build_neighbor_graph(outer, CARDINAL)
    core = outer.core_cells()
    remap = {int(full): i for i, full in enumerate(core)}
    inner_edges = set(map(tuple, g_in.edges[CARDINAL]))
    restricted = set()
    core_set = set(remap)
    for i, k in g_out.edges[CARDINAL]:
        if int(i) in core_set and int(k) in core_set:
            restricted.add((remap[int(i)], remap[int(k)]))
    assert restricted == inner_edges


def test_normalize_township_symmetric():
    grid = build_grid(4, 4, 0)
    ov = normalize_township("t", [(7, 2.0), (8, 2.0)], grid)
    assert dict(zip(ov.cells, ov.weights)) == {7: 0.5, 8: 0.5}


def test_normalize_township_single_cell():
    grid = build_grid(4, 4, 0)
    ov = normalize_township("t", [(3, 1.0)], grid)
    assert dict(zip(ov.cells, ov.weights)) == {3: 1.0}


def test_normalize_township_proportional():
    grid = build_grid(4, 4, 0)
    ov = normalize_township("t", [(1, 1.0), (2, 3.0)], grid)
    assert dict(zip(ov.cells, ov.weights)) == {1: 0.25, 2: 0.75}


def test_normalize_township_drops_zero_area_and_validates():
    grid = build_grid(4, 4, 0)
    ov = normalize_township("t", [(1, 1.0), (2, 0.0)], grid)
    assert list(ov.cells) == [1]
    with pytest.raises(InvalidArgumentError):
        normalize_township("t", [(1, 0.0)], grid)
    with pytest.raises(InvalidArgumentError):
        normalize_township("t", [(99, 1.0)], grid)


def test_normalize_township_rejects_buffer_cells():
    grid = build_grid(2, 2, 1)  # 4x4 lattice, core is the inner 2x2
    assert not grid.is_core(0)
    with pytest.raises(InvalidArgumentError):
        normalize_township("t", [(0, 1.0)], grid)
    core_cell = int(grid.core_cells()[0])
    ov = normalize_township("t", [(core_cell, 2.0)], grid)
    assert list(ov.cells) == [core_cell]


@settings(max_examples=30, deadline=None)
@given(
    areas=st.lists(st.floats(0.0, 50.0), min_size=1, max_size=6).filter(
        lambda xs: sum(xs) > 1e-6
    )
)
def test_normalize_township_weights_sum_to_one(areas):
    grid = build_grid(3, 3, 0)
    entries = [(i % 9, a) for i, a in enumerate(areas)]
    ov = normalize_township("t", entries, grid)
    assert abs(ov.weights.sum() - 1.0) < 1e-12
    assert np.all(ov.weights > 0)
