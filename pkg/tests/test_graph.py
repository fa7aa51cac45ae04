import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structconv.graph import (
    EXAMPLE_ADJACENCY, Asymmetric, NegativeEntry, NonSquare, bfs_distance, hop_mask, lattice_graph,
    load_adjacency_csv, save_adjacency_csv, save_mask_csv, validate_graph,
)


def brute_force_distance(edges, f, src, dst):
    """Shortest path length by enumerating simple paths (tiny graphs only)."""
    if src == dst:
        return 0
    best = np.inf
    others = [v for v in range(f) if v not in (src, dst)]
    for r in range(len(others) + 1):
        for mid in itertools.permutations(others, r):
            path = (src,) + mid + (dst,)
            if all((a, b) in edges or (b, a) in edges for a, b in zip(path, path[1:])):
                best = min(best, len(path) - 1)
    return best


EDGES5 = {(0, 1), (0, 4), (1, 2), (1, 3), (3, 4)}


def test_example_graph_is_valid():
    g = validate_graph(EXAMPLE_ADJACENCY)
    assert g.f == 5
    np.testing.assert_array_equal(g.adjacency, np.array(EXAMPLE_ADJACENCY, float))


def test_identity_is_valid():
    g = validate_graph(np.eye(3))
    assert g.f == 3 and not g.edge_pattern().any()


def test_non_square_rejected():
    with pytest.raises(NonSquare):
        validate_graph([[1, 0, 0], [0, 1, 0]])


def test_asymmetric_names_pair():
    with pytest.raises(Asymmetric, match=r"\[0\]\[2\]"):
        validate_graph([[1, 0, 1], [0, 1, 0], [0, 0, 1]])


def test_negative_names_pair():
    with pytest.raises(NegativeEntry, match=r"\(0, 1\)"):
        validate_graph([[1, -1], [-1, 1]])


def test_hop1_matches_nonzero_pattern(g5):
    np.testing.assert_array_equal(hop_mask(g5, 1).mask, g5.adjacency != 0)


def test_hop0_is_identity(g5):
    np.testing.assert_array_equal(hop_mask(g5, 0).mask, np.eye(5, dtype=bool))


def test_hop2_row_of_node_2(g5):
    # node 2 (0-based) reaches 0, 1, 2, 3 within two hops; 4 is three hops away
    np.testing.assert_array_equal(hop_mask(g5, 2).mask[2], [True, True, True, True, False])
    assert brute_force_distance(EDGES5, 5, 2, 4) == 3


def test_bfs_distances_from_node_2(g5):
    np.testing.assert_array_equal(bfs_distance(g5, 2), [2, 1, 0, 2, 3])
    for j in range(5):
        assert bfs_distance(g5, 2)[j] == brute_force_distance(EDGES5, 5, 2, j)


def test_bfs_single_and_disconnected():
    np.testing.assert_array_equal(bfs_distance(validate_graph([[1]]), 0), [0])
    d = bfs_distance(validate_graph(np.eye(2)), 0)
    assert d[0] == 0 and np.isinf(d[1])
    with pytest.raises(IndexError):
        bfs_distance(validate_graph(np.eye(2)), 2)


def test_zero_diagonal_still_self_connected():
    g = validate_graph([[0, 1], [1, 0]])
    assert hop_mask(g, 0).mask.all(axis=None) == False  # noqa: E712
    assert hop_mask(g, 1).mask[0, 0] and hop_mask(g, 1).mask[1, 1]


def test_lattice_path():
    g = lattice_graph(1, 4, "four")
    np.testing.assert_array_equal(hop_mask(g, 1).mask[1], [True, True, True, False])


def test_lattice_eight_center_is_full_3x3():
    assert hop_mask(lattice_graph(3, 3, "eight"), 1).mask[4].all()


def test_lattice_four_center_is_cross():
    row = hop_mask(lattice_graph(3, 3, "four"), 1).mask[4]
    assert row.sum() == 5
    np.testing.assert_array_equal(np.flatnonzero(row), [1, 3, 4, 5, 7])


@pytest.mark.parametrize("rows,cols", [(3, 3), (4, 5), (6, 4)])
def test_lattice_interior_footprint_is_image_mask(rows, cols):
    m = hop_mask(lattice_graph(rows, cols, "eight"), 1).mask
    for r in range(1, rows - 1):
        for c in range(1, cols - 1):
            expect = {(r + dr) * cols + c + dc for dr in (-1, 0, 1) for dc in (-1, 0, 1)}
            assert set(np.flatnonzero(m[r * cols + c])) == expect


@st.composite
def random_graphs(draw):
    f = draw(st.integers(1, 12))
    bits = draw(st.lists(st.booleans(), min_size=f * f, max_size=f * f))
    a = np.array(bits, float).reshape(f, f)
    a = np.triu(a, 1)
    return validate_graph(a + a.T + np.eye(f) * draw(st.sampled_from([0.0, 1.0, 2.0])))


@settings(max_examples=60, deadline=None)
@given(random_graphs(), st.integers(0, 12))
def test_hop_mask_matches_bfs(g, k):
    m = hop_mask(g, k).mask
    bfs = np.array([bfs_distance(g, i) <= k for i in range(g.f)])
    np.testing.assert_array_equal(m, bfs)
    np.testing.assert_array_equal(m, m.T)
    assert m.diagonal().all()
    assert not (m & ~hop_mask(g, k + 1).mask).any()


@settings(max_examples=30, deadline=None)
@given(random_graphs())
def test_connected_graph_full_reach(g):
    if np.isfinite(bfs_distance(g, 0)).all():
        assert hop_mask(g, g.f - 1).mask.all()


def test_validate_does_not_normalize():
    a = [[3.5, 0.25], [0.25, 0.0]]
    np.testing.assert_array_equal(validate_graph(a).adjacency, a)


def test_csv_round_trip(tmp_path, g5):
    save_adjacency_csv(g5, tmp_path / "a.csv")
    np.testing.assert_array_equal(load_adjacency_csv(tmp_path / "a.csv").adjacency, g5.adjacency)
    save_mask_csv(hop_mask(g5, 1), tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[2] == "0,1,1,0,0"
