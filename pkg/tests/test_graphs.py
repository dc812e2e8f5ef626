"""Graph builders, generators, ingestion, splits, negative sampling."""

import numpy as np
import networkx as nx
import pytest

from gnca.graphs import (
    DatasetSplit,
    Graph,
    GeometricGraph,
    disjoint_union,
    gen_community,
    gen_planar,
    gen_sbm,
    grid2d,
    knn_graph,
    load_edge_list,
    load_point_cloud,
    negative_sample,
    radius_graph,
    save_edge_list,
    split,
    torus3d,
)
from oracles import naive_knn_edges, naive_radius_edges


def edge_set(g: Graph) -> set:
    return {(int(i), int(j)) for i, j in g.edges}


def test_graph_invariants():
    g = Graph(3, [(0, 1), (1, 0)])
    assert g.is_symmetric()
    with pytest.raises(ValueError):
        Graph(2, [(0, 0)])
    with pytest.raises(ValueError):
        Graph(2, [(0, 5)])
    with pytest.raises(ValueError):
        Graph(2, [(0, 1)], edge_attr=np.ones((3, 1)))


def test_grid2d_counts_and_centering():
    g = grid2d(16, 16, 1.0)
    assert g.graph.n_nodes == 256
    assert g.graph.n_undirected_edges == 480
    assert np.abs(g.target_coords.mean(axis=0)).max() < 1e-12

    small = grid2d(2, 2, 1.0)
    assert small.graph.n_nodes == 4
    assert small.graph.n_undirected_edges == 4


def test_torus3d_counts_degree_and_surface():
    g = torus3d(16, 16, 2.0, 1.0)
    assert g.graph.n_nodes == 256
    assert g.graph.n_undirected_edges == 512
    degrees = np.bincount(g.graph.edges[:, 0], minlength=256)
    assert np.all(degrees == 4)
    # surface equation holds around the (re-centered) embedding
    c = g.target_coords
    ring = np.sqrt(c[:, 0] ** 2 + c[:, 1] ** 2)
    assert np.abs((ring - 2.0) ** 2 + c[:, 2] ** 2 - 1.0).max() < 1e-12


def test_load_point_cloud_collinear_and_duplicates(tmp_path):
    path = tmp_path / "points.txt"
    path.write_text("0 0\n1 0\n2 0\n")
    g = load_point_cloud(path, k=1)
    assert {(min(i, j), max(i, j)) for i, j in g.graph.edges} == {(0, 1), (1, 2)}

    path.write_text("0 0\n0 0\n2 0\n")  # duplicate rows: deterministic tie-break
    g = load_point_cloud(path, k=1)
    assert g.graph.n_nodes == 3

    path.write_text("0 0\nbroken row\n")
    with pytest.raises(ValueError):
        load_point_cloud(path, k=1)


def test_load_point_cloud_bunny_sized_file(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2503, 3))
    path = tmp_path / "cloud.txt"
    path.write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in pts))
    g = load_point_cloud(path, k=6)
    assert g.graph.n_nodes == 2503
    assert np.abs(g.target_coords.mean(axis=0)).max() < 1e-12
    assert abs(np.linalg.norm(g.target_coords, axis=1).mean() - 1.0) < 1e-9


def test_radius_graph_boundary_cases():
    coords = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert radius_graph(coords, 0.5).n_edges == 0
    assert edge_set(radius_graph(coords, 1.0)) == {(0, 1), (1, 0)}


def test_radius_and_knn_match_brute_force_on_random_clouds():
    rng = np.random.default_rng(42)
    for trial in range(100):
        n = int(rng.integers(5, 51))
        dim = int(rng.integers(2, 4))
        coords = rng.normal(size=(n, dim))
        radius = float(rng.uniform(0.3, 1.5))
        assert edge_set(radius_graph(coords, radius)) == naive_radius_edges(coords, radius)
        k = int(rng.integers(1, min(6, n)))
        assert edge_set(knn_graph(coords, k)) == naive_knn_edges(coords, k)


def test_gen_community_sizes_connectivity_determinism():
    graphs = gen_community(20, 12, 20, seed=1)
    assert len(graphs) == 20
    for g in graphs:
        assert 12 <= g.n_nodes <= 20
        assert g.is_symmetric()
        assert nx.is_connected(nx.from_edgelist(g.undirected_pairs()) if g.n_undirected_edges
                               else nx.empty_graph(g.n_nodes))
    again = gen_community(20, 12, 20, seed=1)
    assert all(np.array_equal(a.edges, b.edges) for a, b in zip(graphs, again))


def test_gen_planar_is_planar_by_independent_check():
    graphs = gen_planar(30, 12, 20, seed=2)
    assert len(graphs) == 30
    for g in graphs:
        assert 12 <= g.n_nodes <= 20
        nxg = nx.Graph(list(g.undirected_pairs()))
        nxg.add_nodes_from(range(g.n_nodes))
        is_planar, _ = nx.check_planarity(nxg)
        assert is_planar
        assert nx.is_connected(nxg)


def test_planar_square_with_diagonal():
    # Delaunay of a unit square yields the 4 sides plus one diagonal.
    from scipy.spatial import Delaunay

    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.01]])
    tri = Delaunay(pts)
    pairs = set()
    for s in tri.simplices:
        for a in range(3):
            i, j = int(s[a]), int(s[(a + 1) % 3])
            pairs.add((min(i, j), max(i, j)))
    assert len(pairs) == 5


def test_gen_sbm_sizes_determinism_and_density_contrast():
    graphs, blocks = gen_sbm(40, seed=3, return_blocks=True)
    assert len(graphs) == 40
    intra_density, inter_density = [], []
    for g, lab in zip(graphs, blocks):
        assert 44 <= g.n_nodes <= 187
        assert g.is_symmetric()
        same = lab[:, None] == lab[None, :]
        iu = np.triu_indices(g.n_nodes, k=1)
        adj = np.zeros((g.n_nodes, g.n_nodes), dtype=bool)
        for i, j in g.undirected_pairs():
            adj[i, j] = adj[j, i] = True
        intra_density.append(adj[iu][same[iu]].mean())
        inter_density.append(adj[iu][~same[iu]].mean())
    assert np.mean(intra_density) > np.mean(inter_density)
    again = gen_sbm(40, seed=3)
    assert all(np.array_equal(a.edges, b.edges) for a, b in zip(graphs, again))


def test_edge_list_round_trip(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("n 3\n0 1\n1 2\n")
    g = load_edge_list(path)
    assert g.n_nodes == 3
    assert g.undirected_pairs() == {(0, 1), (1, 2)}

    out = tmp_path / "copy.txt"
    save_edge_list(out, g)
    again = load_edge_list(out)
    assert again.n_nodes == g.n_nodes
    assert np.array_equal(again.edges, g.edges)

    path.write_text("n 2\n")
    empty = load_edge_list(path)
    assert empty.n_edges == 0

    path.write_text("n 2\n0 7\n")
    with pytest.raises(ValueError):
        load_edge_list(path)


def test_split_80_10_10():
    graphs = gen_community(10, 4, 6, seed=4)
    ds = split(graphs, seed=0)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (8, 1, 1)
    ids = [id(g) for part in (ds.train, ds.val, ds.test) for g in part]
    assert len(set(ids)) == 10


def test_negative_sampling():
    triangle = Graph(3, [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)])
    with pytest.raises(ValueError):
        negative_sample(triangle, 1, seed=0)

    path3 = Graph(3, [(0, 1), (1, 0), (1, 2), (2, 1)])
    neg = negative_sample(path3, 1, seed=0)
    assert neg.tolist() == [[0, 2]]


def test_disjoint_union_offsets():
    a = Graph(2, [(0, 1), (1, 0)])
    b = Graph(3, [(0, 2), (2, 0)])
    merged, offsets = disjoint_union([a, b])
    assert merged.n_nodes == 5
    assert offsets.tolist() == [0, 2, 5]
    assert edge_set(merged) == {(0, 1), (1, 0), (2, 4), (4, 2)}
