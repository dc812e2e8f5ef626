"""Graph data model, geometric-graph builders, and synthetic datasets.

Edges are stored as a directed (E, 2) integer array where a row ``(i, j)``
means "node i observes neighbor j". All undirected constructions store both
directions explicitly. Builders are pure functions of their seed, so repeated
calls reproduce byte-identical graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError


@dataclass(frozen=True)
class Graph:
    """Directed edge-list graph with optional per-edge attributes."""

    n_nodes: int
    edges: np.ndarray
    edge_attr: np.ndarray | None = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        if self.n_nodes <= 0:
            raise ValueError("graph needs at least one node")
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
        if self.edge_attr is not None:
            attr = np.asarray(self.edge_attr, dtype=np.float64)
            if attr.ndim == 1:
                attr = attr[:, None]
            if attr.shape[0] != edges.shape[0]:
                raise ValueError("edge_attr length must equal edge count")
            object.__setattr__(self, "edge_attr", attr)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def n_undirected_edges(self) -> int:
        return len(self.undirected_pairs())

    def undirected_pairs(self) -> set[tuple[int, int]]:
        return {(min(i, j), max(i, j)) for i, j in self.edges}

    def is_symmetric(self) -> bool:
        have = {(int(i), int(j)) for i, j in self.edges}
        return all((j, i) in have for i, j in have)

    def neighbors(self, i: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == i, 1]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        if self.edges.size:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return a


@dataclass(frozen=True)
class GeometricGraph:
    """A graph together with target coordinates (centered at the origin)."""

    graph: Graph
    target_coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.target_coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] != self.graph.n_nodes:
            raise ValueError("target_coords must be (n_nodes, dim)")
        if not np.all(np.isfinite(coords)):
            raise ValueError("target coordinates must be finite")
        coords = coords - coords.mean(axis=0, keepdims=True)
        object.__setattr__(self, "target_coords", coords)

    @property
    def coord_dim(self) -> int:
        return self.target_coords.shape[1]


@dataclass
class DatasetSplit:
    train: list[Graph] = field(default_factory=list)
    val: list[Graph] = field(default_factory=list)
    test: list[Graph] = field(default_factory=list)


def _symmetrize(pairs: set[tuple[int, int]]) -> np.ndarray:
    """Sorted directed edge array containing both directions of each pair."""
    both = set()
    for i, j in pairs:
        if i == j:
            continue
        both.add((i, j))
        both.add((j, i))
    if not both:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(both), dtype=np.int64)


def _components(n: int, edges: np.ndarray) -> np.ndarray:
    """Connected-component label per node (union-find)."""
    parent = np.arange(n)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    return np.array([find(i) for i in range(n)])


def _connect(pairs: set[tuple[int, int]], n: int, rng: np.random.Generator) -> set[tuple[int, int]]:
    """Add uniformly chosen cross-component edges until connected."""
    while True:
        labels = _components(n, _symmetrize(pairs))
        if len(np.unique(labels)) <= 1:
            return pairs
        u = int(rng.integers(n))
        others = np.flatnonzero(labels != labels[u])
        v = int(others[rng.integers(others.size)])
        pairs.add((min(u, v), max(u, v)))


# ---------------------------------------------------------------------------
# geometric targets


def grid2d(rows: int, cols: int, spacing: float) -> GeometricGraph:
    """Regular 2D lattice with 4-neighbor connectivity."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs rows, cols >= 2")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    coords = np.array([(r * spacing, c * spacing) for r in range(rows) for c in range(cols)])
    pairs = set()
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                pairs.add((i, i + 1))
            if r + 1 < rows:
                pairs.add((i, i + cols))
    return GeometricGraph(Graph(rows * cols, _symmetrize(pairs)), coords)


def torus3d(rows: int, cols: int, R: float, r: float) -> GeometricGraph:
    """Torus embedding in R^3 with wrap-around 4-neighbor edges."""
    if rows < 3 or cols < 3:
        raise ValueError("torus needs rows, cols >= 3")
    if not (R > r > 0):
        raise ValueError("torus needs R > r > 0")
    coords = np.zeros((rows * cols, 3))
    pairs = set()
    for a in range(rows):
        theta = 2.0 * np.pi * a / rows
        for b in range(cols):
            phi = 2.0 * np.pi * b / cols
            i = a * cols + b
            coords[i] = (
                (R + r * np.cos(theta)) * np.cos(phi),
                (R + r * np.cos(theta)) * np.sin(phi),
                r * np.sin(theta),
            )
            pairs.add((min(i, a * cols + (b + 1) % cols), max(i, a * cols + (b + 1) % cols)))
            j = ((a + 1) % rows) * cols + b
            pairs.add((min(i, j), max(i, j)))
    return GeometricGraph(Graph(rows * cols, _symmetrize(pairs)), coords)


def load_point_cloud(path, k: int = 6) -> GeometricGraph:
    """Point-cloud file (one point per line, 2 or 3 reals) -> kNN graph.

    Points are centered and rescaled to unit average norm. Nearest-neighbor
    ties break toward the smaller node index, so duplicate points are legal.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed point row") from exc
            if len(vals) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 2 or 3 coordinates")
            rows.append(vals)
    coords = np.array(rows)
    if coords.ndim != 2 or len({len(r) for r in rows}) != 1:
        raise ValueError("point rows have inconsistent dimension")
    n = coords.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} needs at least {k + 1} points, got {n}")
    coords = coords - coords.mean(axis=0, keepdims=True)
    mean_norm = np.linalg.norm(coords, axis=1).mean()
    if mean_norm > 0:
        coords = coords / mean_norm
    return GeometricGraph(knn_graph(coords, k), coords)


def knn_graph(coords: np.ndarray, k: int) -> Graph:
    """Symmetric k-nearest-neighbor graph; ties break by smaller index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not (1 <= k < n):
        raise ValueError("need 1 <= k < n_nodes")
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    pairs = set()
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, d[i]))
        picked = [j for j in order if j != i][:k]
        for j in picked:
            pairs.add((min(i, int(j)), max(i, int(j))))
    return Graph(n, _symmetrize(pairs))


def radius_graph(coords: np.ndarray, radius: float) -> Graph:
    """Edges between all pairs with 0 < distance <= radius (inclusive)."""
    coords = np.asarray(coords, dtype=np.float64)
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = coords.shape[0]
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    mask = (d > 0) & (d <= radius)
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    edges = np.stack([src, dst], axis=1).astype(np.int64)
    return Graph(n, edges)


# ---------------------------------------------------------------------------
# synthetic graph datasets


def _bernoulli_pairs(rng: np.random.Generator, members_a, members_b, p: float) -> set[tuple[int, int]]:
    pairs = set()
    for i in members_a:
        for j in members_b:
            if i < j and rng.random() < p:
                pairs.add((i, j))
    return pairs


def gen_community(
    n_graphs: int,
    nodes_lo: int,
    nodes_hi: int,
    seed: int,
    p_in: float = 0.7,
    p_out: float = 0.05,
) -> list[Graph]:
    """Two-community random graphs with enforced connectivity."""
    if not (2 <= nodes_lo <= nodes_hi):
        raise ValueError("need 2 <= nodes_lo <= nodes_hi")
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(n_graphs):
        n = int(rng.integers(nodes_lo, nodes_hi + 1))
        half = n // 2
        comm_a = list(range(half))
        comm_b = list(range(half, n))
        pairs = _bernoulli_pairs(rng, comm_a, comm_a, p_in)
        pairs |= _bernoulli_pairs(rng, comm_b, comm_b, p_in)
        pairs |= _bernoulli_pairs(rng, comm_a, comm_b, p_out)
        pairs = _connect(pairs, n, rng)
        graphs.append(Graph(n, _symmetrize(pairs)))
    return graphs


def gen_planar(n_graphs: int, nodes_lo: int, nodes_hi: int, seed: int) -> list[Graph]:
    """Delaunay triangulations of uniform points in the unit square."""
    if not (3 <= nodes_lo <= nodes_hi):
        raise ValueError("need 3 <= nodes_lo <= nodes_hi")
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(n_graphs):
        n = int(rng.integers(nodes_lo, nodes_hi + 1))
        while True:
            points = rng.random((n, 2))
            try:
                tri = Delaunay(points)
            except QhullError:
                continue  # degenerate (collinear) sample: redraw
            break
        pairs = set()
        for simplex in tri.simplices:
            for a in range(3):
                i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
                pairs.add((min(i, j), max(i, j)))
        graphs.append(Graph(n, _symmetrize(pairs)))
    return graphs


def gen_sbm(
    n_graphs: int,
    blocks_lo: int = 2,
    blocks_hi: int = 5,
    seed: int = 0,
    p_in: float = 0.3,
    p_out: float = 0.005,
    block_lo: int = 20,
    block_hi: int = 40,
    total_lo: int = 44,
    total_hi: int = 187,
    return_blocks: bool = False,
):
    """Stochastic block model graphs; block sizes resampled to fit the total range.

    With ``return_blocks`` each graph comes with its per-node block labels
    (useful for verifying the intra/inter density contrast).
    """
    rng = np.random.default_rng(seed)
    graphs = []
    labels = []
    for _ in range(n_graphs):
        while True:
            k = int(rng.integers(blocks_lo, blocks_hi + 1))
            sizes = rng.integers(block_lo, block_hi + 1, size=k)
            if total_lo <= sizes.sum() <= total_hi:
                break
        bounds = np.cumsum(np.concatenate([[0], sizes]))
        n = int(bounds[-1])
        pairs = set()
        for b in range(k):
            members = list(range(bounds[b], bounds[b + 1]))
            pairs |= _bernoulli_pairs(rng, members, members, p_in)
        for b1 in range(k):
            for b2 in range(b1 + 1, k):
                pairs |= _bernoulli_pairs(
                    rng,
                    list(range(bounds[b1], bounds[b1 + 1])),
                    list(range(bounds[b2], bounds[b2 + 1])),
                    p_out,
                )
        pairs = _connect(pairs, n, rng)
        graphs.append(Graph(n, _symmetrize(pairs)))
        labels.append(np.repeat(np.arange(k), sizes))
    if return_blocks:
        return graphs, labels
    return graphs


# ---------------------------------------------------------------------------
# file ingestion


def load_edge_list(path) -> Graph:
    """Read "n <count>" header plus "i j" lines; result is symmetrized."""
    pairs = set()
    n = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if n is None:
                if len(parts) != 2 or parts[0] != "n":
                    raise ValueError(f"{path}:{lineno}: expected header 'n <count>'")
                n = int(parts[1])
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'i j'")
            i, j = int(parts[0]), int(parts[1])
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"{path}:{lineno}: node index out of range")
            if i != j:
                pairs.add((min(i, j), max(i, j)))
    if n is None:
        raise ValueError(f"{path}: missing header line")
    return Graph(n, _symmetrize(pairs))


def save_edge_list(path, graph: Graph) -> None:
    """Inverse of :func:`load_edge_list` (one line per undirected pair)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n {graph.n_nodes}\n")
        for i, j in sorted(graph.undirected_pairs()):
            fh.write(f"{i} {j}\n")


# ---------------------------------------------------------------------------
# splits and negative sampling


def split(graphs: list[Graph], seed: int) -> DatasetSplit:
    """Seeded 80/10/10 permutation split."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(graphs))
    a = int(0.8 * len(graphs))
    b = int(0.9 * len(graphs))
    return DatasetSplit(
        train=[graphs[i] for i in order[:a]],
        val=[graphs[i] for i in order[a:b]],
        test=[graphs[i] for i in order[b:]],
    )


def negative_sample(graph: Graph, n_neg: int, seed: int) -> np.ndarray:
    """Distinct unordered non-edges (no self-loops), seeded."""
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    present = graph.undirected_pairs()
    non_edges = [
        (i, j)
        for i in range(graph.n_nodes)
        for j in range(i + 1, graph.n_nodes)
        if (i, j) not in present
    ]
    if len(non_edges) < n_neg:
        raise ValueError(f"graph too dense: only {len(non_edges)} non-edges, asked for {n_neg}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(non_edges), size=n_neg, replace=False)
    return np.array([non_edges[i] for i in picked], dtype=np.int64)


def disjoint_union(graphs: list[Graph]) -> tuple[Graph, np.ndarray]:
    """Merge graphs into one block graph; returns it plus node offsets."""
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs])
    edge_blocks = [g.edges + off for g, off in zip(graphs, offsets[:-1]) if g.edges.size]
    edges = np.concatenate(edge_blocks, axis=0) if edge_blocks else np.zeros((0, 2), dtype=np.int64)
    attrs = None
    if any(g.edge_attr is not None for g in graphs):
        if not all(g.edge_attr is not None for g in graphs):
            raise ValueError("cannot union graphs with mixed edge_attr presence")
        blocks = [g.edge_attr for g in graphs if g.edges.size]
        attrs = np.concatenate(blocks, axis=0) if blocks else None
    return Graph(int(offsets[-1]), edges, attrs), offsets
