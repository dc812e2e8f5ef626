"""Convolution layer: component contracts, oracle equivalence, symmetries."""

import numpy as np
import pytest

from gnca.egc import (
    AutomatonState,
    LinearParams,
    Mlp,
    aggregate,
    coord_update,
    egc_forward,
    egnn_forward,
    make_egc_params,
    messages,
    node_update,
    normalize,
    velocity_update,
)
from gnca.graphs import Graph, radius_graph
from gnca.tensor import Tensor
from oracles import naive_egc_forward, random_isometry


def random_graph(rng, n, p=0.5, edge_dim=0):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if not pairs:
        pairs = [(0, 1)]
    edges = np.array(sorted({(i, j) for a, b in pairs for i, j in ((a, b), (b, a))}))
    attr = None
    if edge_dim:
        # symmetric per-pair attribute, like a charge product
        charge = rng.choice([-1.0, 1.0], size=n)
        attr = (charge[edges[:, 0]] * charge[edges[:, 1]])[:, None]
    return Graph(n, edges, attr)


def random_state(rng, n, dim, hidden=16, velocity=False):
    return AutomatonState(
        Tensor(rng.normal(size=(n, dim))),
        Tensor(rng.normal(size=(n, hidden))),
        Tensor(rng.normal(size=(n, dim))) if velocity else None,
    )


def zeroed(params):
    for _, t in params.named_tensors():
        t.values[...] = 0.0
    return params


def constant_mlp(in_dim, value):
    """Exact constant map: zero weights, constant bias, no activation."""
    return Mlp(
        [LinearParams(Tensor(np.zeros((in_dim, 1))), Tensor([[value]]))],
        [""],
    )


def test_zero_params_are_identity_with_norm_off():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 6)
    params = zeroed(make_egc_params("pattern", 2, seed=1, normalization="off"))
    st = random_state(rng, 6, 2)
    out = egc_forward(params, g, st)
    assert np.array_equal(out.X.values, st.X.values)
    assert np.array_equal(out.H.values, st.H.values)
    m = messages(params, g, st.X, st.H)
    assert np.array_equal(m.values, np.zeros_like(m.values))  # tanh(0) = 0


def test_messages_symmetric_for_coincident_equal_nodes():
    rng = np.random.default_rng(1)
    params = make_egc_params("pattern", 2, seed=2)
    g = Graph(2, [(0, 1), (1, 0)])
    x = np.tile(rng.normal(size=(1, 2)), (2, 1))
    h = np.tile(rng.normal(size=(1, 16)), (2, 1))
    m = messages(params, g, Tensor(x), Tensor(h))
    assert np.array_equal(m.values[0], m.values[1])


def test_coord_update_single_neighbor_formula():
    rng = np.random.default_rng(2)
    params = make_egc_params("pattern", 2, seed=3)
    w = 0.37
    params.coord_mlp = constant_mlp(params.message_dim, w)
    g = Graph(2, [(0, 1)])  # only node 0 observes node 1
    X = Tensor(rng.normal(size=(2, 2)))
    m = messages(params, g, X, Tensor(rng.normal(size=(2, 16))))
    out = coord_update(params, g, X, m)
    expected = X.values[0] + (X.values[0] - X.values[1]) * w
    assert np.allclose(out.values[0], expected, rtol=0, atol=1e-15)
    assert np.array_equal(out.values[1], X.values[1])  # isolated: identity


def test_aggregate_isolated_node_and_saturated_attention():
    rng = np.random.default_rng(3)
    params = make_egc_params("velocity", 3, seed=4)
    g = Graph(3, [(0, 1), (1, 0)])  # node 2 isolated
    m = Tensor(rng.normal(size=(2, params.message_dim)))
    plain = aggregate(params, g, m, attention=False)
    assert np.array_equal(plain.values[2], np.zeros(params.message_dim))

    params.attention_mlp = Mlp(
        [LinearParams(Tensor(np.zeros((params.message_dim, 1))), Tensor([[60.0]]))],
        ["sigmoid"],
    )  # sigmoid(60): saturated weight of 1 to 1e-26
    attn = aggregate(params, g, m, attention=True)
    assert np.allclose(attn.values, plain.values, rtol=0, atol=1e-12)

    params.attention_mlp = None
    with pytest.raises(ValueError):
        aggregate(params, g, m, attention=True)


def test_node_update_residual():
    rng = np.random.default_rng(4)
    params = make_egc_params("pattern", 2, seed=5)
    H = Tensor(rng.normal(size=(5, 16)))
    m = Tensor(rng.normal(size=(5, 32)))
    zeroed_params = zeroed(make_egc_params("pattern", 2, seed=6))
    out = node_update(zeroed_params, H, m)
    assert np.array_equal(out.values, H.values)  # zero mlp: residual identity

    out = node_update(params, H, m)
    mlp_out = params.hidden_mlp(Tensor(np.concatenate([H.values, m.values], axis=1)))
    assert np.allclose(out.values, mlp_out.values + H.values, rtol=0, atol=1e-15)


def test_velocity_update_free_drift_and_rest():
    rng = np.random.default_rng(5)
    params = make_egc_params("velocity", 3, seed=7)
    params.velocity_mlp = constant_mlp(params.hidden_dim + 1, 1.0)  # gate exactly 1
    params.coord_mlp = constant_mlp(params.message_dim, 0.0)
    g = random_graph(rng, 5)
    st = random_state(rng, 5, 3, velocity=True)
    m = messages(params, g, st.X, st.H)
    X_new, V_new = velocity_update(params, g, st.X, st.V, st.H, m)
    assert np.array_equal(V_new.values, st.V.values)
    assert np.array_equal(X_new.values, st.X.values + st.V.values)

    still = AutomatonState(st.X, st.H, Tensor(np.zeros((5, 3))))
    m = messages(params, g, still.X, still.H)
    X_new, V_new = velocity_update(params, g, still.X, still.V, still.H, m)
    assert np.array_equal(X_new.values, still.X.values)


def test_velocity_forward_composes_x_equals_x_plus_v():
    rng = np.random.default_rng(6)
    params = make_egc_params("velocity", 3, seed=8)
    g = random_graph(rng, 6)
    st = random_state(rng, 6, 3, velocity=True)
    out = egc_forward(params, g, st)
    assert np.array_equal(out.X.values, st.X.values + out.V.values)
    with pytest.raises(ValueError):
        egc_forward(params, g, random_state(rng, 6, 3, velocity=False))


def test_pairnorm_centering_and_row_norms():
    rng = np.random.default_rng(7)
    H = Tensor(rng.normal(size=(10, 16)))
    out = normalize(H, "pairnorm").values
    # column centering: output ignores any constant per-column shift
    shifted = normalize(Tensor(H.values + rng.normal(size=(1, 16))), "pairnorm").values
    assert np.abs(shifted - out).max() < 1e-9
    # every row rescaled to sqrt(16); the 1e-8 denominator guard bounds the
    # attainable accuracy at ~1e-8, hence the 1e-7 tolerance
    norms = np.linalg.norm(out, axis=1)
    assert np.abs(norms - 4.0).max() < 1e-7
    assert np.ptp(norms) < 1e-7

    degenerate = normalize(Tensor(np.ones((4, 16))), "pairnorm").values
    assert np.all(np.isfinite(degenerate))
    assert np.abs(degenerate).max() == 0.0


def test_nodenorm_unit_std_row_unchanged():
    row = np.array([[1.0, -1.0, 1.0, -1.0]])  # std exactly 1
    out = normalize(Tensor(row), "nodenorm").values
    assert np.array_equal(out, row)


def test_forward_matches_naive_oracle_on_100_random_instances():
    rng = np.random.default_rng(8)
    for trial in range(100):
        preset = ("pattern", "autoencode", "velocity")[trial % 3]
        norm = ("pairnorm", "nodenorm", "off")[trial % 3]
        dim = 2 if preset == "pattern" else 3
        edge_dim = 1 if trial % 6 == 5 else 0
        n = int(rng.integers(4, 7))
        g = random_graph(rng, n, edge_dim=edge_dim)
        params = make_egc_params(
            preset, dim, seed=int(rng.integers(2**31)), edge_dim=edge_dim, normalization=norm
        )
        st = random_state(rng, n, dim, velocity=(preset == "velocity"))
        out = egc_forward(params, g, st)
        X_ref, H_ref, V_ref = naive_egc_forward(
            params, g, st.X.values, st.H.values,
            V=None if st.V is None else st.V.values,
            edge_attr=g.edge_attr,
        )
        assert np.allclose(out.X.values, X_ref, rtol=0, atol=1e-12)
        assert np.allclose(out.H.values, H_ref, rtol=0, atol=1e-12)
        if preset == "velocity":
            assert np.allclose(out.V.values, V_ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("preset", ["pattern", "autoencode", "velocity"])
def test_single_step_equivariance(preset):
    rng = np.random.default_rng(9)
    dim = 3 if preset == "velocity" else 2
    for _ in range(20):
        n = int(rng.integers(4, 9))
        g = random_graph(rng, n)
        params = make_egc_params(preset, dim, seed=int(rng.integers(2**31)))
        st = random_state(rng, n, dim, velocity=(preset == "velocity"))
        out = egc_forward(params, g, st)
        q, b = random_isometry(rng, dim)
        st_t = AutomatonState(
            Tensor(st.X.values @ q.T + b),
            Tensor(st.H.values),
            None if st.V is None else Tensor(st.V.values @ q.T),
        )
        out_t = egc_forward(params, g, st_t)
        assert np.abs(out_t.X.values - (out.X.values @ q.T + b)).max() < 1e-9
        assert np.abs(out_t.H.values - out.H.values).max() < 1e-9
        if preset == "velocity":
            assert np.abs(out_t.V.values - out.V.values @ q.T).max() < 1e-9


def test_permutation_equivariance_exact():
    # Relabeling nodes (keeping edge-list row order) permutes outputs exactly.
    # Row-local feature normalizations preserve bitwise equality; pairnorm's
    # column centering sums rows in a different order, so it is checked to
    # tight tolerance instead.
    rng = np.random.default_rng(10)
    for norm, tol in (("off", 0.0), ("nodenorm", 0.0), ("pairnorm", 1e-12)):
        g = random_graph(rng, 7)
        params = make_egc_params("pattern", 2, seed=11, normalization=norm)
        st = random_state(rng, 7, 2)
        out = egc_forward(params, g, st)
        perm = rng.permutation(7)  # node i becomes node perm[i]
        g_p = Graph(7, perm[g.edges])
        x_p, h_p = np.empty((7, 2)), np.empty((7, 16))
        x_p[perm] = st.X.values
        h_p[perm] = st.H.values
        out_p = egc_forward(params, g_p, AutomatonState(Tensor(x_p), Tensor(h_p)))
        if tol == 0.0:
            assert np.array_equal(out_p.X.values[perm], out.X.values)
            assert np.array_equal(out_p.H.values[perm], out.H.values)
        else:
            assert np.abs(out_p.X.values[perm] - out.X.values).max() <= tol
            assert np.abs(out_p.H.values[perm] - out.H.values).max() <= tol


def test_locality_one_step():
    # Changing a node at graph distance >= 2 leaves a node's update unchanged
    # exactly (row-local normalizations; pairnorm couples all nodes globally).
    rng = np.random.default_rng(12)
    # path graph 0-1-2-3: node 3 is at distance >= 2 from nodes 0, 1
    g = Graph(4, [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)])
    for norm in ("off", "nodenorm"):
        params = make_egc_params("pattern", 2, seed=13, normalization=norm)
        st = random_state(rng, 4, 2)
        out = egc_forward(params, g, st)
        st2 = AutomatonState(Tensor(st.X.values.copy()), Tensor(st.H.values.copy()))
        st2.X.values[3] += 1.5
        st2.H.values[3] -= 2.0
        out2 = egc_forward(params, g, st2)
        assert np.array_equal(out2.X.values[:2], out.X.values[:2])
        assert np.array_equal(out2.H.values[:2], out.H.values[:2])


def test_egnn_stack():
    rng = np.random.default_rng(14)
    g = random_graph(rng, 6)
    st = random_state(rng, 6, 2)
    layers = [make_egc_params("pattern", 2, seed=s) for s in (20, 21, 22, 23)]
    one = egnn_forward(layers[:1], g, st)
    direct = egc_forward(layers[0], g, st)
    assert np.array_equal(one.X.values, direct.X.values)

    total = sum(p.n_parameters() for p in layers)
    assert total == 4 * layers[0].n_parameters()

    out = egnn_forward(layers, g, st)
    q, b = random_isometry(rng, 2)
    st_t = AutomatonState(Tensor(st.X.values @ q.T + b), Tensor(st.H.values))
    out_t = egnn_forward(layers, g, st_t)
    assert np.abs(out_t.X.values - (out.X.values @ q.T + b)).max() < 1e-9
    assert np.abs(out_t.H.values - out.H.values).max() < 1e-9


def test_parameter_counts_are_compact():
    # ~5K-parameter scale regardless of coordinate dimension
    for preset, dim in (("pattern", 2), ("pattern", 3), ("autoencode", 8), ("velocity", 3)):
        params = make_egc_params(preset, dim, seed=0)
        assert 3500 <= params.n_parameters() <= 6000
    base = make_egc_params("pattern", 2, seed=0).n_parameters()
    assert make_egc_params("pattern", 3, seed=0).n_parameters() == base
