"""Recurrent rollouts: composition, equivariance, damage, stability."""

import numpy as np
import pytest

from gnca.automaton import (
    RolloutDivergence,
    damage,
    default_damage_magnitude,
    default_damage_radius,
    dynamic_rollout,
    init_state,
    rollout,
    state_from_frame,
)
from gnca.egc import AutomatonState, LinearParams, Mlp, egc_forward, make_egc_params
from gnca.graphs import Graph, grid2d
from gnca.tensor import Tensor
from gnca.training import loss_invariant
from oracles import random_isometry


def small_graph():
    return Graph(5, [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 4), (4, 3)])


def test_init_state_modes():
    g = small_graph()
    st = init_state(g, 2, seed=0, sigma=1.0)
    assert np.array_equal(st.H.values, np.ones((5, 16)))
    assert st.V is None

    again = init_state(g, 2, seed=0, sigma=1.0)
    assert np.array_equal(st.X.values, again.X.values)

    randn = init_state(g, 2, seed=0, sigma=1.0, h_init="randn")
    assert not np.array_equal(randn.H.values, np.ones((5, 16)))

    with pytest.raises(ValueError):
        init_state(g, 2, seed=0, sigma=0.0)

    enc = LinearParams(Tensor(np.ones((1, 16))), Tensor(np.zeros((1, 16))))
    speedy = init_state(g, 3, seed=1, sigma=1.0, h_init="from_speed", speed_encoder=enc)
    assert speedy.V is not None
    speeds = np.linalg.norm(speedy.V.values, axis=1, keepdims=True)
    assert np.allclose(speedy.H.values, np.tile(speeds, (1, 16)), rtol=0, atol=1e-15)


def test_rollout_identity_and_composition():
    g = small_graph()
    params = make_egc_params("pattern", 2, seed=1)
    st = init_state(g, 2, seed=2, sigma=1.0)
    same = rollout(params, g, st, 0)
    assert same is st

    whole = rollout(params, g, st, 9)
    part = rollout(params, g, rollout(params, g, st, 4), 5)
    assert np.array_equal(whole.X.values, part.X.values)
    assert np.array_equal(whole.H.values, part.H.values)


def test_rollout_record_and_losses():
    g = grid2d(3, 3, 1.0)
    params = make_egc_params("pattern", 2, seed=3)
    st = init_state(g.graph, 2, seed=4, sigma=0.5)
    rec = rollout(
        params, g.graph, st, 7, record=True,
        loss_fn=lambda s: loss_invariant(s.X, g.target_coords).item(),
    )
    assert len(rec.states) == 8
    assert len(rec.losses) == 8
    assert rec.final is rec.states[-1]


def test_rollout_equivariance_25_steps():
    rng = np.random.default_rng(5)
    g = small_graph()
    for preset in ("pattern", "velocity"):
        dim = 2 if preset == "pattern" else 3
        params = make_egc_params(preset, dim, seed=int(rng.integers(2**31)))
        X = rng.normal(size=(5, dim))
        H = rng.normal(size=(5, 16))
        V = rng.normal(size=(5, dim)) if preset == "velocity" else None
        st = AutomatonState(Tensor(X), Tensor(H), None if V is None else Tensor(V))
        t = int(rng.integers(1, 26))
        out = rollout(params, g, st, t)
        q, b = random_isometry(rng, dim)
        st_t = AutomatonState(
            Tensor(X @ q.T + b), Tensor(H), None if V is None else Tensor(V @ q.T)
        )
        out_t = rollout(params, g, st_t, t)
        assert np.abs(out_t.X.values - (out.X.values @ q.T + b)).max() < 1e-8
        assert np.abs(out_t.H.values - out.H.values).max() < 1e-8


def test_rollout_determinism_bitwise():
    g = grid2d(4, 4, 1.0)
    params = make_egc_params("pattern", 2, seed=8)
    a = rollout(params, g.graph, init_state(g.graph, 2, seed=9, sigma=0.5), 20)
    b = rollout(params, g.graph, init_state(g.graph, 2, seed=9, sigma=0.5), 20)
    assert np.array_equal(a.X.values, b.X.values)
    assert np.array_equal(a.H.values, b.H.values)


def test_rollout_divergence_reports_step():
    g = small_graph()
    params = make_egc_params("pattern", 2, seed=10)
    # saturate the coordinate gate at +1: node distances then grow
    # geometrically, and huge initial coordinates overflow within a few steps
    params.coord_mlp.layers[-1].w.values[...] = 0.0
    params.coord_mlp.layers[-1].b.values[...] = 50.0
    st = init_state(g, 2, seed=11, sigma=1.0)
    st = AutomatonState(Tensor(st.X.values * 1e150), st.H)
    with pytest.raises(RolloutDivergence) as exc:
        rollout(params, g, st, 50)
    assert 1 <= exc.value.step <= 50


def test_damage_modes():
    g = grid2d(4, 4, 1.0)
    st = init_state(g.graph, 2, seed=12, sigma=1.0)

    hit = damage(st, "global", magnitude=0.5, seed=3)
    assert np.all(np.any(hit.X.values != st.X.values, axis=1))
    assert np.array_equal(hit.H.values, st.H.values)

    local = damage(st, "local", magnitude=0.5, radius=0.0, seed=3)
    changed = np.any(local.X.values != st.X.values, axis=1)
    assert changed.sum() == 1  # radius 0 perturbs exactly the picked node

    tiny = damage(st, "global", magnitude=1e-300, seed=3)
    assert np.abs(tiny.X.values - st.X.values).max() < 1e-250

    with pytest.raises(ValueError):
        damage(st, "global", magnitude=0.0)
    with pytest.raises(ValueError):
        damage(st, "local", magnitude=0.1, radius=None)


def test_damage_defaults_scale_with_the_target():
    coords = grid2d(8, 8, 1.0).target_coords
    mag = default_damage_magnitude(coords)
    rad = default_damage_radius(coords)
    rms = np.sqrt((coords**2).sum(axis=1).mean())
    assert abs(mag - 0.2 * rms) < 1e-12
    assert abs(rad - 0.25 * np.linalg.norm(coords.max(0) - coords.min(0))) < 1e-9


def test_feature_norm_bounded_over_10000_steps():
    g = small_graph()
    params = make_egc_params("pattern", 2, seed=13)
    st = init_state(g, 2, seed=14, sigma=1.0)
    state = st
    for chunk in range(10):
        state = rollout(params, g, state, 1000)
        assert np.all(np.isfinite(state.H.values))
        assert np.linalg.norm(state.H.values, axis=1).max() < 100.0


def test_dynamic_rollout_pure_drift_when_edgeless():
    params = make_egc_params("velocity", 3, seed=15)
    params.velocity_mlp = Mlp(
        [LinearParams(Tensor(np.zeros((17, 1))), Tensor([[1.0]]))], [""]
    )  # gate exactly 1
    rng = np.random.default_rng(16)
    X = rng.normal(size=(4, 3)) * 10.0  # pairwise distances >> radius
    V = rng.normal(size=(4, 3))
    enc = LinearParams(Tensor(np.zeros((1, 16))), Tensor(np.zeros((1, 16))))
    st = state_from_frame(X, V, enc)
    traj = dynamic_rollout(params, st, radius=1e-6, t=5)
    assert traj.n_frames == 6
    for t in range(6):
        assert np.allclose(traj.positions[t], X + t * V, rtol=0, atol=1e-12)
        assert np.array_equal(traj.velocities[t], V)


def test_dynamic_rollout_equivariance():
    rng = np.random.default_rng(17)
    params = make_egc_params("velocity", 3, seed=18)
    enc = LinearParams(
        Tensor(rng.normal(size=(1, 16)), requires_grad=True),
        Tensor(rng.normal(size=(1, 16)), requires_grad=True),
    )
    X = rng.normal(size=(8, 3))
    V = rng.normal(size=(8, 3)) * 0.3
    traj = dynamic_rollout(params, state_from_frame(X, V, enc), radius=1.5, t=10)
    q, _ = random_isometry(rng, 3)
    traj_r = dynamic_rollout(params, state_from_frame(X @ q.T, V @ q.T, enc), radius=1.5, t=10)
    assert np.abs(traj_r.positions - traj.positions @ q.T).max() < 1e-8
    assert np.abs(traj_r.velocities - traj.velocities @ q.T).max() < 1e-8
