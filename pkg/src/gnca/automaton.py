"""Recurrent application of the transition rule: rollouts, damage, recording."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .egc import AutomatonState, EGCParams, egc_forward
from .graphs import Graph, radius_graph
from .simulators import Trajectory
from .tensor import NonFiniteError, Tensor, concat, linear, row_norm


class RolloutDivergence(NonFiniteError):
    """A rollout produced a non-finite state; ``step`` is the failing index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"non-finite state at rollout step {step}: {cause}")
        self.step = step


@dataclass
class RolloutRecord:
    """All intermediate states of one rollout (t+1 entries, initial included)."""

    states: list[AutomatonState]
    losses: list[float] | None = None

    @property
    def final(self) -> AutomatonState:
        return self.states[-1]


def init_state(
    graph: Graph,
    coord_dim: int,
    seed: int,
    sigma: float,
    h_init: str = "ones",
    hidden_dim: int = 16,
    velocity: np.ndarray | None = None,
    speed_encoder=None,
) -> AutomatonState:
    """Fresh automaton state: Gaussian coordinates, features per ``h_init``.

    ``ones`` and ``randn`` produce velocity-free states. ``from_speed``
    attaches velocities (given, or Gaussian like the coordinates) and derives
    features by passing per-node speed through ``speed_encoder``, a
    LinearParams-style object that trains jointly with the rule.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    X = Tensor(rng.normal(0.0, sigma, size=(graph.n_nodes, coord_dim)))
    if h_init == "ones":
        return AutomatonState(X, Tensor(np.ones((graph.n_nodes, hidden_dim))))
    if h_init == "randn":
        return AutomatonState(X, Tensor(rng.normal(size=(graph.n_nodes, hidden_dim))))
    if h_init == "from_speed":
        if speed_encoder is None:
            raise ValueError("from_speed needs a speed_encoder linear layer")
        V = Tensor(velocity) if velocity is not None else Tensor(
            rng.normal(0.0, sigma, size=(graph.n_nodes, coord_dim))
        )
        H = linear(row_norm(V), speed_encoder.w, speed_encoder.b)
        return AutomatonState(X, H, V)
    raise ValueError(f"unknown h_init '{h_init}'")


def state_from_frame(positions: np.ndarray, velocities: np.ndarray, speed_encoder) -> AutomatonState:
    """Automaton state for a simulator frame; features come from speeds."""
    V = Tensor(velocities)
    H = linear(row_norm(V), speed_encoder.w, speed_encoder.b)
    return AutomatonState(Tensor(positions), H, V)


def rollout(
    params: EGCParams,
    graph: Graph,
    state: AutomatonState,
    t: int,
    record: bool = False,
    loss_fn: Callable[[AutomatonState], float] | None = None,
):
    """Apply the transition rule ``t`` times (t=0 returns the input unchanged).

    With ``record`` the full state sequence (and per-step losses, when a
    ``loss_fn`` is supplied) comes back as a :class:`RolloutRecord`.
    Non-finite states abort with the offending step index.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    states = [state]
    losses = [loss_fn(state)] if (record and loss_fn is not None) else None
    for step in range(t):
        try:
            state = egc_forward(params, graph, state)
        except NonFiniteError as exc:
            raise RolloutDivergence(step + 1, exc) from exc
        if record:
            states.append(state)
            if losses is not None:
                losses.append(loss_fn(state))
    if record:
        return RolloutRecord(states, losses)
    return state


def damage(
    state: AutomatonState,
    kind: str,
    magnitude: float,
    radius: float | None = None,
    seed: int = 0,
) -> AutomatonState:
    """Perturb coordinates with Gaussian noise; features/velocities untouched.

    ``global`` hits every node; ``local`` picks one node uniformly and hits
    only nodes within ``radius`` of it (radius 0 degenerates to that node).
    """
    if magnitude <= 0:
        raise ValueError("magnitude must be positive")
    rng = np.random.default_rng(seed)
    X = state.X.values.copy()
    if kind == "global":
        X += rng.normal(0.0, magnitude, size=X.shape)
    elif kind == "local":
        if radius is None or radius < 0:
            raise ValueError("local damage needs radius >= 0")
        center = int(rng.integers(X.shape[0]))
        hit = np.linalg.norm(X - X[center], axis=1) <= radius
        X[hit] += rng.normal(0.0, magnitude, size=(int(hit.sum()), X.shape[1]))
    else:
        raise ValueError(f"unknown damage kind '{kind}'")
    return AutomatonState(Tensor(X), state.H.detach(), None if state.V is None else state.V.detach())


def default_damage_magnitude(coords: np.ndarray) -> float:
    """0.2 x RMS node distance from the centroid."""
    centered = coords - coords.mean(axis=0, keepdims=True)
    return 0.2 * float(np.sqrt((centered * centered).sum(axis=1).mean()))


def default_damage_radius(coords: np.ndarray) -> float:
    """25% of the point-cloud diameter."""
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    return 0.25 * float(d.max())


def dynamic_step(params: EGCParams, state: AutomatonState, radius: float) -> AutomatonState:
    """One velocity-preset step on the radius graph of the current coordinates."""
    graph = radius_graph(state.X.values, radius)
    return egc_forward(params, graph, state)


def dynamic_rollout(
    params: EGCParams, state: AutomatonState, radius: float, t: int
) -> Trajectory:
    """Roll the velocity-preset rule with the graph rebuilt before every step."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if state.V is None:
        raise ValueError("dynamic rollout needs a velocity-bearing state")
    n, dim = state.X.shape
    positions = np.empty((t + 1, n, dim))
    velocities = np.empty_like(positions)
    positions[0], velocities[0] = state.X.values, state.V.values
    for step in range(t):
        try:
            state = dynamic_step(params, state, radius)
        except NonFiniteError as exc:
            raise RolloutDivergence(step + 1, exc) from exc
        positions[step + 1], velocities[step + 1] = state.X.values, state.V.values
    return Trajectory(positions, velocities)


def stack_states(states: list[AutomatonState]) -> AutomatonState:
    """Disjoint-union batching: concatenate per-node fields row-wise."""
    has_v = states[0].V is not None
    X = concat([s.X for s in states], axis=0)
    H = concat([s.H for s in states], axis=0)
    V = concat([s.V for s in states], axis=0) if has_v else None
    return AutomatonState(X, H, V)
