"""Distance-based equivariant graph convolution (the transition rule).

One layer application proceeds as: per-edge messages from squared distances
and endpoint features, a coordinate (or velocity) update along difference
vectors weighted by a learned scalar, neighborhood aggregation (plain or
attention-weighted sum), a residual feature update, and a parameter-free
feature normalization. Coordinates enter only through differences and
distances, which is what makes the rule commute with rotations, reflections
and translations of the input coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import Graph
from .tensor import (
    Tensor,
    add,
    clip,
    concat,
    div,
    linear,
    mul,
    row_norm,
    scalar_mul,
    segment_mean,
    segment_sum,
    sigmoid,
    sqrt,
    sub,
    take_rows,
    tanh,
    tmean,
    tsum,
    square,
)

PRESETS = ("pattern", "autoencode", "velocity")
NORMALIZATIONS = ("pairnorm", "nodenorm", "off")

_EPS = 1e-8


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class Mlp:
    """Dense layers with a per-layer activation ("tanh", "sigmoid" or "")."""

    layers: list[LinearParams]
    activations: list[str]

    def __call__(self, x: Tensor) -> Tensor:
        out = x
        for layer, act in zip(self.layers, self.activations):
            out = linear(out, layer.w, layer.b)
            if act == "tanh":
                out = tanh(out)
            elif act == "sigmoid":
                out = sigmoid(out)
            elif act:
                raise ValueError(f"unknown activation '{act}'")
        return out

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[0]


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> LinearParams:
    bound = scale / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(1, fan_out)), requires_grad=True)
    return LinearParams(w, b)


def _init_mlp(rng, sizes, activations, last_scale: float = 1.0) -> Mlp:
    layers = []
    for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = last_scale if li == len(sizes) - 2 else 1.0
        layers.append(_init_linear(rng, fan_in, fan_out, scale))
    return Mlp(layers, list(activations))


@dataclass
class EGCParams:
    """Weights of one convolution layer plus its structural configuration.

    The velocity preset adds an attention gate on message aggregation and a
    scalar gate on the previous velocity computed from [features, speed].
    """

    coord_dim: int
    hidden_dim: int
    message_dim: int
    edge_dim: int
    preset: str
    normalization: str
    attention: bool
    message_mlp: Mlp
    coord_mlp: Mlp
    hidden_mlp: Mlp
    attention_mlp: Mlp | None = None
    velocity_mlp: Mlp | None = None

    def mlps(self) -> list[tuple[str, Mlp]]:
        named = [
            ("message_mlp", self.message_mlp),
            ("coord_mlp", self.coord_mlp),
            ("hidden_mlp", self.hidden_mlp),
        ]
        if self.attention_mlp is not None:
            named.append(("attention_mlp", self.attention_mlp))
        if self.velocity_mlp is not None:
            named.append(("velocity_mlp", self.velocity_mlp))
        return named

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for mlp_name, mlp in self.mlps():
            for li, layer in enumerate(mlp.layers):
                out.append((f"{mlp_name}.{li}.w", layer.w))
                out.append((f"{mlp_name}.{li}.b", layer.b))
        return out

    def n_parameters(self) -> int:
        return sum(t.values.size for _, t in self.named_tensors())


def make_egc_params(
    preset: str,
    coord_dim: int,
    seed: int,
    hidden_dim: int = 16,
    message_dim: int = 32,
    edge_dim: int = 0,
    normalization: str = "pairnorm",
    attention: bool | None = None,
) -> EGCParams:
    """Build a freshly initialized layer for one of the task presets.

    Weights are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; the final
    coordinate-gate layer is scaled down by 0.01 so early recurrent rollouts
    move gently.
    """
    if preset not in PRESETS:
        raise ValueError(f"preset must be one of {PRESETS}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    h, m, e = hidden_dim, message_dim, edge_dim
    rng = np.random.default_rng(seed)
    message_mlp = _init_mlp(rng, [2 * h + e + 1, m, m], ["tanh", "tanh"])
    attention_mlp = None
    velocity_mlp = None
    if preset == "velocity":
        if attention is None:
            attention = True
        coord_mlp = _init_mlp(rng, [m, h // 2, 1], ["tanh", ""], last_scale=0.01)
        attention_mlp = _init_mlp(rng, [m, 1], ["sigmoid"])
        velocity_mlp = _init_mlp(rng, [h + 1, m, 1], ["tanh", "tanh"])
    else:
        if attention is None:
            attention = False
        coord_mlp = _init_mlp(rng, [m, m, 1], ["tanh", "tanh"], last_scale=0.01)
        if attention:
            attention_mlp = _init_mlp(rng, [m, 1], ["sigmoid"])
    hidden_mlp = _init_mlp(rng, [m + h, h, h], ["tanh", ""])
    return EGCParams(
        coord_dim=coord_dim,
        hidden_dim=h,
        message_dim=m,
        edge_dim=e,
        preset=preset,
        normalization=normalization,
        attention=bool(attention),
        message_mlp=message_mlp,
        coord_mlp=coord_mlp,
        hidden_mlp=hidden_mlp,
        attention_mlp=attention_mlp,
        velocity_mlp=velocity_mlp,
    )


@dataclass
class AutomatonState:
    """Per-node coordinates X, features H, and optional velocities V."""

    X: Tensor
    H: Tensor
    V: Tensor | None = None

    def __post_init__(self):
        if self.X.values.ndim != 2 or self.H.values.ndim != 2:
            raise ValueError("state fields must be matrices")
        if self.X.shape[0] != self.H.shape[0]:
            raise ValueError("X and H disagree on node count")
        if self.V is not None and self.V.shape != self.X.shape:
            raise ValueError("V must match X's shape")

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    def detach(self) -> "AutomatonState":
        return AutomatonState(
            self.X.detach(), self.H.detach(), None if self.V is None else self.V.detach()
        )


def _edge_diffs(graph: Graph, X: Tensor) -> Tensor:
    """Per-edge difference x_i - x_j for edges (i, j)."""
    recv, src = graph.edges[:, 0], graph.edges[:, 1]
    return sub(take_rows(X, recv), take_rows(X, src))


def messages(
    params: EGCParams,
    graph: Graph,
    X: Tensor,
    H: Tensor,
    edge_attr: np.ndarray | None = None,
    diff: Tensor | None = None,
) -> Tensor:
    """Per-edge message from [squared distance, h_i, h_j, edge attributes]."""
    recv, src = graph.edges[:, 0], graph.edges[:, 1]
    if diff is None:
        diff = _edge_diffs(graph, X)
    dist2 = tsum(square(diff), axis=1, keepdims=True)
    parts = [dist2, take_rows(H, recv), take_rows(H, src)]
    if params.edge_dim:
        if edge_attr is None:
            raise ValueError("params expect edge attributes but none were given")
        parts.append(Tensor(edge_attr))
    feats = concat(parts, axis=1)
    if feats.shape[1] != params.message_mlp.in_dim:
        raise ValueError(
            f"message input width {feats.shape[1]} != mlp width {params.message_mlp.in_dim}"
        )
    return params.message_mlp(feats)


def coord_update(
    params: EGCParams, graph: Graph, X: Tensor, m_edges: Tensor, diff: Tensor | None = None
) -> Tensor:
    """x_i plus the neighborhood mean of (x_i - x_j) scaled by the learned gate."""
    if diff is None:
        diff = _edge_diffs(graph, X)
    gate = params.coord_mlp(m_edges)
    shift = segment_mean(mul(diff, gate), graph.edges[:, 0], graph.n_nodes)
    return add(X, shift)


def aggregate(params: EGCParams, graph: Graph, m_edges: Tensor, attention: bool) -> Tensor:
    """Sum incoming messages per node, optionally attention-weighted."""
    if attention:
        if params.attention_mlp is None:
            raise ValueError("attention requested but params carry no attention mlp")
        m_edges = mul(m_edges, params.attention_mlp(m_edges))
    return segment_sum(m_edges, graph.edges[:, 0], graph.n_nodes)


def node_update(params: EGCParams, H: Tensor, m_agg: Tensor) -> Tensor:
    """Residual feature update h_i + mlp([h_i, m_i])."""
    return add(params.hidden_mlp(concat([H, m_agg], axis=1)), H)


def velocity_update(
    params: EGCParams,
    graph: Graph,
    X: Tensor,
    V: Tensor,
    H: Tensor,
    m_edges: Tensor,
    diff: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Velocity-gated coordinate update; returns (X', V') with X' = X + V'."""
    if params.velocity_mlp is None:
        raise ValueError("params carry no velocity mlp")
    gate = params.velocity_mlp(concat([H, row_norm(V)], axis=1))
    if diff is None:
        diff = _edge_diffs(graph, X)
    shift = segment_mean(mul(diff, params.coord_mlp(m_edges)), graph.edges[:, 0], graph.n_nodes)
    V_new = add(mul(V, gate), shift)
    return add(X, V_new), V_new


def normalize(H: Tensor, mode: str) -> Tensor:
    """Feature normalization applied after every transition step.

    pairnorm: center columns, then rescale each row to norm sqrt(h).
    nodenorm: divide each row by the square root of its standard deviation.
    """
    if mode == "off":
        return H
    if mode == "pairnorm":
        centered = sub(H, tmean(H, axis=0, keepdims=True))
        denom = add(row_norm(centered), Tensor([[_EPS]]))
        return scalar_mul(div(centered, denom), float(np.sqrt(H.shape[1])))
    if mode == "nodenorm":
        centered = sub(H, tmean(H, axis=1, keepdims=True))
        var = tmean(square(centered), axis=1, keepdims=True)
        denom = clip(sqrt(sqrt(var)), _EPS, np.inf)
        return div(H, denom)
    raise ValueError(f"unknown normalization '{mode}'")


def egc_forward(
    params: EGCParams,
    graph: Graph,
    state: AutomatonState,
    preset: str | None = None,
) -> AutomatonState:
    """One transition step: messages, coordinate/velocity update, feature update."""
    preset = preset or params.preset
    if preset not in PRESETS:
        raise ValueError(f"preset must be one of {PRESETS}")
    if preset == "velocity" and state.V is None:
        raise ValueError("velocity preset needs a state with velocities")
    if state.X.shape[1] != params.coord_dim:
        raise ValueError(f"state coord dim {state.X.shape[1]} != params {params.coord_dim}")
    if state.H.shape[1] != params.hidden_dim:
        raise ValueError(f"state hidden dim {state.H.shape[1]} != params {params.hidden_dim}")

    diff = _edge_diffs(graph, state.X)
    m_edges = messages(params, graph, state.X, state.H, graph.edge_attr, diff=diff)
    if preset == "velocity":
        X_new, V_new = velocity_update(
            params, graph, state.X, state.V, state.H, m_edges, diff=diff
        )
    else:
        X_new = coord_update(params, graph, state.X, m_edges, diff=diff)
        V_new = None
    m_agg = aggregate(params, graph, m_edges, params.attention)
    H_new = normalize(node_update(params, state.H, m_agg), params.normalization)
    return AutomatonState(X_new, H_new, V_new)


def egnn_forward(
    layer_params: list[EGCParams], graph: Graph, state: AutomatonState
) -> AutomatonState:
    """Apply a stack of distinct convolution layers once each, in order."""
    if not layer_params:
        raise ValueError("need at least one layer")
    for params in layer_params:
        state = egc_forward(params, graph, state)
    return state
