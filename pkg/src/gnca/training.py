"""Losses, the Adam optimizer, replay pools, and the three task trainers.

Training always follows the same shape: assemble a mini-batch of automaton
states, roll the transition rule for a sampled number of steps on one
disjoint-union graph, backpropagate the task loss through the whole rollout,
and write reached states back into a replay pool so later steps see
long-lived configurations. Every trainer is a deterministic function of its
seed and supports exact state capture for resumable runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .automaton import (
    damage,
    default_damage_magnitude,
    default_damage_radius,
    stack_states,
)
from .egc import AutomatonState, EGCParams, LinearParams, egc_forward, make_egc_params
from .graphs import Graph, GeometricGraph, DatasetSplit, disjoint_union, radius_graph
from .metrics import bce_score, f1_score
from .simulators import Trajectory
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    _sigmoid_values,
    clip,
    linear,
    log,
    mul,
    row_norm,
    scalar_mul,
    sigmoid,
    softplus,
    square,
    sub,
    take_rows,
    tsum,
    zero_grads,
)

# ---------------------------------------------------------------------------
# losses


def all_pairs(n: int) -> np.ndarray:
    """All ordered node pairs (i, j) with i != j."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = i != j
    return np.stack([i[keep], j[keep]], axis=1).astype(np.int64)


def sample_pairs(n: int, rng: np.random.Generator, per_node: int = 16) -> np.ndarray:
    """Random ordered pairs (16 per node by default) for large point clouds."""
    total = per_node * n
    i = rng.integers(0, n, size=total)
    j = rng.integers(0, n, size=total)
    while np.any(i == j):
        dup = i == j
        j[dup] = rng.integers(0, n, size=int(dup.sum()))
    return np.stack([i, j], axis=1).astype(np.int64)


def loss_invariant(X_pred: Tensor, target_coords, pairs: np.ndarray | None = None) -> Tensor:
    """Mean squared gap between predicted and target pairwise distances.

    With ``pairs=None`` the average runs over the full ordered node-pair set
    (diagonal included as exact zeros, hence the 1/n^2 normalization);
    otherwise over the supplied pair subset. Invariant under any rigid
    transformation of either argument.
    """
    target = target_coords.values if isinstance(target_coords, Tensor) else np.asarray(target_coords)
    n = X_pred.shape[0]
    if target.shape[0] != n:
        raise ValueError(f"node count mismatch: {n} vs {target.shape[0]}")
    if pairs is None:
        pairs = all_pairs(n)
        denom = float(n * n)
    else:
        pairs = np.asarray(pairs, dtype=np.int64)
        denom = float(pairs.shape[0])
    d_pred = row_norm(sub(take_rows(X_pred, pairs[:, 0]), take_rows(X_pred, pairs[:, 1])))
    d_target = np.linalg.norm(target[pairs[:, 0]] - target[pairs[:, 1]], axis=1, keepdims=True)
    return scalar_mul(tsum(square(sub(d_pred, Tensor(d_target)))), 1.0 / denom)


@dataclass
class DecoderParams:
    """Learnable positive scalars of the distance-to-edge-probability decoder.

    Stored unconstrained and mapped through softplus, so gradient steps can
    never push the effective values out of the positive range.
    """

    delta1_raw: Tensor
    delta2_raw: Tensor

    @property
    def delta1(self) -> float:
        return float(np.logaddexp(0.0, self.delta1_raw.values[0, 0]))

    @property
    def delta2(self) -> float:
        return float(np.logaddexp(0.0, self.delta2_raw.values[0, 0]))

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [("decoder.delta1_raw", self.delta1_raw), ("decoder.delta2_raw", self.delta2_raw)]


def make_decoder(delta1: float = 1.0, delta2: float = 1.0) -> DecoderParams:
    if delta1 <= 0 or delta2 <= 0:
        raise ValueError("decoder scalars must be positive")

    def raw(v: float) -> Tensor:
        return Tensor([[np.log(np.expm1(v))]], requires_grad=True)

    return DecoderParams(raw(delta1), raw(delta2))


def soft_adjacency_entries(X: Tensor, decoder: DecoderParams, pairs: np.ndarray) -> Tensor:
    """Edge probabilities for the given node pairs (differentiable path)."""
    pairs = np.asarray(pairs, dtype=np.int64)
    diff = sub(take_rows(X, pairs[:, 0]), take_rows(X, pairs[:, 1]))
    d2 = tsum(square(diff), axis=1, keepdims=True)
    delta1 = softplus(decoder.delta1_raw)
    delta2 = softplus(decoder.delta2_raw)
    return sigmoid(scalar_mul(mul(sub(d2, delta1), delta2), -1.0))


def soft_adjacency(X: np.ndarray, decoder: DecoderParams) -> np.ndarray:
    """Full soft adjacency matrix (symmetric, entries in (0,1)).

    The diagonal is populated like any other entry but is excluded from all
    downstream losses and scores.
    """
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return _sigmoid_values(-decoder.delta2 * (d2 - decoder.delta1))


def loss_bce(labels: np.ndarray, probs: Tensor, eps: float = 1e-7) -> Tensor:
    """Summed binary cross-entropy over the supplied entry set."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if labels.shape[0] != probs.shape[0]:
        raise ValueError("entry-set size mismatch")
    p = clip(probs, eps, 1.0 - eps)
    pos = mul(Tensor(labels), log(p))
    neg = mul(Tensor(1.0 - labels), log(sub(Tensor(np.ones_like(labels)), p)))
    return scalar_mul(tsum(pos) + tsum(neg), -1.0)


def loss_velocity(predicted: list[Tensor], truth: list[np.ndarray]) -> Tensor:
    """Summed squared velocity error over the predicted steps."""
    if len(predicted) != len(truth) or not predicted:
        raise ValueError("need equally many predicted and true velocity frames")
    total = None
    for pred, true in zip(predicted, truth):
        term = tsum(square(sub(pred, Tensor(np.asarray(true)))))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params: list[tuple[str, Tensor]], opt: OptimizerState) -> None:
    """One update; a non-finite gradient aborts before any state changes."""
    grads = []
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}'")
        grads.append((name, p, g))

    total_sq = sum(float((g * g).sum()) for _, _, g in grads)
    norm = np.sqrt(total_sq)
    scale = opt.clip_norm / norm if (opt.clip_norm > 0 and norm > opt.clip_norm) else 1.0

    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, p, g in grads:
        g = g * scale
        m = opt.m.setdefault(name, np.zeros_like(p.values))
        v = opt.v.setdefault(name, np.zeros_like(p.values))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p.values -= opt.lr * (update + opt.weight_decay * p.values)


@dataclass
class Plateau:
    """Reduce-on-plateau tracker; ``update`` returns True on a plateau event."""

    patience: int
    factor: float = 0.75
    floor: float = 1e-5
    min_rel: float = 1e-3
    best: float = np.inf
    bad: int = 0

    def update(self, value: float) -> bool:
        if value < self.best * (1.0 - self.min_rel) or not np.isfinite(self.best):
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            return True
        return False


# ---------------------------------------------------------------------------
# replay pool


@dataclass
class PoolEntry:
    X: np.ndarray
    H: np.ndarray
    V: np.ndarray | None = None
    last_loss: float = np.inf
    replacements: int = 0
    graph_id: int = 0


class StatePool:
    """Replay memory of automaton states with loss bookkeeping."""

    def __init__(self, entries: list[PoolEntry], max_replacements: int | None = None):
        self.entries = entries
        self.max_replacements = max_replacements

    def __len__(self) -> int:
        return len(self.entries)

    def worst_index(self) -> int:
        losses = np.array([e.last_loss for e in self.entries])
        return int(np.argmax(losses))

    def state(self, i: int) -> AutomatonState:
        e = self.entries[i]
        return AutomatonState(
            Tensor(e.X), Tensor(e.H), None if e.V is None else Tensor(e.V)
        )

    def write_back(self, i: int, state: AutomatonState, loss: float) -> None:
        e = self.entries[i]
        e.X = state.X.values.copy()
        e.H = state.H.values.copy()
        e.V = None if state.V is None else state.V.values.copy()
        e.last_loss = float(loss)
        e.replacements += 1


# ---------------------------------------------------------------------------
# shared trainer plumbing


@dataclass
class HistoryRow:
    step: int
    loss: float
    lr: float
    batch_size: int

    def format(self) -> str:
        return f"{self.step} {self.loss:.10e} {self.lr:.10e} {self.batch_size}"


def _rng_meta(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_restore(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _snapshot(named: list[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {name: t.values.copy() for name, t in named}


def _load_snapshot(named: list[tuple[str, Tensor]], blob: dict[str, np.ndarray]) -> None:
    for name, t in named:
        t.values[...] = blob[name]


# ---------------------------------------------------------------------------
# pattern formation


@dataclass
class PatternConfig:
    pool_size: int = 256
    sigma: float = 0.5
    t_min: int = 15
    t_max: int = 25
    batch_min: int = 4
    batch_max: int = 32
    max_steps: int = 2000
    lr: float = 5e-4
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    plateau_patience: int = 500
    plateau_factor: float = 0.75
    lr_floor: float = 1e-5
    damage_magnitude: float | None = None
    damage_radius: float | None = None
    val_every: int = 100
    val_states: int = 4
    val_t: int = 25
    pair_node_limit: int = 512
    hidden_dim: int = 16
    message_dim: int = 32
    normalization: str = "pairnorm"


class PatternTrainer:
    """Pool/replay training of a rule that morphs noise into a fixed shape.

    Every optimization step: the worst pool entry (highest recorded loss) is
    reset to a fresh initial state, a mini-batch is sampled, one quarter of it
    receives global coordinate damage and one quarter local damage, the batch
    is rolled t ~ U[t_min, t_max] steps, and the distance-gap loss drives one
    Adam update before reached states replace their pool entries.
    """

    def __init__(self, target: GeometricGraph, config: PatternConfig, seed: int):
        self.target = target
        self.config = config
        self.seed = seed
        self.params = make_egc_params(
            "pattern",
            coord_dim=target.coord_dim,
            seed=int(np.random.default_rng([seed, 0]).integers(2**31)),
            hidden_dim=config.hidden_dim,
            message_dim=config.message_dim,
            normalization=config.normalization,
        )
        self.opt = OptimizerState(
            lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm
        )
        self.rng = np.random.default_rng([seed, 1])
        self.plateau = Plateau(
            patience=config.plateau_patience, factor=config.plateau_factor, floor=config.lr_floor
        )
        self.batch_size = config.batch_min
        self.step_count = 0
        self.ema_loss = np.inf
        self.best_val = np.inf
        self.best_params: dict[str, np.ndarray] | None = None
        self.history: list[HistoryRow] = []
        self.damage_magnitude = (
            config.damage_magnitude
            if config.damage_magnitude is not None
            else default_damage_magnitude(target.target_coords)
        )
        self.damage_radius = (
            config.damage_radius
            if config.damage_radius is not None
            else default_damage_radius(target.target_coords)
        )
        n = target.graph.n_nodes
        self.pool = StatePool([self._fresh_entry() for _ in range(config.pool_size)])
        if n <= config.pair_node_limit:
            # Unordered pairs with a factor 2 reproduce the full ordered-pair
            # average at half the cost (the diagonal contributes zeros).
            iu = np.triu_indices(n, k=1)
            self._pair_template = np.stack(iu, axis=1).astype(np.int64)
        else:
            self._pair_template = None
        self._batch_graphs: dict[int, Graph] = {}

    def _fresh_entry(self) -> PoolEntry:
        n = self.target.graph.n_nodes
        X = self.rng.normal(0.0, self.config.sigma, size=(n, self.target.coord_dim))
        return PoolEntry(X=X, H=np.ones((n, self.config.hidden_dim)))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.params.named_tensors()

    def _batch_graph(self, b: int) -> Graph:
        if b not in self._batch_graphs:
            self._batch_graphs[b] = disjoint_union([self.target.graph] * b)[0]
        return self._batch_graphs[b]

    def _batch_pairs(self, b: int) -> tuple[np.ndarray, float]:
        """Pair index block for the whole batch plus the per-gap loss weight."""
        n = self.target.graph.n_nodes
        if self._pair_template is not None:
            template = self._pair_template
            weight = 2.0 / (n * n)  # unordered pairs, counted twice
        else:
            template = sample_pairs(n, self.rng)
            weight = 1.0 / template.shape[0]
        blocks = [template + k * n for k in range(b)]
        return np.concatenate(blocks, axis=0), weight / b

    def step(self) -> HistoryRow:
        cfg = self.config
        n = self.target.graph.n_nodes
        b = self.batch_size

        worst = self.pool.worst_index()
        self.pool.entries[worst] = self._fresh_entry()

        batch_idx = self.rng.choice(len(self.pool), size=b, replace=False)
        states = [self.pool.state(int(i)) for i in batch_idx]
        quarter = b // 4
        for slot in range(quarter):
            states[slot] = damage(
                states[slot], "global", self.damage_magnitude,
                seed=int(self.rng.integers(2**31)),
            )
        for slot in range(quarter, 2 * quarter):
            states[slot] = damage(
                states[slot], "local", self.damage_magnitude, radius=self.damage_radius,
                seed=int(self.rng.integers(2**31)),
            )

        t = int(self.rng.integers(cfg.t_min, cfg.t_max + 1))
        graph = self._batch_graph(b)
        pairs, gap_weight = self._batch_pairs(b)
        target_tile = np.tile(self.target.target_coords, (b, 1))

        zero_grads(t_ for _, t_ in self.named_parameters())
        with Tape() as tape:
            state = stack_states(states)
            for _ in range(t):
                state = egc_forward(self.params, graph, state)
            d_pred = row_norm(sub(take_rows(state.X, pairs[:, 0]), take_rows(state.X, pairs[:, 1])))
            d_target = np.linalg.norm(
                target_tile[pairs[:, 0]] - target_tile[pairs[:, 1]], axis=1, keepdims=True
            )
            gaps = square(sub(d_pred, Tensor(d_target)))
            loss = scalar_mul(tsum(gaps), gap_weight)
            tape.backward(loss)
        adam_step(self.named_parameters(), self.opt)

        per_pair = gaps.values.reshape(b, -1)
        per_copy = per_pair.sum(axis=1) * (gap_weight * b)
        for slot, pool_i in enumerate(batch_idx):
            lo, hi = slot * n, (slot + 1) * n
            reached = AutomatonState(
                Tensor(state.X.values[lo:hi]), Tensor(state.H.values[lo:hi])
            )
            self.pool.write_back(int(pool_i), reached, float(per_copy[slot]))

        loss_val = loss.item()
        self.ema_loss = loss_val if not np.isfinite(self.ema_loss) else (
            0.99 * self.ema_loss + 0.01 * loss_val
        )
        if self.plateau.update(self.ema_loss):
            self.opt.lr = max(self.opt.lr * self.plateau.factor, self.plateau.floor)
            self.batch_size = min(self.batch_size * 2, cfg.batch_max)

        self.step_count += 1
        row = HistoryRow(self.step_count, loss_val, self.opt.lr, b)
        self.history.append(row)
        if self.step_count % cfg.val_every == 0:
            val = self.validation_loss()
            if val < self.best_val:
                self.best_val = val
                self.best_params = _snapshot(self.named_parameters())
        return row

    def validation_loss(self) -> float:
        losses = []
        for i in range(self.config.val_states):
            state = self._probe_state(i)
            for _ in range(self.config.val_t):
                state = egc_forward(self.params, self.target.graph, state)
            losses.append(loss_invariant(state.X, self.target.target_coords).item())
        return float(np.mean(losses))

    def _probe_state(self, i: int) -> AutomatonState:
        rng = np.random.default_rng([self.seed, 999983, i])
        n = self.target.graph.n_nodes
        X = rng.normal(0.0, self.config.sigma, size=(n, self.target.coord_dim))
        return AutomatonState(Tensor(X), Tensor(np.ones((n, self.config.hidden_dim))))

    def run(self, n_steps: int | None = None, step_callback=None) -> None:
        limit = self.config.max_steps if n_steps is None else self.step_count + n_steps
        while self.step_count < limit:
            row = self.step()
            if step_callback is not None:
                step_callback(self, row)

    # -- exact state capture -------------------------------------------------

    def state_payload(self) -> tuple[list[tuple[str, np.ndarray]], dict]:
        arrays = [(name, t.values.copy()) for name, t in self.named_parameters()]
        arrays += [(f"opt.m.{k}", v.copy()) for k, v in sorted(self.opt.m.items())]
        arrays += [(f"opt.v.{k}", v.copy()) for k, v in sorted(self.opt.v.items())]
        arrays.append(("pool.X", np.stack([e.X for e in self.pool.entries])
                       .reshape(len(self.pool), -1)))
        arrays.append(("pool.H", np.stack([e.H for e in self.pool.entries])
                       .reshape(len(self.pool), -1)))
        arrays.append(("pool.loss", np.array([[e.last_loss] for e in self.pool.entries])))
        arrays.append(("pool.repl", np.array([[float(e.replacements)] for e in self.pool.entries])))
        if self.best_params is not None:
            arrays += [(f"best.{k}", v.copy()) for k, v in sorted(self.best_params.items())]
        meta = {
            "rng": _rng_meta(self.rng),
            "step_count": self.step_count,
            "batch_size": self.batch_size,
            "lr": self.opt.lr,
            "opt_step": self.opt.step,
            "ema_loss": self.ema_loss,
            "best_val": self.best_val,
            "plateau_best": self.plateau.best,
            "plateau_bad": self.plateau.bad,
            "has_best": self.best_params is not None,
        }
        return arrays, meta

    def load_payload(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        for name, t in self.named_parameters():
            t.values[...] = arrays[name]
        self.opt.m = {
            k[len("opt.m."):]: arrays[k].copy() for k in arrays if k.startswith("opt.m.")
        }
        self.opt.v = {
            k[len("opt.v."):]: arrays[k].copy() for k in arrays if k.startswith("opt.v.")
        }
        n, dim = self.target.graph.n_nodes, self.target.coord_dim
        pool_x = arrays["pool.X"].reshape(len(self.pool), n, dim)
        pool_h = arrays["pool.H"].reshape(len(self.pool), n, self.config.hidden_dim)
        for i, e in enumerate(self.pool.entries):
            e.X = pool_x[i].copy()
            e.H = pool_h[i].copy()
            e.last_loss = float(arrays["pool.loss"][i, 0])
            e.replacements = int(arrays["pool.repl"][i, 0])
        if meta.get("has_best"):
            self.best_params = {
                k[len("best."):]: arrays[k].copy() for k in arrays if k.startswith("best.")
            }
        self.rng = _rng_restore(meta["rng"])
        self.step_count = int(meta["step_count"])
        self.batch_size = int(meta["batch_size"])
        self.opt.lr = float(meta["lr"])
        self.opt.step = int(meta["opt_step"])
        self.ema_loss = float(meta["ema_loss"])
        self.best_val = float(meta["best_val"])
        self.plateau.best = float(meta["plateau_best"])
        self.plateau.bad = int(meta["plateau_bad"])


def train_pattern(target: GeometricGraph, config: PatternConfig, seed: int = 0):
    """Train to convergence per the config; returns (params, history, trainer)."""
    trainer = PatternTrainer(target, config, seed)
    trainer.run()
    if trainer.best_params is not None:
        _load_snapshot(trainer.named_parameters(), trainer.best_params)
    return trainer.params, trainer.history, trainer


def evaluate_pattern(
    params: EGCParams,
    target: GeometricGraph,
    sigma: float,
    n_states: int = 8,
    t: int = 20,
    seed: int = 0,
    extra_steps: int = 0,
) -> float:
    """Mean distance-gap loss of fresh rollouts at step t (+optional extra)."""
    losses = []
    for i in range(n_states):
        rng = np.random.default_rng([seed, 424243, i])
        n = target.graph.n_nodes
        state = AutomatonState(
            Tensor(rng.normal(0.0, sigma, size=(n, target.coord_dim))),
            Tensor(np.ones((n, params.hidden_dim))),
        )
        for _ in range(t + extra_steps):
            state = egc_forward(params, target.graph, state)
        losses.append(loss_invariant(state.X, target.target_coords).item())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# graph autoencoding


@dataclass
class AutoencoderConfig:
    coord_dim: int = 8
    pool_size: int = 8
    sigma: float = 1.0
    t_min: int = 25
    t_max: int = 35
    max_replacements: int = 10
    batch_graphs: int = 32
    max_epochs: int = 400
    early_stop_patience: int = 20
    plateau_patience: int = 5
    plateau_factor: float = 0.75
    lr: float = 5e-4
    lr_floor: float = 1e-5
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    neg_ratio: float = 1.0
    delta1_init: float = 4.0
    delta2_init: float = 0.5
    t_eval: int = 100
    val_t: int = 30
    hidden_dim: int = 16
    message_dim: int = 32
    normalization: str = "pairnorm"


class AutoencoderTrainer:
    """Multi-target replay training of a graph-conditioned rule plus decoder.

    Each training graph keeps a small pool of states. Reached states replace
    the pool entries that produced them, and entries retire back to a fresh
    initialization after ``max_replacements`` writes so the rule never
    overfits to late-time configurations. The loss is balanced binary
    cross-entropy on true edges plus an equal number of sampled non-edges.
    """

    def __init__(self, datasets: DatasetSplit, config: AutoencoderConfig, seed: int):
        if not datasets.train:
            raise ValueError("empty training set")
        self.datasets = datasets
        self.config = config
        self.seed = seed
        self.params = make_egc_params(
            "autoencode",
            coord_dim=config.coord_dim,
            seed=int(np.random.default_rng([seed, 0]).integers(2**31)),
            hidden_dim=config.hidden_dim,
            message_dim=config.message_dim,
            normalization=config.normalization,
        )
        self.decoder = make_decoder(config.delta1_init, config.delta2_init)
        self.opt = OptimizerState(
            lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm
        )
        self.rng = np.random.default_rng([seed, 1])
        self.plateau = Plateau(
            patience=config.plateau_patience, factor=config.plateau_factor, floor=config.lr_floor
        )
        self.pools = [
            StatePool(
                [self._fresh_entry(gi) for _ in range(config.pool_size)],
                max_replacements=config.max_replacements,
            )
            for gi in range(len(datasets.train))
        ]
        self._positives = [
            np.array(sorted(g.undirected_pairs()), dtype=np.int64).reshape(-1, 2)
            for g in datasets.train
        ]
        self._non_edges = [self._non_edge_list(g) for g in datasets.train]
        self.epoch = 0
        self.step_count = 0
        self.best_val = np.inf
        self.best_epoch = -1
        self.best_params: dict[str, np.ndarray] | None = None
        self.history: list[HistoryRow] = []

    @staticmethod
    def _non_edge_list(g: Graph) -> np.ndarray:
        present = g.undirected_pairs()
        out = [
            (i, j)
            for i in range(g.n_nodes)
            for j in range(i + 1, g.n_nodes)
            if (i, j) not in present
        ]
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def _fresh_entry(self, graph_id: int) -> PoolEntry:
        g = self.datasets.train[graph_id]
        X = self.rng.normal(0.0, self.config.sigma, size=(g.n_nodes, self.config.coord_dim))
        return PoolEntry(
            X=X, H=np.ones((g.n_nodes, self.config.hidden_dim)), graph_id=graph_id
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.params.named_tensors() + self.decoder.named_tensors()

    def _train_batch(self, graph_ids: np.ndarray) -> HistoryRow:
        cfg = self.config
        slot_ids = [int(self.rng.integers(cfg.pool_size)) for _ in graph_ids]
        states = [self.pools[gi].state(slot) for gi, slot in zip(graph_ids, slot_ids)]
        graphs = [self.datasets.train[gi] for gi in graph_ids]
        union, offsets = disjoint_union(graphs)
        t = int(self.rng.integers(cfg.t_min, cfg.t_max + 1))

        pair_blocks, label_blocks = [], []
        for pos, gi, off in zip(
            (self._positives[gi] for gi in graph_ids), graph_ids, offsets[:-1]
        ):
            non = self._non_edges[gi]
            n_neg = min(int(np.ceil(cfg.neg_ratio * max(len(pos), 1))), len(non))
            neg = (
                non[self.rng.choice(len(non), size=n_neg, replace=False)]
                if n_neg
                else np.zeros((0, 2), dtype=np.int64)
            )
            pair_blocks.append(np.concatenate([pos, neg], axis=0) + off)
            label_blocks.append(
                np.concatenate([np.ones(len(pos)), np.zeros(n_neg)])
            )
        pairs = np.concatenate(pair_blocks, axis=0)
        labels = np.concatenate(label_blocks)

        zero_grads(t_ for _, t_ in self.named_parameters())
        with Tape() as tape:
            state = stack_states(states)
            for _ in range(t):
                state = egc_forward(self.params, union, state)
            probs = soft_adjacency_entries(state.X, self.decoder, pairs)
            loss = scalar_mul(loss_bce(labels, probs), 1.0 / len(labels))
            tape.backward(loss)
        adam_step(self.named_parameters(), self.opt)

        for slot, gi, pool_slot, off in zip(
            range(len(graph_ids)), graph_ids, slot_ids, offsets[:-1]
        ):
            n = graphs[slot].n_nodes
            reached = AutomatonState(
                Tensor(state.X.values[off : off + n]), Tensor(state.H.values[off : off + n])
            )
            pool = self.pools[gi]
            pool.write_back(pool_slot, reached, loss.item())
            if pool.entries[pool_slot].replacements >= cfg.max_replacements:
                entry = self._fresh_entry(gi)
                pool.entries[pool_slot] = entry

        self.step_count += 1
        row = HistoryRow(self.step_count, loss.item(), self.opt.lr, len(graph_ids))
        self.history.append(row)
        return row

    def run_epoch(self) -> float:
        cfg = self.config
        order = self.rng.permutation(len(self.datasets.train))
        for lo in range(0, len(order), cfg.batch_graphs):
            self._train_batch(order[lo : lo + cfg.batch_graphs])
        self.epoch += 1
        val = self.validation_bce()
        if val < self.best_val:
            self.best_val = val
            self.best_epoch = self.epoch
            self.best_params = _snapshot(self.named_parameters())
        if self.plateau.update(val):
            self.opt.lr = max(self.opt.lr * self.plateau.factor, self.plateau.floor)
        return val

    def validation_bce(self) -> float:
        graphs = self.datasets.val or self.datasets.train[:8]
        scores = []
        for gi, g in enumerate(graphs):
            X = self._decode_coords(g, gi, self.config.val_t)
            scores.append(bce_score(g.adjacency(), soft_adjacency(X, self.decoder)))
        return float(np.mean(scores))

    def _decode_coords(self, g: Graph, idx: int, t: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 555557, idx])
        state = AutomatonState(
            Tensor(rng.normal(0.0, self.config.sigma, size=(g.n_nodes, self.config.coord_dim))),
            Tensor(np.ones((g.n_nodes, self.config.hidden_dim))),
        )
        for _ in range(t):
            state = egc_forward(self.params, g, state)
        return state.X.values

    def run(self) -> None:
        cfg = self.config
        while self.epoch < cfg.max_epochs:
            self.run_epoch()
            if self.epoch - self.best_epoch >= cfg.early_stop_patience:
                break
        if self.best_params is not None:
            _load_snapshot(self.named_parameters(), self.best_params)

    # -- exact state capture -------------------------------------------------

    def state_payload(self) -> tuple[list[tuple[str, np.ndarray]], dict]:
        arrays = [(name, t.values.copy()) for name, t in self.named_parameters()]
        arrays += [(f"opt.m.{k}", v.copy()) for k, v in sorted(self.opt.m.items())]
        arrays += [(f"opt.v.{k}", v.copy()) for k, v in sorted(self.opt.v.items())]
        for gi, pool in enumerate(self.pools):
            for si, e in enumerate(pool.entries):
                arrays.append((f"pool.{gi}.{si}.X", e.X.copy()))
                arrays.append((f"pool.{gi}.{si}.H", e.H.copy()))
                arrays.append(
                    (f"pool.{gi}.{si}.meta", np.array([[e.last_loss, float(e.replacements)]]))
                )
        if self.best_params is not None:
            arrays += [(f"best.{k}", v.copy()) for k, v in sorted(self.best_params.items())]
        meta = {
            "rng": _rng_meta(self.rng),
            "epoch": self.epoch,
            "step_count": self.step_count,
            "lr": self.opt.lr,
            "opt_step": self.opt.step,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "plateau_best": self.plateau.best,
            "plateau_bad": self.plateau.bad,
            "has_best": self.best_params is not None,
        }
        return arrays, meta

    def load_payload(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        for name, t in self.named_parameters():
            t.values[...] = arrays[name]
        self.opt.m = {k[6:]: arrays[k].copy() for k in arrays if k.startswith("opt.m.")}
        self.opt.v = {k[6:]: arrays[k].copy() for k in arrays if k.startswith("opt.v.")}
        for gi, pool in enumerate(self.pools):
            for si, e in enumerate(pool.entries):
                e.X = arrays[f"pool.{gi}.{si}.X"].copy()
                e.H = arrays[f"pool.{gi}.{si}.H"].copy()
                m = arrays[f"pool.{gi}.{si}.meta"]
                e.last_loss = float(m[0, 0])
                e.replacements = int(m[0, 1])
        if meta.get("has_best"):
            self.best_params = {
                k[len("best."):]: arrays[k].copy() for k in arrays if k.startswith("best.")
            }
        self.rng = _rng_restore(meta["rng"])
        self.epoch = int(meta["epoch"])
        self.step_count = int(meta["step_count"])
        self.opt.lr = float(meta["lr"])
        self.opt.step = int(meta["opt_step"])
        self.best_val = float(meta["best_val"])
        self.best_epoch = int(meta["best_epoch"])
        self.plateau.best = float(meta["plateau_best"])
        self.plateau.bad = int(meta["plateau_bad"])


def train_autoencoder(datasets: DatasetSplit, config: AutoencoderConfig, seed: int = 0):
    """Returns (params, decoder, history, trainer) after early stopping."""
    trainer = AutoencoderTrainer(datasets, config, seed)
    trainer.run()
    return trainer.params, trainer.decoder, trainer.history, trainer


def decode_graph_coords(
    params: EGCParams,
    g: Graph,
    coord_dim: int,
    sigma: float,
    t: int,
    seed: int,
) -> np.ndarray:
    """Roll a fresh state on graph ``g`` and return the reached coordinates."""
    rng = np.random.default_rng([seed, 626263])
    state = AutomatonState(
        Tensor(rng.normal(0.0, sigma, size=(g.n_nodes, coord_dim))),
        Tensor(np.ones((g.n_nodes, params.hidden_dim))),
    )
    for _ in range(t):
        state = egc_forward(params, g, state)
    return state.X.values


def finetune_threshold(
    val_graphs: list[Graph],
    params: EGCParams,
    decoder: DecoderParams,
    t_eval: int,
    coord_dim: int | None = None,
    sigma: float = 1.0,
    seed: int = 0,
) -> float:
    """Grid-search the binarization threshold maximizing mean validation F1.

    The grid is {0.01, ..., 0.99} in steps of 0.01; ties resolve to the lower
    threshold.
    """
    if not val_graphs:
        raise ValueError("empty validation set")
    if t_eval < 1:
        raise ValueError("t_eval must be >= 1")
    coord_dim = coord_dim or params.coord_dim
    softs, adjs = [], []
    for gi, g in enumerate(val_graphs):
        X = decode_graph_coords(params, g, coord_dim, sigma, t_eval, seed=seed + gi)
        softs.append(soft_adjacency(X, decoder))
        adjs.append(g.adjacency())
    best_thr, best_f1 = 0.01, -1.0
    for k in range(1, 100):
        thr = k / 100.0
        score = float(np.mean([f1_score(a, s, thr) for a, s in zip(adjs, softs)]))
        if score > best_f1:
            best_f1, best_thr = score, thr
    return best_thr


def evaluate_autoencoder(
    graphs: list[Graph],
    params: EGCParams,
    decoder: DecoderParams,
    t_eval: int,
    threshold: float,
    sigma: float = 1.0,
    seed: int = 0,
) -> tuple[float, float]:
    """(mean F1, mean per-entry BCE) of reconstructions at step t_eval."""
    f1s, bces = [], []
    for gi, g in enumerate(graphs):
        X = decode_graph_coords(params, g, params.coord_dim, sigma, t_eval, seed=seed + gi)
        soft = soft_adjacency(X, decoder)
        adj = g.adjacency()
        f1s.append(f1_score(adj, soft, threshold))
        bces.append(bce_score(adj, soft))
    return float(np.mean(f1s)), float(np.mean(bces))


# ---------------------------------------------------------------------------
# dynamical-system imitation


@dataclass
class SimulatorConfig:
    radius: float = 3.0
    sub_len: int = 20
    batch_size: int = 16
    max_epochs: int = 60
    batches_per_epoch: int = 25
    early_stop_patience: int = 20
    plateau_patience: int = 5
    plateau_factor: float = 0.75
    lr: float = 1e-3
    lr_floor: float = 1e-5
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    n_val_subtraj: int = 16
    hidden_dim: int = 16
    message_dim: int = 32
    normalization: str = "pairnorm"
    fully_connected: bool = False  # n-body style: static complete graph + charge products


class SimulatorTrainer:
    """Imitate observed trajectories with the velocity-preset rule.

    Mini-batches are random sub-trajectories of length ``sub_len``. The rule
    starts from the first frame (features come from a jointly-trained linear
    map of per-node speed) and runs sub_len - 1 steps; the loss is the squared
    error of the predicted velocities against the remaining frames. The
    interaction graph is rebuilt from the current predicted coordinates every
    step (or stays complete with charge-product edge attributes).
    """

    def __init__(self, trajectories: list[Trajectory], config: SimulatorConfig, seed: int):
        if not trajectories:
            raise ValueError("no trajectories")
        self.config = config
        self.seed = seed
        n_val = max(1, int(config.val_fraction * len(trajectories)))
        if len(trajectories) <= n_val:
            raise ValueError("too few trajectories for a validation split")
        self.train_traj = trajectories[:-n_val]
        self.val_traj = trajectories[-n_val:]
        edge_dim = 1 if config.fully_connected else 0
        self.params = make_egc_params(
            "velocity",
            coord_dim=trajectories[0].dim,
            seed=int(np.random.default_rng([seed, 0]).integers(2**31)),
            hidden_dim=config.hidden_dim,
            message_dim=config.message_dim,
            edge_dim=edge_dim,
            normalization=config.normalization,
        )
        enc_rng = np.random.default_rng([seed, 2])
        bound = 1.0
        self.speed_encoder = LinearParams(
            Tensor(enc_rng.uniform(-bound, bound, size=(1, config.hidden_dim)), requires_grad=True),
            Tensor(enc_rng.uniform(-bound, bound, size=(1, config.hidden_dim)), requires_grad=True),
        )
        self.opt = OptimizerState(
            lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm
        )
        self.rng = np.random.default_rng([seed, 1])
        self.plateau = Plateau(
            patience=config.plateau_patience, factor=config.plateau_factor, floor=config.lr_floor
        )
        self.epoch = 0
        self.step_count = 0
        self.best_val = np.inf
        self.best_epoch = -1
        self.best_params: dict[str, np.ndarray] | None = None
        self.history: list[HistoryRow] = []

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.params.named_tensors() + [
            ("speed_encoder.w", self.speed_encoder.w),
            ("speed_encoder.b", self.speed_encoder.b),
        ]

    def sample_subtrajectory(self, rng: np.random.Generator, traj_pool: list[Trajectory]):
        """Pick (trajectory, start) so that sub_len frames fit."""
        L = self.config.sub_len
        ti = int(rng.integers(len(traj_pool)))
        traj = traj_pool[ti]
        if traj.n_frames < L:
            raise ValueError(f"trajectory too short for sub_len={L}")
        start = int(rng.integers(traj.n_frames - L + 1))
        return traj, start

    def _batched_graph(self, coords: np.ndarray, sizes: list[int], charges=None) -> Graph:
        """Per-element interaction graphs merged into one block graph."""
        offsets = np.cumsum([0] + sizes)
        edge_blocks, attr_blocks = [], []
        for k, (lo, n) in enumerate(zip(offsets[:-1], sizes)):
            block = coords[lo : lo + n]
            if self.config.fully_connected:
                pairs = all_pairs(n)
                attr_blocks.append(
                    (charges[k][pairs[:, 0]] * charges[k][pairs[:, 1]])[:, None]
                )
            else:
                g = radius_graph(block, self.config.radius)
                pairs = g.edges
            edge_blocks.append(pairs + lo)
        edges = (
            np.concatenate(edge_blocks, axis=0)
            if edge_blocks
            else np.zeros((0, 2), dtype=np.int64)
        )
        attr = np.concatenate(attr_blocks, axis=0) if attr_blocks else None
        return Graph(int(offsets[-1]), edges, attr)

    def _rollout_loss(self, subs: list[tuple[Trajectory, int]]) -> Tensor:
        L = self.config.sub_len
        sizes = [traj.n_bodies for traj, _ in subs]
        charges = [traj.charges for traj, _ in subs] if self.config.fully_connected else None
        X = Tensor(np.concatenate([traj.positions[s] for traj, s in subs], axis=0))
        V = Tensor(np.concatenate([traj.velocities[s] for traj, s in subs], axis=0))
        H = linear(row_norm(V), self.speed_encoder.w, self.speed_encoder.b)
        state = AutomatonState(X, H, V)
        total = None
        count = 0
        for step in range(1, L):
            graph = self._batched_graph(state.X.values, sizes, charges)
            state = egc_forward(self.params, graph, state)
            true_v = np.concatenate(
                [traj.velocities[s + step] for traj, s in subs], axis=0
            )
            term = tsum(square(sub(state.V, Tensor(true_v))))
            total = term if total is None else total + term
            count += true_v.size
        return scalar_mul(total, 1.0 / count)

    def _train_batch(self) -> HistoryRow:
        subs = [
            self.sample_subtrajectory(self.rng, self.train_traj)
            for _ in range(self.config.batch_size)
        ]
        zero_grads(t for _, t in self.named_parameters())
        with Tape() as tape:
            loss = self._rollout_loss(subs)
            tape.backward(loss)
        adam_step(self.named_parameters(), self.opt)
        self.step_count += 1
        row = HistoryRow(self.step_count, loss.item(), self.opt.lr, self.config.batch_size)
        self.history.append(row)
        return row

    def validation_mse(self) -> float:
        rng = np.random.default_rng([self.seed, 313131])
        subs = [
            self.sample_subtrajectory(rng, self.val_traj)
            for _ in range(self.config.n_val_subtraj)
        ]
        return self._rollout_loss(subs).item()

    def run_epoch(self) -> float:
        for _ in range(self.config.batches_per_epoch):
            self._train_batch()
        self.epoch += 1
        val = self.validation_mse()
        if val < self.best_val:
            self.best_val = val
            self.best_epoch = self.epoch
            self.best_params = _snapshot(self.named_parameters())
        if self.plateau.update(val):
            self.opt.lr = max(self.opt.lr * self.plateau.factor, self.plateau.floor)
        return val

    def run(self) -> None:
        while self.epoch < self.config.max_epochs:
            self.run_epoch()
            if self.epoch - self.best_epoch >= self.config.early_stop_patience:
                break
        if self.best_params is not None:
            _load_snapshot(self.named_parameters(), self.best_params)

    # -- exact state capture -------------------------------------------------

    def state_payload(self) -> tuple[list[tuple[str, np.ndarray]], dict]:
        arrays = [(name, t.values.copy()) for name, t in self.named_parameters()]
        arrays += [(f"opt.m.{k}", v.copy()) for k, v in sorted(self.opt.m.items())]
        arrays += [(f"opt.v.{k}", v.copy()) for k, v in sorted(self.opt.v.items())]
        if self.best_params is not None:
            arrays += [(f"best.{k}", v.copy()) for k, v in sorted(self.best_params.items())]
        meta = {
            "rng": _rng_meta(self.rng),
            "epoch": self.epoch,
            "step_count": self.step_count,
            "lr": self.opt.lr,
            "opt_step": self.opt.step,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "plateau_best": self.plateau.best,
            "plateau_bad": self.plateau.bad,
            "has_best": self.best_params is not None,
        }
        return arrays, meta

    def load_payload(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        for name, t in self.named_parameters():
            t.values[...] = arrays[name]
        self.opt.m = {k[6:]: arrays[k].copy() for k in arrays if k.startswith("opt.m.")}
        self.opt.v = {k[6:]: arrays[k].copy() for k in arrays if k.startswith("opt.v.")}
        if meta.get("has_best"):
            self.best_params = {
                k[len("best."):]: arrays[k].copy() for k in arrays if k.startswith("best.")
            }
        self.rng = _rng_restore(meta["rng"])
        self.epoch = int(meta["epoch"])
        self.step_count = int(meta["step_count"])
        self.opt.lr = float(meta["lr"])
        self.opt.step = int(meta["opt_step"])
        self.best_val = float(meta["best_val"])
        self.best_epoch = int(meta["best_epoch"])
        self.plateau.best = float(meta["plateau_best"])
        self.plateau.bad = int(meta["plateau_bad"])


def train_simulator(trajectories: list[Trajectory], config: SimulatorConfig, seed: int = 0):
    """Returns (params, speed_encoder, history, trainer)."""
    trainer = SimulatorTrainer(trajectories, config, seed)
    trainer.run()
    return trainer.params, trainer.speed_encoder, trainer.history, trainer
