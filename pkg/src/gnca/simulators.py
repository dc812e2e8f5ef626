"""Ground-truth equivariant dynamical systems: 3D flocking and n-body.

Both simulators are synchronous and 1-step Markovian. Dataset generation
derives one rng per trajectory from (master seed, trajectory index), so
trajectories are independent and reproducible regardless of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    """Time-indexed (positions, velocities) frames, optionally with charges."""

    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        v = np.asarray(self.velocities, dtype=np.float64)
        if p.ndim != 3 or p.shape != v.shape:
            raise ValueError("positions/velocities must both be (frames, bodies, dim)")
        self.positions, self.velocities = p, v
        if self.charges is not None:
            q = np.asarray(self.charges, dtype=np.float64)
            if q.shape != (p.shape[1],):
                raise ValueError("charges must be one scalar per body")
            self.charges = q

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_bodies(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


# ---------------------------------------------------------------------------
# boids


@dataclass
class BoidsConfig:
    """Flocking constants. Defaults give visible flocking at 100 boids."""

    n_boids: int = 100
    half_side: float = 10.0
    radius: float = 3.0
    separation_dist: float = 1.0
    cohesion: float = 0.005
    alignment: float = 0.3
    separation: float = 0.05
    wall: float = 0.3  # strong enough to contain max-speed boids within box+margin
    wall_margin: float = 2.0
    max_speed: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        for name in ("half_side", "radius", "separation_dist", "cohesion", "alignment",
                     "separation", "wall", "wall_margin", "max_speed", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"boids config: {name} must be positive")
        if self.separation_dist >= self.radius:
            raise ValueError("separation_dist must be smaller than the neighbor radius")


def boids_step(
    positions: np.ndarray, velocities: np.ndarray, config: BoidsConfig
) -> tuple[np.ndarray, np.ndarray]:
    """One synchronous flocking update.

    Forces, in order: cohesion toward the neighborhood's mean position,
    alignment toward its mean velocity, separation away from neighbors closer
    than the separation distance, and a steer toward the center for boids
    near the bounding box. The summed force updates the velocity, the speed
    is clamped, and positions advance with the new velocity.
    """
    x = np.asarray(positions, dtype=np.float64)
    v = np.asarray(velocities, dtype=np.float64)
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    neigh = (dist > 0.0) & (dist <= config.radius)
    np.fill_diagonal(neigh, False)
    counts = neigh.sum(axis=1)
    safe = np.maximum(counts, 1)[:, None].astype(np.float64)

    mean_pos = (neigh @ x) / safe
    mean_vel = (neigh @ v) / safe
    has = (counts > 0)[:, None]
    f_cohesion = np.where(has, config.cohesion * (mean_pos - x), 0.0)
    f_alignment = np.where(has, config.alignment * (mean_vel - v), 0.0)

    close = neigh & (dist < config.separation_dist)
    f_separation = config.separation * (close.sum(axis=1)[:, None] * x - close @ x)

    near_wall = np.abs(x).max(axis=1) > config.half_side - config.wall_margin
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    toward_center = -x / np.where(norms > 0, norms, 1.0)
    f_wall = np.where(near_wall[:, None], config.wall * toward_center, 0.0)

    v_new = v + f_cohesion + f_alignment + f_separation + f_wall
    speed = np.linalg.norm(v_new, axis=1, keepdims=True)
    v_new = v_new * np.where(speed > config.max_speed, config.max_speed / speed, 1.0)
    return x + config.dt * v_new, v_new


def _uniform_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    direction = rng.normal(size=(n, dim))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    return direction * radius * rng.random((n, 1)) ** (1.0 / dim)


def simulate_boids(
    positions: np.ndarray, velocities: np.ndarray, steps: int, config: BoidsConfig
) -> Trajectory:
    p = np.empty((steps + 1, positions.shape[0], positions.shape[1]))
    v = np.empty_like(p)
    p[0], v[0] = positions, velocities
    for t in range(steps):
        p[t + 1], v[t + 1] = boids_step(p[t], v[t], config)
    return Trajectory(p, v)


def gen_boids_trajectory(index: int, T: int, seed: int, config: BoidsConfig) -> Trajectory:
    """Generate trajectory ``index`` of a seeded dataset (order-independent)."""
    rng = np.random.default_rng([seed, index])
    span = config.half_side - config.wall_margin
    positions = rng.uniform(-span, span, size=(config.n_boids, 3))
    velocities = _uniform_ball(rng, config.n_boids, 3, config.max_speed)
    return simulate_boids(positions, velocities, T, config)


def gen_boids_dataset(
    n_traj: int, T: int, n_boids: int, seed: int, config: BoidsConfig | None = None
) -> list[Trajectory]:
    """Seeded flocking dataset of ``n_traj`` trajectories with T+1 frames each."""
    if n_traj <= 0 or T <= 0 or n_boids <= 0:
        raise ValueError("n_traj, T and n_boids must be positive")
    config = config or BoidsConfig()
    if config.n_boids != n_boids:
        config = BoidsConfig(**{**config.__dict__, "n_boids": n_boids})
    return [gen_boids_trajectory(i, T, seed, config) for i in range(n_traj)]


# ---------------------------------------------------------------------------
# n-body


@dataclass
class NBodyConfig:
    """Charged-particle system: inverse-square pair forces with softening."""

    n_bodies: int = 5
    dt: float = 0.01
    softening: float = 0.5
    pos_sigma: float = 1.0
    vel_sigma: float = 0.5

    def __post_init__(self):
        if self.dt <= 0 or self.softening <= 0:
            raise ValueError("dt and softening must be positive")


def _nbody_accel(x: np.ndarray, charges: np.ndarray, softening: float) -> np.ndarray:
    """Acceleration from pairwise charge-product forces; unit masses.

    Works for a single state (n, 3) or a leading batch axis (..., n, 3);
    the self-pair contributes a zero difference vector so no mask is needed.
    """
    diff = x[..., :, None, :] - x[..., None, :, :]
    d2 = (diff * diff).sum(axis=-1) + softening * softening
    qq = charges[..., :, None] * charges[..., None, :]
    w = qq / (d2 * np.sqrt(d2))
    return (w[..., None] * diff).sum(axis=-2)


def nbody_step(
    positions: np.ndarray,
    velocities: np.ndarray,
    charges: np.ndarray,
    dt: float,
    softening: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Symplectic Euler update: velocity first, then position."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_new = velocities + dt * _nbody_accel(positions, charges, softening)
    return positions + dt * v_new, v_new


def nbody_energy(
    positions: np.ndarray, velocities: np.ndarray, charges: np.ndarray, softening: float = 0.5
) -> float:
    """Kinetic plus softened Coulomb potential energy (conserved up to drift)."""
    kinetic = 0.5 * float((velocities * velocities).sum())
    diff = positions[:, None, :] - positions[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2) + softening * softening)
    qq = charges[:, None] * charges[None, :]
    potential = float(np.triu(qq / d, k=1).sum())
    return kinetic + potential


def gen_nbody_dataset(
    n_traj: int, T: int, seed: int, config: NBodyConfig | None = None
) -> list[Trajectory]:
    """Seeded n-body dataset; evolution is vectorized across trajectories."""
    if n_traj <= 0 or T <= 0:
        raise ValueError("n_traj and T must be positive")
    config = config or NBodyConfig()
    n = config.n_bodies
    x = np.empty((n_traj, n, 3))
    v = np.empty((n_traj, n, 3))
    q = np.empty((n_traj, n))
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        x[i] = rng.normal(0.0, config.pos_sigma, size=(n, 3))
        v[i] = rng.normal(0.0, config.vel_sigma, size=(n, 3))
        q[i] = rng.integers(0, 2, size=n) * 2.0 - 1.0
    frames_x = np.empty((T + 1, n_traj, n, 3))
    frames_v = np.empty_like(frames_x)
    frames_x[0], frames_v[0] = x, v
    for t in range(T):
        v = v + config.dt * _nbody_accel(x, q, config.softening)
        x = x + config.dt * v
        frames_x[t + 1], frames_v[t + 1] = x, v
    return [
        Trajectory(frames_x[:, i].copy(), frames_v[:, i].copy(), q[i].copy())
        for i in range(n_traj)
    ]


# ---------------------------------------------------------------------------
# trajectory files


def save_trajectory(path, traj: Trajectory) -> None:
    """Plain-text trajectory: "n T dim" header, optional charges line, one frame per line."""
    n, dim = traj.n_bodies, traj.dim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n} {traj.n_frames - 1} {dim}\n")
        if traj.charges is not None:
            fh.write("charges " + " ".join(repr(float(c)) for c in traj.charges) + "\n")
        for t in range(traj.n_frames):
            row = np.concatenate([traj.positions[t].reshape(-1), traj.velocities[t].reshape(-1)])
            fh.write(" ".join(repr(float(val)) for val in row) + "\n")


def load_trajectory(path) -> Trajectory:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: expected header 'n T dim'")
        n, T, dim = (int(p) for p in header)
        charges = None
        pos = fh.tell()
        line = fh.readline()
        if line.startswith("charges"):
            charges = np.array([float(p) for p in line.split()[1:]])
        else:
            fh.seek(pos)
        positions = np.empty((T + 1, n, dim))
        velocities = np.empty((T + 1, n, dim))
        for t in range(T + 1):
            vals = np.array([float(p) for p in fh.readline().split()])
            if vals.size != 2 * n * dim:
                raise ValueError(f"{path}: frame {t} has wrong width")
            positions[t] = vals[: n * dim].reshape(n, dim)
            velocities[t] = vals[n * dim :].reshape(n, dim)
    return Trajectory(positions, velocities, charges)
