"""Evaluation measures: reconstruction F1/BCE, velocity MSE, and the two
time-series complexity measures used to compare learned and ground-truth
dynamics (sample entropy, correlation dimension)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simulators import Trajectory


@dataclass
class SeriesComplexity:
    """Complexity summary of a trajectory plus the parameters that produced it."""

    sample_entropy: float
    correlation_dimension: float
    params: dict = field(default_factory=dict)


def f1_score(adjacency: np.ndarray, soft: np.ndarray, threshold: float) -> float:
    """Binary F1 over unordered off-diagonal pairs; edges are the positive class.

    An empty graph predicted empty counts as a perfect match (F1 = 1).
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must be in (0, 1)")
    a = np.asarray(adjacency)
    p = np.asarray(soft)
    if a.shape != p.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency and prediction must be equal square matrices")
    iu = np.triu_indices(a.shape[0], k=1)
    actual = a[iu] > 0.5
    predicted = p[iu] >= threshold
    tp = int(np.sum(actual & predicted))
    fp = int(np.sum(~actual & predicted))
    fn = int(np.sum(actual & ~predicted))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def bce_score(adjacency: np.ndarray, soft: np.ndarray, eps: float = 1e-7) -> float:
    """Mean binary cross-entropy over off-diagonal ordered pairs."""
    a = np.asarray(adjacency, dtype=np.float64)
    p = np.clip(np.asarray(soft, dtype=np.float64), eps, 1.0 - eps)
    mask = ~np.eye(a.shape[0], dtype=bool)
    terms = -(a * np.log(p) + (1.0 - a) * np.log(1.0 - p))
    return float(terms[mask].mean())


def velocity_mse(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared velocity error over frames, nodes and components."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("shape mismatch")
    return float(((predicted - truth) ** 2).mean())


def _template_distances(x: np.ndarray, m: int) -> tuple[np.ndarray, int]:
    """Chebyshev distances between all pairs of the first N-m length-m templates."""
    n_t = x.size - m
    d = np.zeros((n_t, n_t))
    for k in range(m):
        seg = x[k : k + n_t]
        np.maximum(d, np.abs(seg[:, None] - seg[None, :]), out=d)
    return d, n_t


def sample_entropy(series, m: int = 2, r_factor: float = 0.2) -> float:
    """-ln(A/B) with template length m, tolerance r_factor*std, Chebyshev
    distance and self-matches excluded. Returns +inf when no (m+1)-templates
    match (a flagged sentinel, never silently dropped); a constant series has
    all templates matching and scores 0.
    """
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if x.size <= m + 1:
        raise ValueError(f"series length {x.size} too short for m={m}")
    r = r_factor * float(x.std())
    d, n_t = _template_distances(x, m)
    b = int(np.sum(d <= r)) - n_t  # drop the diagonal self-matches
    seg = x[m : m + n_t]
    np.maximum(d, np.abs(seg[:, None] - seg[None, :]), out=d)
    a = int(np.sum(d <= r)) - n_t
    if a == 0 or b == 0:
        return float("inf")
    return float(-np.log(a / b))


def correlation_dimension(points: np.ndarray, radius_grid: np.ndarray | None = None) -> float:
    """Pair-counting scaling exponent: least-squares slope of log C(rho)
    against log rho. The default grid spans the 5th to 50th percentile of
    pairwise distances with 8 log-spaced radii.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 100:
        raise ValueError("need at least 100 points")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    iu = np.triu_indices(pts.shape[0], k=1)
    pair_d = dist[iu]
    if radius_grid is None:
        lo, hi = np.percentile(pair_d, [5.0, 50.0])
        if lo <= 0 or hi <= 0:
            raise ValueError("degenerate point set (coincident points dominate)")
        radius_grid = np.geomspace(lo, hi, 8)
    radius_grid = np.asarray(radius_grid, dtype=np.float64)
    if radius_grid.size < 5 or np.any(radius_grid <= 0):
        raise ValueError("radius grid must hold >= 5 positive radii")
    counts = np.array([(pair_d <= rho).sum() for rho in radius_grid], dtype=np.float64)
    frac = counts / pair_d.size
    keep = frac > 0
    if keep.sum() < 2:
        raise ValueError("radius grid too small: no pairs counted")
    slope = np.polyfit(np.log(radius_grid[keep]), np.log(frac[keep]), 1)[0]
    return float(slope)


def trajectory_complexity(traj: Trajectory, m: int = 2, r_factor: float = 0.2) -> SeriesComplexity:
    """Average per-node complexity of a trajectory's positions.

    Sample entropy is computed per node and per spatial dimension on the
    scalar position series, then averaged; the correlation dimension is
    computed per node on its position sequence as a point set, then averaged.
    """
    pos = traj.positions
    ses = [
        sample_entropy(pos[:, node, k], m=m, r_factor=r_factor)
        for node in range(traj.n_bodies)
        for k in range(traj.dim)
    ]
    cds = [correlation_dimension(pos[:, node, :]) for node in range(traj.n_bodies)]
    return SeriesComplexity(
        sample_entropy=float(np.mean(ses)),
        correlation_dimension=float(np.mean(cds)),
        params={"m": m, "r_factor": r_factor, "n_radii": 8, "radius_percentiles": (5.0, 50.0)},
    )
