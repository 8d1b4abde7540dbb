"""GLSL+: K-means node partitioning, PAA time compression, per-cluster runs."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .data import UniformGrid
from .pipeline import ExperimentResult, TopologySpec, run_experiment
from .training import ConfusionCounts, EvalConfig, MetricsReport, TrainConfig, metrics

MAX_ITER = 100


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray  # (N,) cluster id per node
    centroids: np.ndarray  # (k, 2)
    iterations: int
    objective: list[float]  # after each assignment step

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def _sq_dists(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff**2).sum(-1)


def _plusplus(points, k, rng):
    n = len(points)
    idx = [int(rng.integers(n))]
    for _ in range(1, k):
        d = _sq_dists(points, points[idx]).min(axis=1)
        total = d.sum()
        if total == 0:
            rest = [i for i in range(n) if i not in idx]
            idx.append(int(rng.choice(rest)))
        else:
            idx.append(int(rng.choice(n, p=d / total)))
    return points[idx].copy()


def kmeans(coords, k: int, seed: int = 0, max_iter: int = MAX_ITER) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeds.

    An emptied cluster is reseeded at the point farthest from its current
    centroid. Stops once assignments repeat or after ``max_iter`` rounds.
    """
    pts = np.asarray(coords, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ClusteringError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus(pts, k, rng)
    labels = None
    objective: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(pts, centroids)
        new = d.argmin(axis=1)
        for c in range(k):
            if not np.any(new == c):
                far = int(_sq_dists(pts, centroids[c : c + 1])[:, 0].argmax())
                centroids[c] = pts[far]
                new = _sq_dists(pts, centroids).argmin(axis=1)
        objective.append(float(_sq_dists(pts, centroids)[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = np.stack([pts[labels == c].mean(axis=0) for c in range(k)])
    return ClusterAssignment(k, labels, centroids, it, objective)


def merge_singletons(assign: ClusterAssignment, coords) -> ClusterAssignment:
    """Fold every one-node cluster into the cluster with the nearest centroid, then renumber."""
    pts = np.asarray(coords, dtype=np.float64)
    labels = assign.labels.copy()
    if len(pts) < 2:
        return assign
    while True:
        ids, sizes = np.unique(labels, return_counts=True)
        if len(ids) < 2 or sizes.min() >= 2:
            break
        lone = int(ids[sizes.argmin()])
        others = [c for c in ids if c != lone]
        cents = np.stack([pts[labels == c].mean(axis=0) for c in others])
        node = pts[labels == lone]
        labels[labels == lone] = others[int(_sq_dists(node, cents)[0].argmin())]
    uniq = np.unique(labels)
    remap = {int(c): i for i, c in enumerate(uniq)}
    labels = np.array([remap[int(c)] for c in labels])
    cents = np.stack([pts[labels == c].mean(axis=0) for c in range(len(uniq))])
    return ClusterAssignment(len(uniq), labels, cents, assign.iterations, assign.objective)


# --------------------------------------------------------------------------
# PAA


def paa(series, m: int, fractional: bool = False) -> np.ndarray:
    """Piecewise aggregate approximation of a length-n series down to ``m`` points.

    If ``m`` divides ``n`` each output is the mean of one block of ``n/m``
    samples. Otherwise the default truncates to the longest prefix made of
    whole ``n // m`` blocks (with a warning); ``fractional=True`` instead lets
    block boundaries fall between samples and weights the straddling samples
    by their overlap, which keeps every sample and the global mean.
    """
    y = np.asarray(series, dtype=np.float64)
    n = y.shape[-1]
    if not 1 <= m <= n:
        raise ValueError(f"PAA target length must be in [1, {n}], got {m}")
    if n % m == 0:
        return y.reshape(*y.shape[:-1], m, n // m).mean(axis=-1)
    if not fractional:
        block = n // m
        warnings.warn(f"PAA: {n} samples not divisible into {m} blocks; using the first {block * m}", stacklevel=2)
        return y[..., : block * m].reshape(*y.shape[:-1], m, block).mean(axis=-1)
    cum = np.concatenate([np.zeros(y.shape[:-1] + (1,)), np.cumsum(y, axis=-1)], axis=-1)
    edges = np.arange(m + 1) * (n / m)
    lo = np.minimum(np.floor(edges).astype(int), n - 1)
    frac = edges - lo
    integral = cum[..., lo] + frac * y[..., lo]
    return np.diff(integral, axis=-1) * (m / n)


def parse_ratio(text) -> Fraction:
    r = Fraction(str(text))
    if not 0 < r <= 1:
        raise ValueError(f"PAA ratio must be in (0, 1], got {text}")
    return r


def paa_grid(grid: UniformGrid, ratio: Fraction) -> UniformGrid:
    if ratio == 1:
        return grid
    m = int(grid.n_ticks * ratio)
    vals = paa(grid.values, m, fractional=True)
    return UniformGrid(vals, grid.node_ids, grid.mode_names, grid.period / float(ratio), grid.start)


# --------------------------------------------------------------------------
# clustered runs


@dataclass
class ClusterRun:
    cluster: int
    nodes: list[int]
    result: ExperimentResult

    @property
    def report(self) -> MetricsReport:
        return self.result.evaluation.report


@dataclass
class ClusteredResult:
    k: int
    ratio: Fraction
    assignment: ClusterAssignment
    clusters: list[ClusterRun]
    counts: ConfusionCounts
    report: MetricsReport
    seconds_per_checkpoint: float  # slowest cluster; clusters run side by side
    wall_per_checkpoint: float

    def aggregate_row(self) -> dict:
        return {
            "k": self.k,
            "paa": f"{self.ratio.numerator}/{self.ratio.denominator}",
            "f1": self.report.f1,
            "avg_running_time": self.seconds_per_checkpoint,
        }


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GLSL_THREADS", "1")))
    except ValueError:
        return 1


def run_clustered(
    grid: UniformGrid,
    coords,
    k: int,
    ratio,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    topology: TopologySpec | None = None,
    cluster_order=None,
) -> ClusteredResult:
    """Partition nodes with K-means, compress time with PAA and run GLSL per cluster.

    Confusion counts are summed over clusters before metrics are computed.
    """
    topology = topology or TopologySpec()
    ratio = parse_ratio(ratio)
    coords = np.asarray(coords, dtype=np.float64)
    assign = merge_singletons(kmeans(coords, k, seed=train_cfg.seed), coords)
    reduced = paa_grid(grid, ratio)

    def job(c: int) -> ClusterRun:
        nodes = assign.members(c).tolist()
        sub = reduced.node_subset(nodes)
        res = run_experiment(sub, coords[nodes], topology, replace(train_cfg), replace(eval_cfg))
        return ClusterRun(c, nodes, res)

    order = list(range(assign.k)) if cluster_order is None else list(cluster_order)
    if sorted(order) != list(range(assign.k)):
        raise ClusteringError(f"cluster_order must permute 0..{assign.k - 1}")
    workers = min(_workers(), len(order))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            runs = list(pool.map(job, order))
    else:
        runs = [job(c) for c in order]
    runs.sort(key=lambda r: r.cluster)
    counts = ConfusionCounts()
    for r in runs:
        counts = counts + r.result.evaluation.counts
    slowest = max(r.result.evaluation.latency_per_checkpoint for r in runs)
    wall = max(r.result.evaluation.seconds_per_checkpoint for r in runs)
    return ClusteredResult(assign.k, ratio, assign, runs, counts, metrics(counts), slowest, wall)
