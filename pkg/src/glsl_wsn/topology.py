"""Node layouts and the complete / coverage-distance / top-K adjacency builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class NodeLayout:
    coords: np.ndarray  # (N, 2)
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) == 0:
            raise TopologyError(f"coords must be (N, 2), got {c.shape}")
        bounds = self.bounds
        if bounds is None:
            bounds = (float(max(c[:, 0].max(), 0.0)), float(max(c[:, 1].max(), 0.0)))
        if np.any(c < 0) or np.any(c[:, 0] > bounds[0]) or np.any(c[:, 1] > bounds[1]):
            raise TopologyError("node coordinates outside [0, R_x] x [0, R_y]")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def from_points(cls, points) -> "NodeLayout":
        """Layout from arbitrary points, shifted so the minimum corner is the origin."""
        p = np.asarray(points, dtype=np.float64)
        return cls(p - p.min(axis=0, keepdims=True))

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    def subset(self, idx) -> "NodeLayout":
        return NodeLayout.from_points(self.coords[list(idx)])


def distance_matrix(layout: NodeLayout) -> np.ndarray:
    c = layout.coords
    diff = c[:, None, :] - c[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(d, 0.0)
    return d


def _with_loops(a: np.ndarray, self_loops: bool) -> np.ndarray:
    np.fill_diagonal(a, 1.0 if self_loops else 0.0)
    return a


def build_complete(n: int, self_loops: bool = True) -> np.ndarray:
    if n < 1:
        raise TopologyError("need at least one node")
    return _with_loops(np.ones((n, n)), self_loops)


def build_coverage(layout: NodeLayout, cd: float, self_loops: bool = True) -> np.ndarray:
    """Edge between every pair within communication radius ``cd``."""
    if cd <= 0:
        raise TopologyError("coverage distance must be positive")
    a = (distance_matrix(layout) <= cd).astype(np.float64)
    return _with_loops(a, self_loops)


def nearest_neighbors(dist: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nodes nearest to ``i`` (self excluded), ties to the lower index."""
    n = len(dist)
    others = np.array([j for j in range(n) if j != i], dtype=int)
    order = np.lexsort((others, dist[i, others]))
    return others[order[:k]]


def build_topk(layout: NodeLayout, k: int, self_loops: bool = True) -> np.ndarray:
    """Directed k-nearest-neighbour graph: row ``i`` marks the neighbours of ``i``."""
    n = layout.n_nodes
    if not 1 <= k <= n - 1:
        raise TopologyError(f"K must be in [1, {n - 1}], got {k}")
    dist = distance_matrix(layout)
    a = np.zeros((n, n))
    for i in range(n):
        a[i, nearest_neighbors(dist, i, k)] = 1.0
    return _with_loops(a, self_loops)


def build_adjacency(
    kind: str,
    layout: NodeLayout,
    cd: float | None = None,
    k: int | None = None,
    self_loops: bool = True,
) -> np.ndarray:
    if kind == "complete":
        return build_complete(layout.n_nodes, self_loops)
    if kind == "coverage":
        if cd is None:
            raise TopologyError("coverage topology needs --cd")
        return build_coverage(layout, cd, self_loops)
    if kind == "topk":
        if k is None:
            raise TopologyError("topk topology needs --topk")
        if layout.n_nodes == 1:
            return build_complete(1, self_loops)
        # small clusters may have fewer than K other nodes
        return build_topk(layout, min(k, layout.n_nodes - 1), self_loops)
    raise TopologyError(f"unknown topology {kind!r}")
