"""End-to-end runs: standardise, build the graph, train, evaluate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NormStats, UniformGrid, split_train_test, zscore_apply, zscore_fit
from .injection import InjectionContext
from .topology import NodeLayout, build_adjacency, distance_matrix
from .training import (
    EvalConfig,
    EvalResult,
    ModelDetector,
    TrainConfig,
    TrainResult,
    evaluate,
    train_two_phase,
)


@dataclass
class TopologySpec:
    kind: str = "topk"
    cd: float | None = None
    k: int | None = 3


@dataclass
class Prepared:
    train: np.ndarray
    test: np.ndarray
    stats: NormStats
    adjacency: np.ndarray
    distances: np.ndarray
    ctx: InjectionContext


@dataclass
class ExperimentResult:
    prepared: Prepared
    training: TrainResult
    evaluation: EvalResult


def prepare(grid: UniformGrid, coords, topology: TopologySpec, train_fraction: float = 0.6) -> Prepared:
    tr, te = split_train_test(grid.n_ticks, train_fraction)
    stats = zscore_fit(grid, tr)
    z = zscore_apply(grid, stats).values
    layout = NodeLayout.from_points(coords)
    adjacency = build_adjacency(topology.kind, layout, cd=topology.cd, k=topology.k)
    dist = distance_matrix(layout)
    ctx = InjectionContext(stats.upper, stats.lower, dist)
    return Prepared(z[:, :, tr[0] : tr[1]], z[:, :, te[0] : te[1]], stats, adjacency, dist, ctx)


def run_experiment(
    grid: UniformGrid,
    coords,
    topology: TopologySpec,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    train_fraction: float = 0.6,
) -> ExperimentResult:
    prep = prepare(grid, coords, topology, train_fraction)
    ctx = InjectionContext(prep.ctx.upper, prep.ctx.lower, prep.distances, train_cfg.p, train_cfg.k_neighbors)
    trained = train_two_phase(prep.train, prep.adjacency, ctx, train_cfg)
    ev = evaluate(ModelDetector(trained.model), prep.test, train_cfg.window, prep.ctx, eval_cfg)
    return ExperimentResult(prep, trained, ev)
