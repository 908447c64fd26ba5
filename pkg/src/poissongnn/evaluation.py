"""Per-sample accuracy and timing of a trained model against the LU reference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baseline import timed_compare
from .model import ModelParams


@dataclass(frozen=True)
class SampleMetrics:
    index: int
    n_nodes: int
    residual_l2: float  # sqrt(||A U^k - B||^2)
    error_l2: float  # ||U^k - U_lu||
    relative_error: float  # ||U^k - U_lu|| / ||U_lu||
    residual_curve: np.ndarray  # l2 residual for t = 0..k
    gnn_time: float
    lu_time: float

    @property
    def ratio(self) -> float:
        return self.lu_time / self.gnn_time


def evaluate(params: ModelParams, dataset: Sequence, k: int = 20, solver=None) -> list[SampleMetrics]:
    out = []
    for i, sample in enumerate(dataset):
        c = timed_compare(sample.graph, sample.system, params, k, solver=solver)
        out.append(SampleMetrics(i, sample.graph.n, float(c.residuals[-1]), c.error, c.relative_error,
                                 c.residuals, c.gnn_time, c.lu_time))
    return out


def summarize(metrics: Sequence[SampleMetrics]) -> dict[str, dict[str, float]]:
    """Mean and median of every scalar column; empty dict for no samples."""
    if not metrics:
        return {}
    cols = {
        "n_nodes": [m.n_nodes for m in metrics],
        "residual_l2": [m.residual_l2 for m in metrics],
        "error_l2": [m.error_l2 for m in metrics],
        "relative_error": [m.relative_error for m in metrics],
        "gnn_time": [m.gnn_time for m in metrics],
        "lu_time": [m.lu_time for m in metrics],
        "ratio": [m.ratio for m in metrics],
    }
    return {
        "mean": {k: float(np.mean(v)) for k, v in cols.items()},
        "median": {k: float(np.median(v)) for k, v in cols.items()},
    }
