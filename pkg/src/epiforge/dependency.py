"""Mutual-information county dependency scoring and threshold selection.

Per-county dependency is the mean MI between a county's case series and
each adjacent county's, estimated with an equal-frequency binned plug-in
(the estimator sits behind estimate_mi so an alternative can be slotted
in). Scores are min-max normalized and counties below a threshold delta
are masked out; a delta sweep re-evaluates a forecast under each mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo import AdjacencyList, CaseSeries


class DependencyError(Exception):
    pass


@dataclass(frozen=True)
class MiConfig:
    bins: int = 8
    min_length: int = 30
    transform: str = "daily-difference"  # or "raw"

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 histogram bins")
        if self.transform not in ("raw", "daily-difference"):
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass
class DependencyScores:
    raw: np.ndarray          # mean neighbor MI per county
    normalized: np.ndarray   # min-max normalized to [0, 1]
    degenerate: np.ndarray   # constant series / isolated county flags
    n_neighbors: np.ndarray
    flat_scores: bool = False  # all raw scores equal; normalization degenerate


def _bin_equal_frequency(x: np.ndarray, bins: int) -> np.ndarray | None:
    """Assign equal-frequency bin labels; None when x is constant."""
    if np.all(x == x[0]):
        return None
    edges = np.quantile(x, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    edges = np.unique(edges)
    if edges.size == 0:
        return None
    return np.searchsorted(edges, x, side="right")


def estimate_mi(x: np.ndarray, y: np.ndarray, config: MiConfig = MiConfig()
                ) -> float:
    """Plug-in MI (nats) on an equal-frequency 2-D histogram.

    Non-negative and symmetric; constant series yield 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DependencyError(
            f"series lengths differ: {x.shape} vs {y.shape}")
    if x.size < config.min_length:
        raise DependencyError(
            f"series length {x.size} below minimum {config.min_length}")

    bx = _bin_equal_frequency(x, config.bins)
    by = _bin_equal_frequency(y, config.bins)
    if bx is None or by is None:
        return 0.0

    nx, ny = bx.max() + 1, by.max() + 1
    joint = np.zeros((nx, ny), dtype=np.float64)
    np.add.at(joint, (bx, by), 1.0)
    joint /= x.size
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    ratio = joint[nz] / (np.outer(px, py)[nz])
    mi = float(np.sum(joint[nz] * np.log(ratio)))
    return max(mi, 0.0)


def _transform_series(cumulative: np.ndarray, transform: str) -> np.ndarray:
    if transform == "raw":
        return cumulative
    inc = np.diff(cumulative, axis=1, prepend=0.0)
    return np.maximum(inc, 0.0)


def neighbor_dependency(series, adjacency: AdjacencyList,
                        config: MiConfig = MiConfig()) -> DependencyScores:
    """Mean MI with adjacent counties; isolated counties get 0, flagged."""
    cumulative = (series.cumulative if isinstance(series, CaseSeries)
                  else np.asarray(series, dtype=np.float64))
    if cumulative.shape[0] != len(adjacency):
        raise DependencyError(
            f"{cumulative.shape[0]} series vs {len(adjacency)} adjacency rows")
    data = _transform_series(cumulative, config.transform)

    n = data.shape[0]
    raw = np.zeros(n, dtype=np.float64)
    degenerate = np.zeros(n, dtype=bool)
    n_neighbors = np.array([len(nb) for nb in adjacency.neighbors])
    for i in range(n):
        neighbors = adjacency.neighbors[i]
        if not neighbors:
            degenerate[i] = True
            continue
        if np.all(data[i] == data[i, 0]):
            degenerate[i] = True
            continue
        raw[i] = float(np.mean([estimate_mi(data[i], data[j], config)
                                for j in neighbors]))
    normalized, flat = normalize_scores(raw)
    return DependencyScores(raw=raw, normalized=normalized,
                            degenerate=degenerate, n_neighbors=n_neighbors,
                            flat_scores=flat)


def normalize_scores(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """(raw - min) / (max - min); all zeros (flagged) when max == min."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise DependencyError("empty score vector")
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-300:
        return np.zeros_like(raw), True
    return (raw - lo) / (hi - lo), False


def select_counties(normalized: np.ndarray, delta: float) -> np.ndarray:
    """Keep mask: 0 exactly where normalized score < delta (strict)."""
    if not 0.0 <= delta <= 1.0:
        raise DependencyError(f"delta {delta} outside [0, 1]")
    return (np.asarray(normalized) >= delta).astype(np.int64)


@dataclass
class SweepRow:
    delta: float
    removed_fraction: float
    mse: float | None
    weighted_mse: float | None
    error: str | None = None


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)


def delta_sweep(series, adjacency: AdjacencyList, deltas,
                evaluate, config: MiConfig = MiConfig()) -> SweepTable:
    """Evaluate a forecast under the keep mask for each ascending delta.

    evaluate(mask) must return (mse, weighted_mse); failures are recorded
    per row and the sweep continues.
    """
    deltas = list(deltas)
    if sorted(deltas) != deltas:
        raise DependencyError("deltas must be sorted ascending")
    scores = neighbor_dependency(series, adjacency, config)
    table = SweepTable()
    for delta in deltas:
        mask = select_counties(scores.normalized, delta)
        removed = float(np.mean(mask == 0))
        try:
            mse, wmse = evaluate(mask)
            table.rows.append(SweepRow(delta, removed, float(mse), float(wmse)))
        except Exception as exc:  # recorded, sweep continues
            table.rows.append(SweepRow(delta, removed, None, None, str(exc)))
    return table
