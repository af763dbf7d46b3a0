"""Naive benchmark and the forecast metric suite.

Metrics mirror the reporting schema used throughout the toolkit: MSE,
population/horizon-weighted MSE, MSLE, MAE, and PCCI (the total predicted
national cumulative increase over the horizon, which is exactly zero for
the no-change benchmark).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cleirnet import ForecastFrame, weighted_mse_loss
from .geo import CaseSeries, CountyTable


class EvalError(Exception):
    pass


@dataclass
class MetricReport:
    mse: float
    weighted_mse: float
    msle: float
    mae: float
    pcci: float
    per_day_mse: np.ndarray
    se_band: np.ndarray  # +/- (1/5) * standard error per day

    def to_dict(self) -> dict:
        return {"mse": self.mse, "weighted_mse": self.weighted_mse,
                "msle": self.msle, "mae": self.mae, "pcci": self.pcci,
                "per_day_mse": self.per_day_mse.tolist(),
                "se_band": self.se_band.tolist()}


def naive_no_change(series, base_day: int, horizon: int) -> ForecastFrame:
    """Forecast every future day equal to the base day's value."""
    cumulative = series.cumulative if isinstance(series, CaseSeries) else np.asarray(series)
    n_days = cumulative.shape[1]
    if not 0 <= base_day < n_days:
        raise EvalError(f"base day {base_day} outside series of {n_days} days")
    base = cumulative[:, base_day].astype(np.float64)
    deltas = np.zeros((base.shape[0], horizon), dtype=np.float64)
    return ForecastFrame.from_deltas(base_day, base, deltas,
                                     meta={"model": "naive-no-change"})


def per_day_series(forecast: ForecastFrame,
                   truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-day MSE over counties and the +/- (1/5)*SE band half-width."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != forecast.predictions.shape:
        raise EvalError(f"truth shape {truth.shape} != "
                        f"forecast {forecast.predictions.shape}")
    sq = (forecast.predictions - truth) ** 2
    n_c = sq.shape[0]
    mse_d = sq.mean(axis=0)
    se = sq.std(axis=0) / np.sqrt(n_c)
    return mse_d, se / 5.0


def compute_metrics(forecast: ForecastFrame, truth: np.ndarray,
                    populations: np.ndarray) -> MetricReport:
    truth = np.asarray(truth, dtype=np.float64)
    pred = forecast.predictions
    if truth.shape != pred.shape:
        raise EvalError(f"truth shape {truth.shape} != forecast {pred.shape}")
    err = pred - truth
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    # negative predictions are floored at 0 inside the log only
    msle = float(np.mean((np.log1p(np.maximum(pred, 0.0))
                          - np.log1p(truth)) ** 2))
    pcci = float(np.sum(pred[:, -1] - forecast.base))
    wmse = weighted_mse_loss(pred, truth, populations)
    per_day, band = per_day_series(forecast, truth)
    return MetricReport(mse=mse, weighted_mse=float(wmse), msle=msle,
                        mae=mae, pcci=pcci, per_day_mse=per_day,
                        se_band=band)


@dataclass
class StateRanking:
    rows: list[dict] = field(default_factory=list)  # state, ratio, rank

    @property
    def best(self) -> str:
        return self.rows[0]["state"]

    @property
    def worst(self) -> str:
        return self.rows[-1]["state"]

    @property
    def median(self) -> str:
        return self.rows[(len(self.rows) - 1) // 2]["state"]


def rank_states(forecast: ForecastFrame, truth: np.ndarray,
                table: CountyTable, naive: ForecastFrame) -> StateRanking:
    """Per-state MSE(model)/MSE(naive), ascending; inf where naive is exact."""
    truth = np.asarray(truth, dtype=np.float64)
    model_sq = (forecast.predictions - truth) ** 2
    naive_sq = (naive.predictions - truth) ** 2
    by_state: dict[str, list[int]] = {}
    for idx, rec in enumerate(table.records):
        by_state.setdefault(rec.state, []).append(idx)

    rows = []
    for state, idxs in by_state.items():
        m = float(model_sq[idxs].mean())
        n = float(naive_sq[idxs].mean())
        ratio = m / n if n > 0 else float("inf")
        rows.append({"state": state, "ratio": ratio})
    rows.sort(key=lambda r: (r["ratio"], r["state"]))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return StateRanking(rows)
