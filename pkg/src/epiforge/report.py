"""Delimited report writers and companion figure rendering.

Every CSV here is a stable interface: byte-identical regeneration from the
same inputs is part of the pipeline's determinism contract, so floats are
written with repr (round-trippable) and row order is fixed. Figures are
rendered next to the delimited output as PNG line/histogram plots; no
choropleth/map rendering.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cleirnet import ForecastFrame, TrainingLog
from .dependency import DependencyScores, SweepTable
from .evaluation import MetricReport, StateRanking


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_forecast_csv(path, frame: ForecastFrame, county_ids,
                       day_labels=None) -> None:
    """county_id, date, predicted_cumulative, predicted_delta rows."""
    horizon = frame.horizon
    if day_labels is None:
        day_labels = [str(frame.base_day + 1 + i) for i in range(horizon)]
    rows = []
    for c, cid in enumerate(county_ids):
        for i in range(horizon):
            rows.append((cid, day_labels[i],
                         float(frame.predictions[c, i]),
                         float(frame.deltas[c, i])))
    _write_rows(path, ("county_id", "date", "predicted_cumulative",
                       "predicted_delta"), rows)


def write_metrics_json(path, reports: dict[str, MetricReport],
                       extra: dict | None = None) -> None:
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    if extra:
        payload["context"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_day_csv(path, report: MetricReport, day_labels=None) -> None:
    n = report.per_day_mse.shape[0]
    if day_labels is None:
        day_labels = [str(i + 1) for i in range(n)]
    rows = [(day_labels[i], float(report.per_day_mse[i]),
             float(report.per_day_mse[i] - report.se_band[i]),
             float(report.per_day_mse[i] + report.se_band[i]))
            for i in range(n)]
    _write_rows(path, ("day", "mse", "band_lo", "band_hi"), rows)


def write_state_rank_csv(path, ranking: StateRanking) -> None:
    rows = [(r["state"], float(r["ratio"]), r["rank"]) for r in ranking.rows]
    _write_rows(path, ("state", "ratio", "rank"), rows)


def write_dependency_csv(path, county_ids, scores: DependencyScores) -> None:
    rows = [(cid, float(scores.raw[i]), float(scores.normalized[i]),
             int(scores.n_neighbors[i]), int(scores.degenerate[i]))
            for i, cid in enumerate(county_ids)]
    _write_rows(path, ("county_id", "raw_mi", "normalized_mi", "n_neighbors",
                       "degenerate_flag"), rows)


def write_mask_csv(path, county_ids, mask, delta: float) -> None:
    rows = [(cid, int(mask[i]), float(delta))
            for i, cid in enumerate(county_ids)]
    _write_rows(path, ("county_id", "keep", "delta"), rows)


def write_sweep_csv(path, table: SweepTable) -> None:
    rows = [(float(r.delta), float(r.removed_fraction),
             None if r.mse is None else float(r.mse),
             None if r.weighted_mse is None else float(r.weighted_mse),
             r.error or "") for r in table.rows]
    _write_rows(path, ("delta", "removed_fraction", "mse", "weighted_mse",
                       "error"), rows)


def write_tdefsi_arms_csv(path, logs) -> None:
    rows = [(log.arm, float(log.train_mse), float(log.valid_mse),
             float(log.train_loss), float(log.valid_loss)) for log in logs]
    _write_rows(path, ("arm", "train_mse", "valid_mse", "train_loss",
                       "valid_loss"), rows)


def write_training_log_json(path, log: TrainingLog, meta: dict | None = None
                            ) -> None:
    payload = log.to_dict()
    if meta:
        payload["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- figures ---------------------------------------------------------------

def _save(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_per_day_mse(path, reports: dict[str, MetricReport]) -> None:
    """Per-day forecast MSE with +/- (1/5) standard-error bands."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rep in reports.items():
        days = np.arange(1, rep.per_day_mse.shape[0] + 1)
        ax.plot(days, rep.per_day_mse, marker="o", markersize=3, label=name)
        ax.fill_between(days, rep.per_day_mse - rep.se_band,
                        rep.per_day_mse + rep.se_band, alpha=0.2)
    ax.set_xlabel("forecast day")
    ax.set_ylabel("MSE across counties")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def fig_training_curves(path, logs: dict[str, list[dict]]) -> None:
    """Train/validation loss traces per model or arm."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, epochs in logs.items():
        xs = [e["epoch"] for e in epochs]
        ax.plot(xs, [e["train_loss"] for e in epochs], label=f"{name} train")
        ax.plot(xs, [e["valid_loss"] for e in epochs], linestyle="--",
                label=f"{name} valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def fig_delta_sweep(path, table: SweepTable) -> None:
    rows = [r for r in table.rows if r.mse is not None]
    fig, ax = plt.subplots(figsize=(7, 4))
    deltas = [r.delta for r in rows]
    ax.plot(deltas, [r.mse for r in rows], marker="o", label="MSE")
    ax.set_xlabel("delta")
    ax.set_ylabel("MSE")
    ax2 = ax.twinx()
    ax2.plot(deltas, [r.weighted_mse for r in rows], marker="s",
             color="tab:orange", label="weighted MSE")
    ax2.set_ylabel("weighted MSE")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines])
    fig.tight_layout()
    _save(fig, path)


def fig_mi_distribution(path, normalized_scores) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(np.asarray(normalized_scores), bins=20)
    ax.set_xlabel("normalized county dependency")
    ax.set_ylabel("counties")
    fig.tight_layout()
    _save(fig, path)
