"""Command-line pipeline with reproducible TOML configs.

    epiforge <subcommand> --config <path> [--jobs N] [--out DIR] [--seed S]

Subcommands: simulate, gen-corpus, train-cleirnet, train-tdefsi, forecast,
evaluate, dependency, select, sweep-delta, report. Every stochastic
operation derives its seed from the global seed plus a stable label, and
every run writes a manifest with the effective config, its hash, and
sha256 hashes of all artifacts (timestamps live only in the manifest).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, cleirnet, dependency, evaluation, geo, nn, report
from . import seir, tdefsi
from .seeding import derive_seed

log = logging.getLogger("epiforge")


class ConfigError(Exception):
    pass


# schema: section -> key -> default (None means required when the section
# is used; type is inferred from the default otherwise)
_SCHEMA: dict[str, dict[str, object]] = {
    "global": {"seed": 0, "out": "runs/out"},
    "data": {"counties": "", "cases": "", "adjacency": "",
             "drop_aggregated_ny": True},
    "seir": {"days": 120, "h": 0.25, "n_train": 32, "n_valid": 4,
             "corpus": "corpus.jsonl", "keep_trajectories": False},
    "seir.ranges": {"mu_flow": [1e4, 1e7], "mu_spread": [1e3, 1e5],
                    "sigma": [0.1, 0.5], "gamma": [0.05, 0.3],
                    "lambda_e": [1e-6, 1e-4], "lambda_i": [0.1, 0.5]},
    "seir.params": {"mu_flow": 1e5, "mu_spread": 1e4, "sigma": 0.2,
                    "gamma": 0.1, "lambda_e": 1e-5, "lambda_i": 0.3},
    "cleirnet": {"n_tf": 3, "n_d": 16, "n_f": 14, "variant": "II",
                 "target_dropout": 0.25, "l1": 5e-5, "l2": 5e-5,
                 "lr": 0.001, "patience": 30, "max_epochs": 200,
                 "source": "cases", "scenario_index": 0, "ensemble": 1,
                 "checkpoint": "cleirnet.ckpt"},
    "tdefsi": {"k": 2, "hidden": 16, "dense": 32, "lam": 0.01, "mu": 1e-4,
               "dropout": 0.1, "lr": 0.001, "epochs": 60, "patience": 50,
               "arms": list(tdefsi.ARMS), "checkpoint": "tdefsi.ckpt"},
    "forecast": {"model": "cleirnet", "horizon": 14},
    "evaluate": {"holdout": 14},
    "dependency": {"bins": 8, "min_length": 30,
                   "transform": "daily-difference", "delta": 0.3,
                   "deltas": [0.0, 0.2, 0.4, 0.6, 0.8],
                   "sweep_max_epochs": 20},
    "report": {"figures": True},
}


def parse_config(path) -> dict:
    """Load and validate a TOML config; unknown keys are all reported."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    flat: dict[str, dict] = {}

    def _flatten(prefix, mapping):
        own = {}
        for key, value in mapping.items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict):
                _flatten(name, value)
            else:
                own[key] = value
        if own or prefix:
            flat[prefix] = own

    _flatten("", raw)
    flat.pop("", None)

    bad = []
    for section, keys in flat.items():
        if section not in _SCHEMA:
            bad.append(f"[{section}]")
            continue
        for key in keys:
            if key not in _SCHEMA[section]:
                bad.append(f"{section}.{key}")
    if bad:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(bad)))

    config = {}
    for section, schema in _SCHEMA.items():
        merged = dict(schema)
        merged.update(flat.get(section, {}))
        config[section] = merged
    return config


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """One CLI invocation: resolved config, output dir, artifact registry."""

    def __init__(self, config: dict, out_dir: Path, command: str,
                 jobs: int = 1):
        self.config = config
        self.out = out_dir
        self.command = command
        self.jobs = max(1, jobs)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def register(self, path: Path) -> Path:
        self.artifacts[path.name] = _sha256(path)
        return path

    def seed(self, label: str) -> int:
        return derive_seed(int(self.config["global"]["seed"]), label)

    def write_manifest(self) -> None:
        manifest = {
            "command": self.command,
            "config": self.config,
            "config_sha256": config_digest(self.config),
            "seed": self.config["global"]["seed"],
            "toolkit_version": __version__,
            "artifacts": self.artifacts,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"config is missing data.{what}")
    return value


def _load_table(run: Run) -> geo.CountyTable:
    data = run.config["data"]
    return geo.load_county_table(_require(data["counties"], "counties"),
                                 fmt="features")


def _load_cases(run: Run, table=None):
    data = run.config["data"]
    return geo.load_case_series(_require(data["cases"], "cases"), table,
                                drop_aggregated_ny=data["drop_aggregated_ny"])


def _ranges(run: Run) -> seir.ParamRanges:
    return seir.ParamRanges.from_dict(
        {k: tuple(v) for k, v in run.config["seir.ranges"].items()})


def _cleir_config(run: Run, n_c: int) -> cleirnet.CleirConfig:
    c = run.config["cleirnet"]
    return cleirnet.CleirConfig(
        n_c=n_c, n_tf=c["n_tf"], n_d=c["n_d"], n_f=c["n_f"], n_x=6,
        variant=c["variant"], target_dropout=c["target_dropout"],
        l1=c["l1"], l2=c["l2"], lr=c["lr"], patience=c["patience"],
        max_epochs=c["max_epochs"])


def _tdefsi_config(run: Run, n_counties: int) -> tdefsi.TdefsiConfig:
    c = run.config["tdefsi"]
    return tdefsi.TdefsiConfig(
        n_counties=n_counties, k=c["k"], hidden=c["hidden"], dense=c["dense"],
        lam=c["lam"], mu=c["mu"], dropout=c["dropout"], lr=c["lr"],
        epochs=c["epochs"], patience=c["patience"])


def _resolve_series(run: Run, table: geo.CountyTable) -> np.ndarray:
    """Cumulative counties x days matrix from cases file or corpus."""
    source = run.config["cleirnet"]["source"]
    if source == "cases":
        _, series = _load_cases(run, table)
        return series.cumulative
    if source == "corpus":
        corpus = seir.load_corpus(run.path(run.config["seir"]["corpus"]))
        if corpus.county_ids != table.ids:
            raise ConfigError("corpus county ids do not match the county table")
        idx = int(run.config["cleirnet"]["scenario_index"])
        return corpus.train[idx].cumulative
    raise ConfigError(f"unknown cleirnet.source {source!r}")


# -- subcommands -----------------------------------------------------------

def cmd_simulate(run: Run) -> None:
    table = _load_table(run)
    cfg = run.config["seir"]
    params = seir.MixParams.from_dict(run.config["seir.params"])
    flow = seir.build_flow_matrix(table, geo.distance_matrix(table),
                                  params.mu_flow)
    scenario = seir.simulate_scenario(table, flow, params, cfg["days"],
                                      cfg["h"], run.seed("simulate"))
    corpus = seir.ScenarioCorpus(county_ids=table.ids, days=cfg["days"],
                                 h=cfg["h"], seed=run.seed("simulate"),
                                 ranges=_ranges(run),
                                 scenarios=[scenario])
    out = run.path("scenario.jsonl")
    seir.save_corpus(corpus, out)
    run.register(out)
    log.info("simulated %d days over %d counties (%d clamp events)",
             cfg["days"], len(table), scenario.clamp_events)


def cmd_gen_corpus(run: Run) -> None:
    table = _load_table(run)
    cfg = run.config["seir"]
    corpus = seir.generate_corpus(table, _ranges(run), cfg["n_train"],
                                  cfg["n_valid"], cfg["days"], cfg["h"],
                                  run.seed("corpus"),
                                  keep_trajectories=cfg["keep_trajectories"],
                                  jobs=run.jobs)
    out = run.path(cfg["corpus"])
    seir.save_corpus(corpus, out)
    run.register(out)
    log.info("corpus: %d train + %d valid scenarios -> %s",
             cfg["n_train"], cfg["n_valid"], out)


def cmd_train_cleirnet(run: Run) -> None:
    table = _load_table(run)
    x_features = geo.build_feature_matrix(table).values.T
    series = _resolve_series(run, table)
    holdout = int(run.config["evaluate"]["holdout"])
    if holdout > 0:
        if series.shape[1] <= holdout + 1:
            raise ConfigError("series too short for the configured holdout")
        series = series[:, :-holdout]  # test window stays unseen
    config = _cleir_config(run, len(table))
    members = int(run.config["cleirnet"]["ensemble"])
    base = run.config["cleirnet"]["checkpoint"]
    for member in range(members):
        seed = run.seed(f"cleirnet-member-{member}")
        store, tlog = cleirnet.train_cleirnet(series, table, x_features,
                                              config, seed)
        name = base if members == 1 else f"{Path(base).stem}-{member}.ckpt"
        ckpt = run.path(name)
        nn.save_checkpoint(store, ckpt, cleirnet.MODEL_TAG,
                           meta={"config": config.to_dict(), "seed": seed})
        run.register(ckpt)
        log_path = run.path(f"{Path(name).stem}-training.json")
        report.write_training_log_json(log_path, tlog, meta={"seed": seed})
        run.register(log_path)
        log.info("member %d: best epoch %d, valid loss %.6g",
                 member, tlog.best_epoch, tlog.best_valid_loss)


def cmd_train_tdefsi(run: Run) -> None:
    corpus = seir.load_corpus(run.path(run.config["seir"]["corpus"]))
    config = _tdefsi_config(run, len(corpus.county_ids))
    arms = run.config["tdefsi"]["arms"]
    seed = run.seed("tdefsi")
    logs = []
    for arm in arms:
        store, stats, arm_log = tdefsi.tdefsi_train(
            corpus, config, tdefsi.ArmFlags.for_arm(arm), seed, arm_name=arm)
        logs.append(arm_log)
        suffix = arm.replace("+", "_")
        ckpt = run.path(f"tdefsi-{suffix}.ckpt")
        nn.save_checkpoint(store, ckpt, tdefsi.MODEL_TAG,
                           meta={"config": config.to_dict(), "arm": arm,
                                 "stats": stats.to_dict(), "seed": seed})
        run.register(ckpt)
        log.info("arm %-24s train_loss %.6g valid_loss %.6g",
                 arm, arm_log.train_loss, arm_log.valid_loss)
    arms_csv = run.path("tdefsi-arms.csv")
    report.write_tdefsi_arms_csv(arms_csv, logs)
    run.register(arms_csv)
    epochs_json = run.path("tdefsi-training.json")
    with open(epochs_json, "w", encoding="utf-8") as fh:
        json.dump([l.to_dict() for l in logs], fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.register(epochs_json)


def cmd_forecast(run: Run) -> None:
    table = _load_table(run)
    horizon = int(run.config["forecast"]["horizon"])
    model = run.config["forecast"]["model"]
    if model != "cleirnet":
        raise ConfigError("forecast currently drives the cleirnet checkpoint; "
                          "tdefsi forecasts are produced by train-tdefsi runs")
    series = _resolve_series(run, table)
    store, tag, meta = nn.load_checkpoint(
        run.path(run.config["cleirnet"]["checkpoint"]))
    if tag != cleirnet.MODEL_TAG:
        raise ConfigError(f"checkpoint has model tag {tag!r}")
    config = cleirnet.CleirConfig.from_dict(meta["config"])
    config = dataclasses.replace(config, n_f=horizon)
    x_features = geo.build_feature_matrix(table).values.T
    frame = cleirnet.forecast_cleirnet(store, series, x_features, config,
                                       meta={"seed": meta.get("seed")})
    out = run.path("forecast.csv")
    report.write_forecast_csv(out, frame, table.ids)
    run.register(out)
    log.info("forecast of %d days from day %d -> %s",
             horizon, frame.base_day, out)


def _evaluate_frames(run: Run, table, series) -> None:
    holdout = int(run.config["evaluate"]["holdout"])
    if series.shape[1] <= holdout + 1:
        raise ConfigError("series too short for the configured holdout")
    train_part = series[:, :-holdout]
    truth = series[:, -holdout:]
    base_day = train_part.shape[1] - 1

    store, tag, meta = nn.load_checkpoint(
        run.path(run.config["cleirnet"]["checkpoint"]))
    config = cleirnet.CleirConfig.from_dict(meta["config"])
    config = dataclasses.replace(config, n_f=holdout)
    x_features = geo.build_feature_matrix(table).values.T
    frame = cleirnet.forecast_cleirnet(store, train_part, x_features, config)
    naive = evaluation.naive_no_change(train_part, base_day, holdout)

    pops = table.populations
    reports = {"cleirnet": evaluation.compute_metrics(frame, truth, pops),
               "naive": evaluation.compute_metrics(naive, truth, pops)}
    ranking = evaluation.rank_states(frame, truth, table, naive)

    metrics_json = run.path("evaluation.json")
    report.write_metrics_json(metrics_json, reports,
                              extra={"holdout": holdout,
                                     "base_day": base_day})
    run.register(metrics_json)
    for name, rep in reports.items():
        per_day = run.path(f"per-day-{name}.csv")
        report.write_per_day_csv(per_day, rep)
        run.register(per_day)
    rank_csv = run.path("state-rank.csv")
    report.write_state_rank_csv(rank_csv, ranking)
    run.register(rank_csv)
    log.info("MSE model %.4g vs naive %.4g",
             reports["cleirnet"].mse, reports["naive"].mse)


def cmd_evaluate(run: Run) -> None:
    table = _load_table(run)
    series = _resolve_series(run, table)
    _evaluate_frames(run, table, series)


def cmd_dependency(run: Run) -> None:
    table = _load_table(run)
    _, series = _load_cases(run, table)
    adjacency = geo.load_adjacency(
        _require(run.config["data"]["adjacency"], "adjacency"), table)
    cfg = run.config["dependency"]
    mi_config = dependency.MiConfig(bins=cfg["bins"],
                                    min_length=cfg["min_length"],
                                    transform=cfg["transform"])
    scores = dependency.neighbor_dependency(series, adjacency, mi_config)
    out = run.path("dependency.csv")
    report.write_dependency_csv(out, table.ids, scores)
    run.register(out)
    log.info("dependency scores for %d counties -> %s", len(table), out)


def cmd_select(run: Run) -> None:
    table = _load_table(run)
    _, series = _load_cases(run, table)
    adjacency = geo.load_adjacency(
        _require(run.config["data"]["adjacency"], "adjacency"), table)
    cfg = run.config["dependency"]
    mi_config = dependency.MiConfig(bins=cfg["bins"],
                                    min_length=cfg["min_length"],
                                    transform=cfg["transform"])
    scores = dependency.neighbor_dependency(series, adjacency, mi_config)
    delta = float(cfg["delta"])
    mask = dependency.select_counties(scores.normalized, delta)
    out = run.path("mask.csv")
    report.write_mask_csv(out, table.ids, mask, delta)
    run.register(out)
    log.info("delta=%.2f keeps %d of %d counties", delta,
             int(mask.sum()), len(table))


def cmd_sweep_delta(run: Run) -> None:
    table = _load_table(run)
    _, series = _load_cases(run, table)
    adjacency = geo.load_adjacency(
        _require(run.config["data"]["adjacency"], "adjacency"), table)
    cfg = run.config["dependency"]
    holdout = int(run.config["evaluate"]["holdout"])
    cumulative = series.cumulative
    if cumulative.shape[1] <= holdout + 1:
        raise ConfigError("series too short for the configured holdout")
    mi_config = dependency.MiConfig(bins=cfg["bins"],
                                    min_length=cfg["min_length"],
                                    transform=cfg["transform"])

    def evaluate_mask(mask):
        keep = np.flatnonzero(mask)
        if keep.size == 0:
            raise ValueError("mask removes every county")
        sub_table = table.subset(mask)
        sub_series = cumulative[keep]
        x_features = geo.build_feature_matrix(sub_table).values.T
        config = _cleir_config(run, len(sub_table))
        config = dataclasses.replace(
            config, n_f=holdout, max_epochs=int(cfg["sweep_max_epochs"]))
        train_part = sub_series[:, :-holdout]
        truth = sub_series[:, -holdout:]
        store, _ = cleirnet.train_cleirnet(train_part, sub_table, x_features,
                                           config, run.seed("sweep"))
        frame = cleirnet.forecast_cleirnet(store, train_part, x_features,
                                           config)
        rep = evaluation.compute_metrics(frame, truth, sub_table.populations)
        return rep.mse, rep.weighted_mse

    table_out = dependency.delta_sweep(series, adjacency, cfg["deltas"],
                                       evaluate_mask, mi_config)
    out = run.path("sweep.csv")
    report.write_sweep_csv(out, table_out)
    run.register(out)
    log.info("delta sweep over %s -> %s", cfg["deltas"], out)


def cmd_report(run: Run) -> None:
    """Regenerate CSVs byte-identically from JSON artifacts and render
    the companion figures."""
    rendered = []
    metrics_json = run.path("evaluation.json")
    if metrics_json.exists():
        with open(metrics_json, encoding="utf-8") as fh:
            payload = json.load(fh)
        reports = {}
        for name, data in payload.items():
            if name == "context":
                continue
            reports[name] = evaluation.MetricReport(
                mse=data["mse"], weighted_mse=data["weighted_mse"],
                msle=data["msle"], mae=data["mae"], pcci=data["pcci"],
                per_day_mse=np.array(data["per_day_mse"]),
                se_band=np.array(data["se_band"]))
        for name, rep in reports.items():
            per_day = run.path(f"per-day-{name}.csv")
            report.write_per_day_csv(per_day, rep)
            run.register(per_day)
        if run.config["report"]["figures"]:
            fig = run.path("per-day-mse.png")
            report.fig_per_day_mse(fig, reports)
            rendered.append(run.register(fig))

    sweep_csv = run.path("sweep.csv")
    if sweep_csv.exists() and run.config["report"]["figures"]:
        rows = []
        import csv as _csv
        with open(sweep_csv, newline="", encoding="utf-8") as fh:
            for row in _csv.DictReader(fh):
                rows.append(dependency.SweepRow(
                    delta=float(row["delta"]),
                    removed_fraction=float(row["removed_fraction"]),
                    mse=float(row["mse"]) if row["mse"] else None,
                    weighted_mse=(float(row["weighted_mse"])
                                  if row["weighted_mse"] else None),
                    error=row["error"] or None))
        fig = run.path("delta-sweep.png")
        report.fig_delta_sweep(fig, dependency.SweepTable(rows))
        rendered.append(run.register(fig))

    dep_csv = run.path("dependency.csv")
    if dep_csv.exists() and run.config["report"]["figures"]:
        import csv as _csv
        with open(dep_csv, newline="", encoding="utf-8") as fh:
            normalized = [float(r["normalized_mi"])
                          for r in _csv.DictReader(fh)]
        fig = run.path("mi-distribution.png")
        report.fig_mi_distribution(fig, normalized)
        rendered.append(run.register(fig))

    curve_sources = {}
    for path in sorted(run.out.glob("*-training.json")):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if isinstance(data, list):  # tdefsi arms
            for arm in data:
                curve_sources[arm["arm"]] = arm["epochs"]
        else:
            curve_sources[path.stem] = data["epochs"]
    if curve_sources and run.config["report"]["figures"]:
        fig = run.path("training-curves.png")
        report.fig_training_curves(fig, curve_sources)
        rendered.append(run.register(fig))

    log.info("report rendered %d figures in %s", len(rendered), run.out)


_COMMANDS = {
    "simulate": cmd_simulate,
    "gen-corpus": cmd_gen_corpus,
    "train-cleirnet": cmd_train_cleirnet,
    "train-tdefsi": cmd_train_tdefsi,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "dependency": cmd_dependency,
    "select": cmd_select,
    "sweep-delta": cmd_sweep_delta,
    "report": cmd_report,
}


def run_pipeline(command: str, config: dict, out_dir=None,
                 jobs: int = 1) -> Run:
    """Dispatch one subcommand over a parsed config; returns the Run."""
    out = Path(out_dir) if out_dir else Path(config["global"]["out"])
    run = Run(config, out, command, jobs=jobs)
    _COMMANDS[command](run)
    run.write_manifest()
    return run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="epiforge",
        description="County-level epidemic forecasting toolkit")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override global seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="worker cap for parallel-safe stages")
    args = parser.parse_args(argv)

    level = os.environ.get("EPIFORGE_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        config = parse_config(args.config)
        if args.seed is not None:
            config["global"]["seed"] = args.seed
        run_pipeline(args.command, config, args.out, jobs=args.jobs)
    except (ConfigError, geo.GeoError, seir.SeirError, cleirnet.CleirError,
            tdefsi.TdefsiError, dependency.DependencyError,
            evaluation.EvalError, nn.CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
