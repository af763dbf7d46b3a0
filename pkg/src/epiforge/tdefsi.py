"""Adapted stacked-LSTM national-to-county forecaster.

The model consumes the national log-incidence sequence and emits a K+1
vector per step: the next day's national value (log scale) plus each
county's min-max normalized incidence. Optional activity regularizers
penalize negative outputs and national/county-sum mismatch; training
corpora come from the mixing SEIR simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .seeding import derive_seed, rng_for
from .seir import ScenarioCorpus

MODEL_TAG = "tdefsi-lonly-v1"
EXP_CAP = 50.0  # spatial regularizer clips the national exponent here

ARMS = ("none", "dropout", "dropout+nonneg", "dropout+nonneg+spatial")


class TdefsiError(Exception):
    pass


@dataclass(frozen=True)
class TdefsiConfig:
    n_counties: int
    k: int = 2                 # stacked LSTM layers
    hidden: int = 16           # per-layer latent width (128 at paper scale)
    dense: int = 32            # penultimate dense width (256 at paper scale)
    lam: float = 0.01          # non-negativity penalty weight
    mu: float = 0.0001         # spatial-consistency penalty weight
    dropout: float = 0.1       # between consecutive layers, training only
    lr: float = 0.001
    epochs: int = 300
    patience: int = 50

    def __post_init__(self):
        if self.k < 1 or self.hidden < 1 or self.dense < 1:
            raise ValueError("invalid TDEFSI dimensions")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_counties", "k", "hidden", "dense", "lam", "mu", "dropout",
            "lr", "epochs", "patience")}

    @staticmethod
    def from_dict(d: dict) -> "TdefsiConfig":
        return TdefsiConfig(**d)


@dataclass
class NormStats:
    """Per-county min-max of the training window; zero-range counties are
    pinned to 0 and flagged."""
    county_min: np.ndarray
    county_max: np.ndarray
    degenerate: np.ndarray

    @property
    def county_range(self) -> np.ndarray:
        return np.where(self.degenerate, 1.0,
                        self.county_max - self.county_min)

    def to_dict(self) -> dict:
        return {"county_min": self.county_min.tolist(),
                "county_max": self.county_max.tolist(),
                "degenerate": self.degenerate.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(np.array(d["county_min"], dtype=np.float64),
                         np.array(d["county_max"], dtype=np.float64),
                         np.array(d["degenerate"], dtype=bool))


def fit_norm_stats(incidence: np.ndarray) -> NormStats:
    """Min-max statistics over a K x T (or stacked) incidence window."""
    mn = incidence.min(axis=1)
    mx = incidence.max(axis=1)
    return NormStats(county_min=mn, county_max=mx,
                     degenerate=(mx - mn) < 1e-300)


def normalize_dataset(incidence: np.ndarray, stats: NormStats | None = None
                      ) -> tuple[np.ndarray, np.ndarray, NormStats]:
    """Build (national log series y, normalized county matrix y', stats).

    y_t = ln(1 + sum_C incidence) guards zero-case days; y' is min-max
    scaled per county using the training-window stats.
    """
    incidence = np.asarray(incidence, dtype=np.float64)
    if incidence.ndim != 2 or incidence.shape[1] < 1:
        raise TdefsiError("incidence must be a K x T matrix with T >= 1")
    if stats is None:
        stats = fit_norm_stats(incidence)
    y = np.log1p(incidence.sum(axis=0))
    y_prime = (incidence - stats.county_min[:, None]) / stats.county_range[:, None]
    y_prime[stats.degenerate] = 0.0
    return y, y_prime, stats


def denormalize_counties(y_prime: np.ndarray, stats: NormStats) -> np.ndarray:
    """Invert the county min-max scaling (degenerate counties -> their min)."""
    arr = np.asarray(y_prime, dtype=np.float64)
    if arr.ndim == 1:
        return arr * stats.county_range + stats.county_min
    return arr * stats.county_range[:, None] + stats.county_min[:, None]


def init_params(config: TdefsiConfig, seed: int,
                zero: bool = False) -> nn.ParameterStore:
    store = nn.ParameterStore()
    in_size = 1
    for layer in range(config.k):
        nn.register_lstm(store, f"lstm{layer}", in_size, config.hidden,
                         derive_seed(seed, f"lstm{layer}"), zero=zero)
        in_size = config.hidden
    nn.register_dense(store, "dense_h", config.hidden, config.dense,
                      derive_seed(seed, "dense_h"), zero=zero)
    nn.register_dense(store, "dense_out", config.dense, config.n_counties + 1,
                      derive_seed(seed, "dense_out"), zero=zero)
    return store


def count_tdefsi_parameters(config: TdefsiConfig) -> int:
    """Closed-form parameter count of the stacked-LSTM + dense head."""
    total = 4 * (1 + config.hidden + 1) * config.hidden
    for _ in range(1, config.k):
        total += 4 * (config.hidden + config.hidden + 1) * config.hidden
    total += (config.hidden + 1) * config.dense
    total += (config.dense + 1) * (config.n_counties + 1)
    return total


class _SequenceRunner:
    """Stacked-LSTM scan with optional inter-layer dropout and a dense
    head that can be applied after any step."""

    def __init__(self, store, config, tape, training=False, mask_rng=None):
        self.config = config
        self.tape = tape
        self.training = training and config.dropout > 0.0
        self.mask_rng = mask_rng
        self.cells = [nn.bind_lstm(store, tape, f"lstm{i}")
                      for i in range(config.k)]
        self.dense_h = nn.bind_dense(store, tape, "dense_h")
        self.dense_out = nn.bind_dense(store, tape, "dense_out")
        z = lambda: tape.constant(np.zeros(config.hidden))
        self.h = [z() for _ in range(config.k)]
        self.c = [z() for _ in range(config.k)]

    def _dropout(self, var):
        if not self.training:
            return var
        rate = self.config.dropout
        mask = (self.mask_rng.random(var.value.shape) >= rate) / (1.0 - rate)
        return nn.mul(var, mask)

    def step(self, y_t: float) -> None:
        x = self.tape.constant(np.array([y_t]))
        for layer in range(self.config.k):
            h, c = nn.lstm_cell_forward(x, self.h[layer], self.c[layer],
                                        self.cells[layer])
            self.h[layer], self.c[layer] = h, c
            x = self._dropout(h)
        self._top = x

    def head(self):
        hid = nn.dense_forward(self._dropout(self._top), self.dense_h, "relu")
        return nn.dense_forward(self._dropout(hid), self.dense_out, "linear")


def lonly_forward(y_window: np.ndarray, store: nn.ParameterStore,
                  config: TdefsiConfig, tape: nn.Tape | None = None,
                  training: bool = False, dropout_seed: int = 0) -> nn.Var:
    """Consume a national log sequence, return the final K+1 prediction."""
    y_window = np.asarray(y_window, dtype=np.float64).reshape(-1)
    if y_window.size < 1:
        raise TdefsiError("input window must cover at least one day")
    tape = tape if tape is not None else nn.Tape()
    rng = np.random.default_rng(dropout_seed) if training else None
    runner = _SequenceRunner(store, config, tape, training, rng)
    for y_t in y_window:
        runner.step(float(y_t))
    return runner.head()


def phi_regularizer(z_hat, stats: NormStats | None = None,
                    literal: bool = False):
    """Spatial consistency |exp(y_hat) - sum of county predictions|.

    County terms are denormalized to the raw scale when stats are given;
    literal=True keeps the normalized sum for fidelity runs. Accepts a
    tape Var or a plain vector; returns the same kind.
    """
    z = z_hat if isinstance(z_hat, nn.Var) else nn.constant(np.asarray(z_hat))
    size = z.value.shape[0]
    national = nn.exp(nn.take(z, 0, 1), cap=EXP_CAP)
    counties = nn.take(z, 1, size)
    if stats is not None and not literal:
        counties = nn.add(nn.mul(counties, stats.county_range),
                          stats.county_min)
    total = nn.vsum(counties)
    out = nn.vsum(nn.absolute(nn.sub(national, total)))
    return out if isinstance(z_hat, nn.Var) else float(out.value)


def nonneg_regularizer(z_hat):
    """Hinge on negative outputs: sum_i max(0, -z_i)."""
    z = z_hat if isinstance(z_hat, nn.Var) else nn.constant(np.asarray(z_hat))
    out = nn.vsum(nn.relu(nn.mul(z, -1.0)))
    return out if isinstance(z_hat, nn.Var) else float(out.value)


@dataclass
class ArmFlags:
    dropout: bool = False
    nonneg: bool = False
    spatial: bool = False

    @staticmethod
    def for_arm(arm: str) -> "ArmFlags":
        if arm not in ARMS:
            raise TdefsiError(f"unknown arm {arm!r}; expected one of {ARMS}")
        return ArmFlags(dropout="dropout" in arm, nonneg="nonneg" in arm,
                        spatial="spatial" in arm)


@dataclass
class TdefsiLog:
    arm: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = np.inf
    stopped_early: bool = False
    train_mse: float = np.nan
    valid_mse: float = np.nan
    train_loss: float = np.nan
    valid_loss: float = np.nan

    def to_dict(self) -> dict:
        return {"arm": self.arm, "epochs": self.epochs,
                "best_epoch": self.best_epoch,
                "best_valid_loss": self.best_valid_loss,
                "stopped_early": self.stopped_early,
                "train_mse": self.train_mse, "valid_mse": self.valid_mse,
                "train_loss": self.train_loss, "valid_loss": self.valid_loss}


def _scenario_targets(scenario, stats):
    y, y_prime, _ = normalize_dataset(scenario.incidence, stats)
    return y, y_prime


def _sequence_loss(store, config, y, y_prime, stats, flags: ArmFlags,
                   tape, mask_rng=None):
    """Mean per-step loss over the sequence; per-step loss is
    (||z - z_hat||^2 + mu*phi + lam*delta) / (K+1), so the unregularized
    loss is exactly the per-component MSE."""
    t_total = y.shape[0]
    if t_total < 2:
        raise TdefsiError("scenario must cover at least two days")
    runner = _SequenceRunner(store, config, tape,
                             training=flags.dropout and mask_rng is not None,
                             mask_rng=mask_rng)
    scale = 1.0 / (config.n_counties + 1)
    loss = None
    mse = None
    steps = t_total - 1
    for t in range(steps):
        runner.step(float(y[t]))
        z_hat = runner.head()
        target = np.concatenate([[y[t + 1]], y_prime[:, t + 1]])
        diff = nn.sub(z_hat, target)
        sq = nn.vsum(nn.mul(diff, diff))
        mse = sq if mse is None else nn.add(mse, sq)
        step_loss = sq
        if flags.nonneg:
            step_loss = nn.add(step_loss,
                               nn.mul(nonneg_regularizer(z_hat), config.lam))
        if flags.spatial:
            step_loss = nn.add(step_loss,
                               nn.mul(phi_regularizer(z_hat, stats), config.mu))
        loss = step_loss if loss is None else nn.add(loss, step_loss)
    norm = scale / steps
    return nn.mul(loss, norm), nn.mul(mse, norm)


def tdefsi_train(corpus: ScenarioCorpus, config: TdefsiConfig,
                 flags: ArmFlags, seed: int,
                 arm_name: str | None = None
                 ) -> tuple[nn.ParameterStore, NormStats, TdefsiLog]:
    """Train one experiment arm on a simulated corpus.

    Normalization statistics come from the training scenarios only.
    Early stopping restores the best-validation weights; the reported
    train/valid MSE and loss are frozen evaluations at those weights.
    """
    train = corpus.train
    valid = corpus.valid
    if not train:
        raise TdefsiError("corpus has no training scenarios")
    stats = fit_norm_stats(
        np.concatenate([sc.incidence for sc in train], axis=1))
    train_data = [_scenario_targets(sc, stats) for sc in train]
    valid_data = [_scenario_targets(sc, stats) for sc in valid]

    store = init_params(config, derive_seed(seed, "tdefsi-init"))
    log = TdefsiLog(arm=arm_name or "custom")
    best_snapshot = store.snapshot()
    since_best = 0

    for epoch in range(config.epochs):
        epoch_losses, epoch_mses = [], []
        for idx, (y, y_prime) in enumerate(train_data):
            tape = nn.Tape()
            mask_rng = (rng_for(seed, f"tdefsi-dropout-{epoch}-{idx}")
                        if flags.dropout else None)
            loss, mse = _sequence_loss(store, config, y, y_prime, stats,
                                       flags, tape, mask_rng)
            if not np.isfinite(loss.value):
                raise TdefsiError(f"divergence at epoch {epoch}, scenario {idx}")
            store.zero_grads()
            nn.reverse_gradients(tape, loss)
            nn.nadam_update(store, config.lr)
            epoch_losses.append(float(loss.value))
            epoch_mses.append(float(mse.value))

        valid_loss, valid_mse = _frozen_eval(store, config, valid_data or
                                             train_data, stats, flags)
        log.epochs.append({"epoch": epoch,
                           "train_loss": float(np.mean(epoch_losses)),
                           "train_mse": float(np.mean(epoch_mses)),
                           "valid_loss": valid_loss,
                           "valid_mse": valid_mse})
        if valid_loss < log.best_valid_loss - 1e-15:
            log.best_valid_loss = valid_loss
            log.best_epoch = epoch
            best_snapshot = store.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                log.stopped_early = True
                break

    store.restore(best_snapshot)
    log.train_loss, log.train_mse = _frozen_eval(store, config, train_data,
                                                 stats, flags)
    log.valid_loss, log.valid_mse = _frozen_eval(store, config, valid_data or
                                                 train_data, stats, flags)
    return store, stats, log


def _frozen_eval(store, config, data, stats, flags: ArmFlags
                 ) -> tuple[float, float]:
    """(loss, mse) with frozen weights and dropout off."""
    losses, mses = [], []
    no_dropout = ArmFlags(dropout=False, nonneg=flags.nonneg,
                          spatial=flags.spatial)
    for y, y_prime in data:
        loss, mse = _sequence_loss(store, config, y, y_prime, stats,
                                   no_dropout, nn.Tape())
        losses.append(float(loss.value))
        mses.append(float(mse.value))
    return float(np.mean(losses)), float(np.mean(mses))


def run_arms(corpus: ScenarioCorpus, config: TdefsiConfig, seed: int,
             arms=ARMS) -> list[TdefsiLog]:
    """Train the regularization-ablation arms with a shared seed."""
    logs = []
    for arm in arms:
        _, _, log = tdefsi_train(corpus, config, ArmFlags.for_arm(arm),
                                 seed, arm_name=arm)
        logs.append(log)
    return logs


@dataclass
class TdefsiForecast:
    national_log: np.ndarray       # predicted y (log scale), horizon entries
    county_incidence: np.ndarray   # denormalized, K x horizon


def autoregressive_forecast(store: nn.ParameterStore, y_history: np.ndarray,
                            horizon: int, config: TdefsiConfig,
                            stats: NormStats) -> TdefsiForecast:
    """Feed the history, then loop predictions back as inputs."""
    if horizon < 1:
        raise TdefsiError("horizon must be >= 1")
    y_history = np.asarray(y_history, dtype=np.float64).reshape(-1)
    tape = nn.Tape()
    runner = _SequenceRunner(store, config, tape)
    for y_t in y_history:
        runner.step(float(y_t))
    national = np.zeros(horizon)
    counties = np.zeros((config.n_counties, horizon))
    z = runner.head().value
    for step in range(horizon):
        national[step] = z[0]
        counties[:, step] = denormalize_counties(z[1:], stats)
        if step + 1 < horizon:
            runner.step(float(z[0]))
            z = runner.head().value
    return TdefsiForecast(national_log=national, county_incidence=counties)
