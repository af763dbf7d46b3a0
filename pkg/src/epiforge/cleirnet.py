"""Hierarchical recurrent county forecaster.

An encode/remember/forecast LSTM backbone turns the national signal into
a low dimensional time pattern; a time-distributed linear layer expands it
to one feature per county; a county-distributed dense head (Variant II)
refines that feature together with static county features into per-county
daily case changes. Predicted changes chain onto the previous day's
cumulative count.

Training is stateful: batch size one in sequential day order, encoder and
remember cell states carried to the next batch as detached constants, so
memory spans the series while gradients stay within a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geo import CountyTable
from .seeding import derive_seed, rng_for
from .seir import ScenarioCorpus

T_SCALE_DAYS = 365.0  # encode-input time scaling; monotone and logged in meta

MODEL_TAG = "cleirnet-v1"


class CleirError(Exception):
    pass


@dataclass(frozen=True)
class CleirConfig:
    n_c: int                      # counties
    n_tf: int                     # backbone features
    n_d: int                      # county-distributed hidden units
    n_f: int = 14                 # forecast horizon, days
    n_x: int = 6                  # static county features
    variant: str = "II"
    target_dropout: float = 0.25
    l1: float = 5e-5
    l2: float = 5e-5
    lr: float = 0.001
    patience: int = 30
    max_epochs: int = 200

    def __post_init__(self):
        if min(self.n_c, self.n_tf, self.n_d, self.n_f) < 1 or self.n_x < 0:
            raise ValueError("invalid CLEIR-Net dimensions")
        if self.variant not in ("I", "II"):
            raise ValueError(f"variant must be 'I' or 'II', got {self.variant!r}")
        if not 0.0 <= self.target_dropout < 1.0:
            raise ValueError("target_dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_c", "n_tf", "n_d", "n_f", "n_x", "variant", "target_dropout",
            "l1", "l2", "lr", "patience", "max_epochs")}

    @staticmethod
    def from_dict(d: dict) -> "CleirConfig":
        return CleirConfig(**d)


@dataclass
class BackboneState:
    """Carried encoder/remember cell states; zeroed at sequence start."""
    c0: np.ndarray
    h0: np.ndarray
    c1: np.ndarray
    h1: np.ndarray

    @staticmethod
    def zeros(config: CleirConfig) -> "BackboneState":
        z = lambda: np.zeros(config.n_tf, dtype=np.float64)
        return BackboneState(z(), z(), z(), z())


@dataclass
class ForecastFrame:
    """Counties x horizon cumulative predictions chained from daily deltas.

    predictions[:, 0] = base + deltas[:, 0] and
    predictions[:, i] = predictions[:, i-1] + deltas[:, i], bitwise.
    """
    base_day: int
    base: np.ndarray
    predictions: np.ndarray
    deltas: np.ndarray
    meta: dict = field(default_factory=dict)

    @staticmethod
    def from_deltas(base_day: int, base: np.ndarray, deltas: np.ndarray,
                    meta: dict | None = None) -> "ForecastFrame":
        base = np.asarray(base, dtype=np.float64)
        deltas = np.asarray(deltas, dtype=np.float64)
        preds = np.empty_like(deltas)
        prev = base
        for i in range(deltas.shape[1]):
            prev = prev + deltas[:, i]
            preds[:, i] = prev
        return ForecastFrame(base_day, base, preds, deltas, meta or {})

    @property
    def horizon(self) -> int:
        return self.deltas.shape[1]


def init_params(config: CleirConfig, seed: int,
                zero: bool = False) -> nn.ParameterStore:
    """Glorot-initialized (or all-zero) parameter store for one model."""
    store = nn.ParameterStore()
    nn.register_lstm(store, "encode", 2, config.n_tf,
                     derive_seed(seed, "encode"), zero=zero)
    nn.register_lstm(store, "remember", config.n_tf, config.n_tf,
                     derive_seed(seed, "remember"), zero=zero)
    nn.register_lstm(store, "forecast", config.n_tf, config.n_tf,
                     derive_seed(seed, "forecast"), zero=zero)
    nn.register_dense(store, "td", config.n_tf, config.n_c,
                      derive_seed(seed, "td"), zero=zero)
    if config.variant == "II":
        nn.register_dense(store, "cd0", config.n_x + 1, config.n_d,
                          derive_seed(seed, "cd0"), zero=zero)
        nn.register_dense(store, "cd1", config.n_d, config.n_d,
                          derive_seed(seed, "cd1"), zero=zero)
        nn.register_dense(store, "cd2", config.n_d, 1,
                          derive_seed(seed, "cd2"), zero=zero)
    return store


def regularized_names(name: str) -> bool:
    """Dense kernels and biases plus all recurrent weights."""
    return name.startswith(("td.", "cd")) or name.endswith(".wh")


def count_parameters(config: CleirConfig) -> int:
    """Closed-form trainable parameter count.

    Note: published per-model totals for these layer shapes imply
    mutually inconsistent county counts (and disagree with the companion
    model's K+1 output head), so no single n_c reproduces them; this
    reports the value implied by the declared shapes.
    """
    lstm = lambda inp: 4 * (inp + config.n_tf + 1) * config.n_tf
    total = lstm(2) + 2 * lstm(config.n_tf)
    total += (config.n_tf + 1) * config.n_c
    total += ((config.n_x + 2) * config.n_d
              + (config.n_d + 1) * config.n_d
              + (config.n_d + 1) * 1)
    return total


@dataclass
class _ForwardResult:
    frame: ForecastFrame
    new_state: BackboneState
    pred_vars: list
    tape: nn.Tape


def _forward(i_t: np.ndarray, t: float, state: BackboneState,
             x_features: np.ndarray, store: nn.ParameterStore,
             config: CleirConfig, tape: nn.Tape,
             meta: dict | None = None) -> _ForwardResult:
    if i_t.shape != (config.n_c,):
        raise CleirError(f"I(t) shape {i_t.shape} != ({config.n_c},)")
    if x_features.shape != (config.n_x, config.n_c):
        raise CleirError(
            f"feature matrix shape {x_features.shape} != "
            f"({config.n_x}, {config.n_c})")

    x_enc = np.array([np.log1p(float(i_t.sum())), t / T_SCALE_DAYS])
    enc = nn.bind_lstm(store, tape, "encode")
    rem = nn.bind_lstm(store, tape, "remember")
    fc = nn.bind_lstm(store, tape, "forecast")
    td = nn.bind_dense(store, tape, "td")

    h_e, c_e = nn.lstm_cell_forward(tape.constant(x_enc),
                                    tape.constant(state.h0),
                                    tape.constant(state.c0), enc)
    h_r, c_r = nn.lstm_cell_forward(h_e, tape.constant(state.h1),
                                    tape.constant(state.c1), rem)
    new_state = BackboneState(c0=c_e.value.copy(), h0=h_e.value.copy(),
                              c1=c_r.value.copy(), h1=h_r.value.copy())

    if config.variant == "II":
        cd = [nn.bind_dense(store, tape, f"cd{k}") for k in range(3)]
        x_cols = np.ascontiguousarray(x_features.T)

    base = tape.constant(i_t)
    h_prev, c_prev = h_r, c_r
    pred_vars = []
    delta_values = []
    prev_pred = base
    for _ in range(config.n_f):
        h_i, c_i = nn.lstm_cell_forward(h_prev, h_prev, c_prev, fc)
        h_county = nn.dense_forward(h_i, td, "linear")
        if config.variant == "I":
            delta = h_county
        else:
            z = nn.augment_columns(h_county, x_cols)
            hid = nn.dense_forward(z, cd[0], "relu")
            hid = nn.dense_forward(hid, cd[1], "relu")
            out = nn.dense_forward(hid, cd[2], "linear")
            delta = nn.reshape(out, (config.n_c,))
        if not np.all(np.isfinite(delta.value)):
            raise CleirError("non-finite activation in the output head")
        prev_pred = nn.add(prev_pred, delta)
        pred_vars.append(prev_pred)
        delta_values.append(delta.value)
        h_prev, c_prev = h_i, c_i

    preds = np.stack([p.value for p in pred_vars], axis=1)
    deltas = np.stack(delta_values, axis=1)
    frame = ForecastFrame(base_day=int(round(t)), base=i_t.copy(),
                          predictions=preds, deltas=deltas,
                          meta=dict(meta or {}))
    return _ForwardResult(frame, new_state, pred_vars, tape)


def forward_horizon(i_t: np.ndarray, t: float, state: BackboneState,
                    x_features: np.ndarray, store: nn.ParameterStore,
                    config: CleirConfig, tape: nn.Tape | None = None
                    ) -> tuple[ForecastFrame, BackboneState]:
    """One batch: forecast n_f days from day t and return the next state."""
    res = _forward(i_t, t, state, x_features, store, config,
                   tape if tape is not None else nn.Tape())
    return res.frame, res.new_state


def weight_matrix(populations: np.ndarray, n_f: int,
                  day_indices: np.ndarray | None = None) -> np.ndarray:
    """w[j, i] = 1 / (ln(pop_j + 1) * ln(i + 1)) for horizon day i = 1..n_f."""
    idx = (np.arange(1, n_f + 1, dtype=np.float64)
           if day_indices is None else np.asarray(day_indices, dtype=np.float64))
    return 1.0 / np.outer(np.log(populations + 1.0), np.log(idx + 1.0))


def weighted_mse_loss(predictions: np.ndarray, targets: np.ndarray,
                      populations: np.ndarray,
                      mask: np.ndarray | None = None,
                      day_indices: np.ndarray | None = None) -> float | None:
    """Masked weighted mean of squared errors; None when fully masked."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != np.shape(targets):
        raise CleirError(
            f"prediction shape {predictions.shape} != target {np.shape(targets)}")
    w = weight_matrix(populations, predictions.shape[1], day_indices)
    if mask is None:
        mask = np.ones_like(predictions)
    msum = mask.sum()
    if msum == 0:
        return None
    err = predictions - targets
    return float(np.sum(mask * w * err * err) / msum)


def target_dropout_mask(shape, rate: float, seed: int) -> np.ndarray:
    """Binary loss mask: each entry 0 with probability rate."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    return (rng.random(shape) >= rate).astype(np.float64)


def _loss_on_tape(res: _ForwardResult, targets: np.ndarray, w: np.ndarray,
                  mask: np.ndarray):
    """Masked weighted MSE built from the forward pass's prediction vars."""
    msum = float(mask.sum())
    if msum == 0.0:
        return None
    total = None
    for i, pred in enumerate(res.pred_vars):
        diff = nn.sub(pred, targets[:, i])
        term = nn.vsum(nn.mul(nn.mul(diff, diff), w[:, i] * mask[:, i]))
        total = term if total is None else nn.add(total, term)
    return nn.mul(total, 1.0 / msum)


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = np.inf
    stopped_early: bool = False

    def record(self, epoch: int, train_loss: float, valid_loss: float):
        self.epochs.append({"epoch": epoch, "train_loss": train_loss,
                            "valid_loss": valid_loss})

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_valid_loss": self.best_valid_loss,
                "stopped_early": self.stopped_early}


def _as_sequences(data) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Normalize input data to (train_sequences, valid_sequences)."""
    if isinstance(data, ScenarioCorpus):
        train = [sc.cumulative for sc in data.train]
        valid = [sc.cumulative for sc in data.valid]
        if not train:
            raise CleirError("corpus has no training scenarios")
        return train, valid
    cumulative = data.cumulative if hasattr(data, "cumulative") else np.asarray(data)
    return [np.asarray(cumulative, dtype=np.float64)], []


def train_cleirnet(data, table: CountyTable, x_features: np.ndarray,
                   config: CleirConfig, seed: int, carry_state: bool = True
                   ) -> tuple[nn.ParameterStore, TrainingLog]:
    """Stateful sequential training with NAdam and early stopping.

    data is a cumulative counties x days array (or CaseSeries), in which
    case the final n_f-day window of the given series is the validation
    target, or a ScenarioCorpus, in which case validation scenarios supply
    their own final windows. Weights from the best validation epoch are
    restored before returning. Deterministic per (config, seed, data).
    """
    train_seqs, valid_seqs = _as_sequences(data)
    for seq in train_seqs + valid_seqs:
        if seq.shape[0] != config.n_c:
            raise CleirError(f"series has {seq.shape[0]} counties, "
                             f"config expects {config.n_c}")
        if seq.shape[1] < config.n_f + 2:
            raise CleirError("series shorter than n_f + 2 days")

    store = init_params(config, derive_seed(seed, "cleirnet-init"))
    populations = table.populations
    w = weight_matrix(populations, config.n_f)
    log = TrainingLog()
    best_snapshot = store.snapshot()
    since_best = 0

    for epoch in range(config.max_epochs):
        mask_rng = rng_for(seed, f"cleirnet-dropout-epoch-{epoch}")
        batch_losses = []
        for seq_idx, seq in enumerate(train_seqs):
            t_last = seq.shape[1] - 1 - config.n_f
            # single-series mode reserves the final base day for validation
            t_stop = t_last if (valid_seqs or len(train_seqs) > 1) else t_last - 1
            state = BackboneState.zeros(config)
            for t in range(t_stop + 1):
                tape = nn.Tape()
                res = _forward(seq[:, t], float(t), state, x_features,
                               store, config, tape)
                targets = seq[:, t + 1:t + 1 + config.n_f]
                mask = (mask_rng.random((config.n_c, config.n_f))
                        >= config.target_dropout).astype(np.float64)
                loss = _loss_on_tape(res, targets, w, mask)
                if loss is not None:
                    if not np.isfinite(loss.value):
                        raise CleirError(
                            f"divergence at epoch {epoch}, batch {t}")
                    store.zero_grads()
                    nn.reverse_gradients(tape, loss)
                    penalty = nn.regularization_penalty(
                        store, config.l1, config.l2, regularized_names)
                    nn.nadam_update(store, config.lr)
                    batch_losses.append(float(loss.value) + penalty)
                if carry_state:
                    state = res.new_state
                else:
                    state = BackboneState.zeros(config)

        valid_loss = _validation_loss(store, train_seqs, valid_seqs,
                                      x_features, config, populations)
        train_loss = float(np.mean(batch_losses)) if batch_losses else np.nan
        log.record(epoch, train_loss, valid_loss)

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
    return store, log


def _replay(store, seq: np.ndarray, x_features, config,
            t_stop: int) -> BackboneState:
    """Frozen forward replay over base days 0..t_stop-1."""
    state = BackboneState.zeros(config)
    for t in range(t_stop):
        _, state = forward_horizon(seq[:, t], float(t), state, x_features,
                                   store, config)
    return state


def _validation_loss(store, train_seqs, valid_seqs, x_features, config,
                     populations) -> float:
    """Post-epoch validation with frozen weights and full loss mask."""
    losses = []
    if valid_seqs:
        seqs = valid_seqs
    else:
        seqs = train_seqs  # validate on the reserved final window
    for seq in seqs:
        t_val = seq.shape[1] - 1 - config.n_f
        state = _replay(store, seq, x_features, config, t_val)
        frame, _ = forward_horizon(seq[:, t_val], float(t_val), state,
                                   x_features, store, config)
        targets = seq[:, t_val + 1:t_val + 1 + config.n_f]
        loss = weighted_mse_loss(frame.predictions, targets, populations)
        losses.append(loss)
    return float(np.mean(losses))


def forecast_cleirnet(store: nn.ParameterStore, series, x_features: np.ndarray,
                      config: CleirConfig, meta: dict | None = None
                      ) -> ForecastFrame:
    """Replay the whole series statefully and forecast from its last day."""
    cumulative = series.cumulative if hasattr(series, "cumulative") else np.asarray(series)
    cumulative = np.asarray(cumulative, dtype=np.float64)
    if cumulative.ndim != 2 or cumulative.shape[1] < 1:
        raise CleirError("series must cover at least one day")
    t_base = cumulative.shape[1] - 1
    state = _replay(store, cumulative, x_features, config, t_base)
    frame, _ = forward_horizon(cumulative[:, t_base], float(t_base), state,
                               x_features, store, config)
    frame.meta.update({"model": MODEL_TAG, "variant": config.variant,
                       "t_scale": T_SCALE_DAYS, **(meta or {})})
    return frame


def ensemble_forecasts(frames: list[ForecastFrame]) -> ForecastFrame:
    """Elementwise mean of cumulative predictions; deltas recomputed."""
    if not frames:
        raise CleirError("cannot ensemble zero frames")
    first = frames[0]
    for f in frames[1:]:
        if f.predictions.shape != first.predictions.shape:
            raise CleirError("ensemble frames have mismatched shapes")
        if f.base_day != first.base_day:
            raise CleirError("ensemble frames have mismatched base days")
    mean_pred = np.mean([f.predictions for f in frames], axis=0)
    base = np.mean([f.base for f in frames], axis=0)
    deltas = np.empty_like(mean_pred)
    deltas[:, 0] = mean_pred[:, 0] - base
    deltas[:, 1:] = np.diff(mean_pred, axis=1)
    return ForecastFrame.from_deltas(
        first.base_day, base, deltas,
        meta={"model": MODEL_TAG, "ensemble_of": len(frames)})
