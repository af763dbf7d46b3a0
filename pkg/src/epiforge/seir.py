"""Basic and spatially-mixed SEIR dynamics with Euler integration.

County compartments are coupled through a symmetric flow matrix F whose
balanced form F_bal = F - diag(1^T F) has zero row sums, so flows
redistribute population without creating or destroying it. Cumulative
recorded cases are defined as I + R; incidence is the non-negative
day-over-day difference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geo import CountyTable, distance_matrix
from .seeding import derive_seed, poisson, rng_for

S, E, I, R = 0, 1, 2, 3
_MAX_INIT_ATTEMPTS = 1000


class SeirError(Exception):
    pass


@dataclass(frozen=True)
class SeirParams:
    """Transmission / incubation / recovery rates per day."""
    beta: float
    sigma: float
    gamma: float

    def __post_init__(self):
        if self.beta < 0 or self.sigma < 0 or self.gamma < 0:
            raise ValueError("SEIR rates must be non-negative")


@dataclass(frozen=True)
class MixParams:
    """Mixing-model controls: flow/spread resistances, rates, and the
    time-zero exposure/infection prevalences."""
    mu_flow: float
    mu_spread: float
    sigma: float
    gamma: float
    lambda_e: float
    lambda_i: float

    def __post_init__(self):
        if self.mu_flow <= 0 or self.mu_spread <= 0:
            raise ValueError("resistances must be positive")
        if self.sigma < 0 or self.gamma < 0:
            raise ValueError("sigma and gamma must be non-negative")
        if not 0.0 <= self.lambda_e <= 1.0 or not 0.0 <= self.lambda_i <= 1.0:
            raise ValueError("prevalences must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"mu_flow": self.mu_flow, "mu_spread": self.mu_spread,
                "sigma": self.sigma, "gamma": self.gamma,
                "lambda_e": self.lambda_e, "lambda_i": self.lambda_i}

    @staticmethod
    def from_dict(d: dict) -> "MixParams":
        return MixParams(**d)


@dataclass(frozen=True)
class CompartmentMatrix:
    """Counties x 4 (S, E, I, R) person counts at one time."""
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != 4:
            raise ValueError("compartment matrix must be counties x 4")
        if np.any(self.values < 0):
            raise ValueError("compartment values must be non-negative")

    def check_conservation(self, populations: np.ndarray,
                           rel_tol: float = 1e-6) -> None:
        err = np.abs(self.values.sum(axis=1) - populations)
        if np.any(err > rel_tol * populations):
            worst = int(np.argmax(err / populations))
            raise SeirError(
                f"population not conserved for county {worst}: "
                f"|sum - p| = {err[worst]:.3e}")


@dataclass(frozen=True)
class FlowMatrix:
    """Symmetric raw flows and the zero-row-sum balanced form."""
    raw: np.ndarray
    balanced: np.ndarray


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling intervals for each mixing parameter.

    Defaults are toolkit choices spanning faster and slower epidemics;
    all are configurable.
    """
    mu_flow: tuple[float, float] = (1e4, 1e7)
    mu_spread: tuple[float, float] = (1e3, 1e5)
    sigma: tuple[float, float] = (0.1, 0.5)
    gamma: tuple[float, float] = (0.05, 0.3)
    lambda_e: tuple[float, float] = (1e-6, 1e-4)
    lambda_i: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        for name in ("mu_flow", "mu_spread", "sigma", "gamma",
                     "lambda_e", "lambda_i"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name}: lo {lo} > hi {hi}")

    def sample(self, rng: np.random.Generator) -> MixParams:
        draw = {}
        for name in ("mu_flow", "mu_spread", "sigma", "gamma",
                     "lambda_e", "lambda_i"):
            lo, hi = getattr(self, name)
            draw[name] = lo if lo == hi else float(rng.uniform(lo, hi))
        return MixParams(**draw)

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name))
                for name in ("mu_flow", "mu_spread", "sigma", "gamma",
                             "lambda_e", "lambda_i")}

    @staticmethod
    def from_dict(d: dict) -> "ParamRanges":
        return ParamRanges(**{k: tuple(v) for k, v in d.items()})


@dataclass
class Scenario:
    params: MixParams
    seed: int
    role: str
    cumulative: np.ndarray                 # counties x (days+1)
    trajectory: np.ndarray | None = None   # (days+1) x counties x 4
    clamp_events: int = 0

    @property
    def incidence(self) -> np.ndarray:
        inc = np.diff(self.cumulative, axis=1, prepend=0.0)
        return np.maximum(inc, 0.0)


@dataclass
class ScenarioCorpus:
    county_ids: list[str]
    days: int
    h: float
    seed: int
    ranges: ParamRanges
    scenarios: list[Scenario] = field(default_factory=list)

    @property
    def train(self) -> list[Scenario]:
        return [s for s in self.scenarios if s.role == "train"]

    @property
    def valid(self) -> list[Scenario]:
        return [s for s in self.scenarios if s.role == "valid"]


def seir_derivative(state, params: SeirParams, n: float):
    """Basic SEIR right-hand side for one population of size n."""
    if n <= 0:
        raise SeirError(f"population must be positive, got {n}")
    s, e, i, _ = state
    x_s = s / n
    infection = params.beta * i * x_s
    ds = -infection
    de = infection - params.sigma * e
    di = params.sigma * e - params.gamma * i
    dr = params.gamma * i
    return ds, de, di, dr


def build_flow_matrix(table: CountyTable, distances: np.ndarray,
                      mu_flow: float) -> FlowMatrix:
    """Raw flows min(p_i, p_j) / (d_ij * mu_flow), zero diagonal."""
    if mu_flow <= 0:
        raise ValueError("mu_flow must be positive")
    n = len(table)
    if distances.shape != (n, n):
        raise ValueError(f"distance matrix shape {distances.shape} != ({n},{n})")
    off_diag = ~np.eye(n, dtype=bool)
    if np.any(distances[off_diag] <= 0):
        bad = np.argwhere((distances <= 0) & off_diag)[0]
        raise SeirError(
            f"degenerate distance between counties {int(bad[0])} and "
            f"{int(bad[1])}: flows are undefined at zero separation")
    pop = table.populations
    raw = np.zeros((n, n), dtype=np.float64)
    with np.errstate(divide="ignore"):
        pair_min = np.minimum.outer(pop, pop)
        raw[off_diag] = (pair_min / (distances * mu_flow))[off_diag]
    return FlowMatrix(raw=raw, balanced=balance_flow(raw))


def balance_flow(raw: np.ndarray) -> np.ndarray:
    """F_bal = F - diag(column sums); zero row sums conserve population."""
    asym = np.max(np.abs(raw - raw.T))
    if asym > 1e-9 * max(np.max(np.abs(raw)), 1.0):
        raise SeirError(f"flow matrix not symmetric, max deviation {asym:.3e}")
    return raw - np.diag(raw.sum(axis=0))


def mixing_derivative(state: CompartmentMatrix, flow: FlowMatrix,
                      beta: np.ndarray, sigma: float, gamma: float,
                      populations: np.ndarray) -> np.ndarray:
    """Counties x 4 derivative of the spatially-mixed SEIR system."""
    values = state.values
    n = values.shape[0]
    if flow.balanced.shape != (n, n) or beta.shape != (n,):
        raise SeirError("flow/beta dimensions do not match the state")
    x = values / populations[:, None]
    flow_term = flow.balanced @ x
    infection = beta * values[:, I] * x[:, S]
    deriv = np.empty_like(values)
    deriv[:, S] = flow_term[:, S] - infection
    deriv[:, E] = (flow_term[:, E] + infection) - sigma * values[:, E]
    deriv[:, I] = (flow_term[:, I] + sigma * values[:, E]) - gamma * values[:, I]
    deriv[:, R] = flow_term[:, R] + gamma * values[:, I]
    return deriv


def euler_step(state: CompartmentMatrix, derivative: np.ndarray,
               h: float) -> tuple[CompartmentMatrix, int]:
    """state + h * derivative, with negative overshoot clamped to zero and
    the clamped mass deducted proportionally from the county's remaining
    compartments so per-county totals are preserved.

    Returns the new state and the number of clamped entries.
    """
    if h <= 0:
        raise SeirError(f"step size must be positive, got {h}")
    new = state.values + h * derivative
    negative = new < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        target = new.sum(axis=1)
        pos = np.where(negative, 0.0, new)
        pos_total = pos.sum(axis=1)
        scale = np.where(pos_total > 0, target / np.maximum(pos_total, 1e-300), 0.0)
        rows = negative.any(axis=1)
        pos[rows] *= scale[rows, None]
        new = pos
    return CompartmentMatrix(new), clamped


def sample_initial_state(table: CountyTable, params: MixParams,
                         seed: int) -> CompartmentMatrix:
    """Poisson exposure/infection seeding: E ~ Poi(p*lambda_e),
    I ~ Poi(p*lambda_e*lambda_i), R = 0, S = p - E - I.

    Draws exceeding the county population are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    pops = table.populations
    values = np.zeros((len(table), 4), dtype=np.float64)
    for c, p in enumerate(pops):
        for _ in range(_MAX_INIT_ATTEMPTS):
            e0 = poisson(rng, p * params.lambda_e)
            i0 = poisson(rng, p * params.lambda_e * params.lambda_i)
            if e0 + i0 <= p:
                break
        else:
            raise SeirError(
                f"county {c}: could not draw E(0)+I(0) <= population in "
                f"{_MAX_INIT_ATTEMPTS} attempts")
        values[c] = (p - e0 - i0, e0, i0, 0.0)
    return CompartmentMatrix(values)


def steps_per_day(h: float) -> int:
    m = round(1.0 / h)
    if m < 1 or abs(m * h - 1.0) > 1e-9:
        raise SeirError(f"h must equal 1/m for integer m >= 1, got {h}")
    return m


def simulate_scenario(table: CountyTable, flow: FlowMatrix, params: MixParams,
                      days: int, h: float, seed: int,
                      keep_trajectory: bool = True) -> Scenario:
    """Integrate the mixing model and derive the recorded-case series.

    The trajectory is sampled at day boundaries (days+1 samples including
    day 0); cumulative recorded cases per county are I + R.
    """
    if days < 1:
        raise SeirError("days must be >= 1")
    m = steps_per_day(h)
    pops = table.populations
    beta = table.densities / params.mu_spread
    state = sample_initial_state(table, params, seed)

    n = len(table)
    trajectory = np.zeros((days + 1, n, 4), dtype=np.float64)
    trajectory[0] = state.values
    clamp_events = 0
    for day in range(1, days + 1):
        for _ in range(m):
            deriv = mixing_derivative(state, flow, beta, params.sigma,
                                      params.gamma, pops)
            state, clamped = euler_step(state, deriv, h)
            clamp_events += clamped
        trajectory[day] = state.values
    cumulative = trajectory[:, :, I].T + trajectory[:, :, R].T
    return Scenario(params=params, seed=seed, role="train",
                    cumulative=cumulative,
                    trajectory=trajectory if keep_trajectory else None,
                    clamp_events=clamp_events)


def _scenario_job(args) -> Scenario:
    table, ranges, distances, role, idx, days, h, seed, keep = args
    label = f"{role}-{idx}"
    params = ranges.sample(rng_for(seed, f"corpus-params-{label}"))
    init_seed = derive_seed(seed, f"corpus-init-{label}")
    flow = build_flow_matrix(table, distances, params.mu_flow)
    scenario = simulate_scenario(table, flow, params, days, h, init_seed,
                                 keep_trajectory=keep)
    scenario.role = role
    return scenario


def generate_corpus(table: CountyTable, ranges: ParamRanges, n_train: int,
                    n_valid: int, days: int, h: float, seed: int,
                    keep_trajectories: bool = False,
                    jobs: int = 1) -> ScenarioCorpus:
    """Sample (n_train + n_valid) scenarios with per-scenario derived seeds.

    Reproducible bit-for-bit from (ranges, counts, seed): every scenario's
    content depends only on its own derived seed, so with jobs > 1 the
    scenarios run on a process pool and reassemble in index order.
    """
    if n_train < 0 or n_valid < 0:
        raise ValueError("scenario counts must be non-negative")
    distances = distance_matrix(table)
    work = [(table, ranges, distances, role, idx, days, h, seed,
             keep_trajectories)
            for role, count in (("train", n_train), ("valid", n_valid))
            for idx in range(count)]
    if jobs <= 1 or len(work) < 2:
        scenarios = [_scenario_job(args) for args in work]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenarios = list(pool.map(_scenario_job, work))
    return ScenarioCorpus(county_ids=table.ids, days=days, h=h, seed=seed,
                          ranges=ranges, scenarios=scenarios)


# -- corpus persistence ---------------------------------------------------
#
# Line-delimited JSON: a header object, then one object per scenario with
# its parameter block and the counties x (days+1) cumulative matrix.
# Floats serialize via repr, so write/read/write round-trips bit-exactly.

_CORPUS_FORMAT = "epiforge-corpus"
_CORPUS_VERSION = 1


def save_corpus(corpus: ScenarioCorpus, path) -> None:
    header = {
        "format": _CORPUS_FORMAT,
        "version": _CORPUS_VERSION,
        "county_ids": corpus.county_ids,
        "days": corpus.days,
        "h": corpus.h,
        "seed": corpus.seed,
        "n_train": len(corpus.train),
        "n_valid": len(corpus.valid),
        "ranges": corpus.ranges.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for sc in corpus.scenarios:
            record = {
                "role": sc.role,
                "seed": sc.seed,
                "params": sc.params.to_dict(),
                "clamp_events": sc.clamp_events,
                "cumulative": sc.cumulative.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_corpus(path) -> ScenarioCorpus:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SeirError(f"{path}: empty corpus file")
    header = json.loads(lines[0])
    if header.get("format") != _CORPUS_FORMAT:
        raise SeirError(f"{path}: not an epiforge corpus file")
    corpus = ScenarioCorpus(
        county_ids=list(header["county_ids"]),
        days=int(header["days"]),
        h=float(header["h"]),
        seed=int(header["seed"]),
        ranges=ParamRanges.from_dict(header["ranges"]),
    )
    for line in lines[1:]:
        if not line.strip():
            continue
        record = json.loads(line)
        corpus.scenarios.append(Scenario(
            params=MixParams.from_dict(record["params"]),
            seed=int(record["seed"]),
            role=record["role"],
            cumulative=np.array(record["cumulative"], dtype=np.float64),
            clamp_events=int(record.get("clamp_events", 0)),
        ))
    return corpus
