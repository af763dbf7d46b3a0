"""County metadata, adjacency and case-series ingestion.

The row ordering of a CountyTable (sorted by county id) is the single
source of truth: row i of every downstream matrix refers to records[i].

File layouts:
  - county-feature CSV: fips,name,state,lat,lon,population,density
  - JHU-layout CSV: header with UID, FIPS, Admin2, Province_State, Lat,
    Long_, Combined_Key, then one column per date (M/D/YY) holding
    cumulative confirmed cases
  - adjacency file: one "fips_a,fips_b" edge per line, '#' comments
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0

# Bronx, Kings, Queens, Richmond: zero-case rows aggregated into the
# New York City totals in the JHU feed; dropped by default on ingestion.
AGGREGATED_NY_FIPS = ("36005", "36047", "36081", "36085")

_DATE_COLUMN_RE = re.compile(r"^\d{1,2}/\d{1,2}/\d{2,4}$")

FEATURE_COLUMNS = ("lat", "lon", "population", "density",
                   "log_population", "log_density")


class GeoError(Exception):
    """Base class for ingestion errors."""


class ParseError(GeoError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class DuplicateIdError(GeoError):
    def __init__(self, ids):
        super().__init__(f"duplicate county ids: {sorted(ids)}")
        self.ids = sorted(ids)


class MissingColumnError(GeoError):
    def __init__(self, columns):
        super().__init__(f"missing required columns: {sorted(columns)}")
        self.columns = sorted(columns)


class UnknownIdError(GeoError):
    def __init__(self, ids):
        super().__init__(f"unknown county ids: {sorted(ids)}")
        self.ids = sorted(ids)


@dataclass(frozen=True)
class CountyRecord:
    id: str
    name: str
    state: str
    lat: float
    lon: float
    population: int
    density: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"county {self.id}: lat {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"county {self.id}: lon {self.lon} out of range")
        if self.population < 1:
            raise ValueError(f"county {self.id}: population must be >= 1")
        if self.density <= 0:
            raise ValueError(f"county {self.id}: density must be > 0")


@dataclass(frozen=True)
class CountyTable:
    """Ordered, immutable list of counties with an id -> row index."""

    records: tuple[CountyRecord, ...]
    index: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def from_records(records) -> "CountyTable":
        ordered = tuple(sorted(records, key=lambda r: r.id))
        seen, dupes = set(), set()
        for rec in ordered:
            if rec.id in seen:
                dupes.add(rec.id)
            seen.add(rec.id)
        if dupes:
            raise DuplicateIdError(dupes)
        return CountyTable(ordered, {r.id: i for i, r in enumerate(ordered)})

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def populations(self) -> np.ndarray:
        return np.array([r.population for r in self.records], dtype=np.float64)

    @property
    def densities(self) -> np.ndarray:
        return np.array([r.density for r in self.records], dtype=np.float64)

    def subset(self, keep: np.ndarray) -> "CountyTable":
        """New table restricted to rows where keep is truthy."""
        kept = [r for r, k in zip(self.records, keep) if k]
        return CountyTable.from_records(kept)


@dataclass(frozen=True)
class CaseSeries:
    """Cumulative recorded cases, counties x days, in table row order."""

    counties: CountyTable
    dates: tuple[str, ...]
    cumulative: np.ndarray

    def __post_init__(self):
        if self.cumulative.shape != (len(self.counties), len(self.dates)):
            raise ValueError(
                f"cumulative shape {self.cumulative.shape} does not match "
                f"{len(self.counties)} counties x {len(self.dates)} dates")
        if np.any(self.cumulative < 0):
            raise ValueError("cumulative case counts must be non-negative")

    @property
    def incidence(self) -> np.ndarray:
        """Day-over-day increase, floored at 0; day 0 is the first count."""
        inc = np.diff(self.cumulative, axis=1, prepend=0.0)
        return np.maximum(inc, 0.0)


@dataclass(frozen=True)
class AdjacencyList:
    """Symmetric neighbor positions per county, no self-loops."""

    neighbors: tuple[tuple[int, ...], ...]

    def __len__(self):
        return len(self.neighbors)


@dataclass(frozen=True)
class FeatureMatrix:
    """Standardized county features with retained statistics.

    Columns follow FEATURE_COLUMNS; zero-variance columns are zeroed and
    flagged instead of dividing by zero.
    """

    values: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray


def normalize_fips(raw: str) -> str:
    """Canonical county id: '1001.0' and '01001' both become '01001'."""
    text = raw.strip().strip('"')
    if not text:
        return ""
    try:
        value = float(text)
    except ValueError:
        return text
    if not value.is_integer():
        return text
    return f"{int(value):05d}"


def _read_rows(path):
    with open(path, newline="", encoding="utf-8-sig") as fh:
        yield from enumerate(csv.reader(fh), start=1)


def load_county_table(path, fmt: str = "features",
                      drop_aggregated_ny: bool | None = None) -> CountyTable:
    """Load a CountyTable from a county-feature or JHU-layout CSV.

    fmt="features" reads the full record. fmt="jhu" takes id/name/state/
    lat/lon from the case file and fills population=1, density=1.0 as
    placeholders (the JHU layout carries no demographics; merge a feature
    CSV via merge_demographics when weighted metrics are needed).

    drop_aggregated_ny defaults to True for "jhu" and False otherwise.
    """
    if fmt not in ("features", "jhu"):
        raise ValueError(f"unknown county table format: {fmt!r}")
    if drop_aggregated_ny is None:
        drop_aggregated_ny = fmt == "jhu"

    if fmt == "features":
        records = _parse_feature_csv(path)
    else:
        parsed, _ = _parse_jhu_csv(path)
        records = [rec for rec, _ in parsed]

    if drop_aggregated_ny:
        records = [r for r in records if r.id not in AGGREGATED_NY_FIPS]
    return CountyTable.from_records(records)


def _parse_feature_csv(path):
    rows = _read_rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise ParseError(path, 1, "empty file") from None
    required = ["fips", "name", "state", "lat", "lon", "population", "density"]
    cols = {name.strip().lower(): i for i, name in enumerate(header)}
    missing = [c for c in required if c not in cols]
    if missing:
        raise MissingColumnError(missing)

    records = []
    for line_no, row in rows:
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            records.append(CountyRecord(
                id=normalize_fips(row[cols["fips"]]),
                name=row[cols["name"]].strip(),
                state=row[cols["state"]].strip(),
                lat=float(row[cols["lat"]]),
                lon=float(row[cols["lon"]]),
                population=int(float(row[cols["population"]])),
                density=float(row[cols["density"]]),
            ))
        except (ValueError, IndexError) as exc:
            raise ParseError(path, line_no, str(exc)) from None
    return records


def _parse_jhu_csv(path, drop_non_county: bool = True):
    """Yield (CountyRecord, per-date cumulative list) pairs from a JHU CSV."""
    rows = _read_rows(path)
    try:
        _, header = next(rows)
    except StopIteration:
        raise ParseError(path, 1, "empty file") from None
    cols = {name.strip(): i for i, name in enumerate(header)}
    required = ["FIPS", "Admin2", "Province_State", "Lat", "Long_"]
    missing = [c for c in required if c not in cols]
    if missing:
        raise MissingColumnError(missing)
    date_cols = [(name.strip(), i) for i, name in enumerate(header)
                 if _DATE_COLUMN_RE.match(name.strip())]
    if not date_cols:
        raise MissingColumnError(["<M/D/YY date columns>"])

    out = []
    for line_no, row in rows:
        if not row or all(not cell.strip() for cell in row):
            continue
        fips = normalize_fips(row[cols["FIPS"]])
        if not fips:
            continue
        # FIPS >= 80000 are JHU bookkeeping rows (Out of <state>, Unassigned).
        if drop_non_county and fips.isdigit() and int(fips) >= 80000:
            continue
        try:
            lat = float(row[cols["Lat"]] or 0.0)
            lon = float(row[cols["Long_"]] or 0.0)
            record = CountyRecord(
                id=fips,
                name=row[cols["Admin2"]].strip(),
                state=row[cols["Province_State"]].strip(),
                lat=lat, lon=lon,
                population=1, density=1.0,
            )
            values = [float(row[i] or 0.0) for _, i in date_cols]
        except (ValueError, IndexError) as exc:
            raise ParseError(path, line_no, str(exc)) from None
        out.append((record, values))
    return out, [name for name, _ in date_cols]


def load_case_series(path, table: CountyTable | None = None,
                     drop_aggregated_ny: bool = True
                     ) -> tuple[CountyTable, CaseSeries]:
    """Load cumulative cases from a JHU-layout CSV.

    With a table given, rows are matched to it by id (missing counties are
    an UnknownIdError); otherwise a placeholder-demographics table is built
    from the file itself.
    """
    parsed, dates = _parse_jhu_csv(path)
    if drop_aggregated_ny:
        parsed = [(r, v) for r, v in parsed if r.id not in AGGREGATED_NY_FIPS]
    by_id = {rec.id: (rec, vals) for rec, vals in parsed}
    if len(by_id) != len(parsed):
        counts = {}
        for rec, _ in parsed:
            counts[rec.id] = counts.get(rec.id, 0) + 1
        raise DuplicateIdError([k for k, n in counts.items() if n > 1])

    if table is None:
        table = CountyTable.from_records([rec for rec, _ in parsed])
    missing = [cid for cid in table.ids if cid not in by_id]
    if missing:
        raise UnknownIdError(missing)

    matrix = np.array([by_id[cid][1] for cid in table.ids], dtype=np.float64)
    return table, CaseSeries(table, tuple(dates), matrix)


def merge_demographics(table: CountyTable, features_path) -> CountyTable:
    """Replace placeholder population/density using a county-feature CSV."""
    by_id = {rec.id: rec for rec in _parse_feature_csv(features_path)}
    missing = [cid for cid in table.ids if cid not in by_id]
    if missing:
        raise UnknownIdError(missing)
    merged = []
    for rec in table.records:
        feat = by_id[rec.id]
        merged.append(CountyRecord(
            id=rec.id, name=rec.name or feat.name, state=rec.state or feat.state,
            lat=rec.lat, lon=rec.lon,
            population=feat.population, density=feat.density))
    return CountyTable.from_records(merged)


def haversine_distance(a: CountyRecord, b: CountyRecord) -> float:
    """Great-circle distance in km between county centroids (R=6371)."""
    rlat1, rlat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = math.radians(b.lat - a.lat)
    dlon = math.radians(b.lon - a.lon)
    s = (math.sin(dlat / 2.0) ** 2
         + math.cos(rlat1) * math.cos(rlat2) * math.sin(dlon / 2.0) ** 2)
    return EARTH_RADIUS_KM * 2.0 * math.atan2(math.sqrt(s), math.sqrt(1.0 - s))


def distance_matrix(table: CountyTable) -> np.ndarray:
    """Symmetric pairwise haversine distances (km), zero diagonal."""
    n = len(table)
    dist = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_distance(table.records[i], table.records[j])
            dist[i, j] = dist[j, i] = d
    return dist


def build_feature_matrix(table: CountyTable) -> FeatureMatrix:
    """Counties x 6 standardized feature matrix.

    Columns: lat, lon, population, density, ln(population), ln(density),
    each standardized to mean 0 / unit variance over counties.
    """
    if len(table) == 0:
        raise ValueError("county table is empty")
    pop = table.populations
    dens = table.densities
    raw = np.column_stack([
        np.array([r.lat for r in table.records]),
        np.array([r.lon for r in table.records]),
        pop, dens, np.log(pop), np.log(dens),
    ]).astype(np.float64)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    zero_var = std < 1e-12
    safe_std = np.where(zero_var, 1.0, std)
    values = (raw - mean) / safe_std
    values[:, zero_var] = 0.0
    return FeatureMatrix(values=values, mean=mean, std=std, zero_variance=zero_var)


def load_adjacency(path, table: CountyTable) -> AdjacencyList:
    """Read edge lines, symmetrize, and drop self-loops."""
    n = len(table)
    sets: list[set[int]] = [set() for _ in range(n)]
    unknown = set()
    with open(path, encoding="utf-8-sig") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = [normalize_fips(p) for p in text.split(",")]
            if len(parts) != 2:
                raise ParseError(path, line_no,
                                 f"expected 'fips_a,fips_b', got {text!r}")
            a, b = parts
            if a not in table.index:
                unknown.add(a)
            if b not in table.index:
                unknown.add(b)
            if unknown:
                continue
            ia, ib = table.index[a], table.index[b]
            if ia == ib:
                continue
            sets[ia].add(ib)
            sets[ib].add(ia)
    if unknown:
        raise UnknownIdError(unknown)
    return AdjacencyList(tuple(tuple(sorted(s)) for s in sets))
