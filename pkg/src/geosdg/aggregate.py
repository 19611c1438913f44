"""National aggregation of location predictions and comparison with official statistics."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateFit, FormatError, IngestError, InvalidValue
from .ingest import TASKS, SurveyRecord, haversine_km

POPULATION_HEADER = ["lat", "lon", "population", "country"]
OFFICIAL_HEADER = ["country", "year", "piped_pct", "sewage_pct"]
ESTIMATE_HEADER = ["country", "task", "access_pct", "population_covered", "population_total", "n_locations"]
LOCATION_HEADER = ["location_id", "lat", "lon", "country", "task", "score", "label", "n_tiles"]
SCATTER_HEADER = ["country", "task", "model_pct", "official_pct", "population"]
REPORT_HEADER = ["task", "n_pairs", "n_dropped", "r_squared", "slope", "intercept",
                 "r_squared_weighted", "slope_weighted", "intercept_weighted", "pearson_r2", "paper_r2"]
RATES_HEADER = ["country", "round", "task", "urban_pct", "rural_pct", "urban_n", "rural_n"]

# headline values stated for the published comparison; reported, never asserted
PAPER_R2 = {"piped_water": 0.95, "sewage": 0.85}
SCATTER_TASK = {"piped_water": "piped", "sewage": "sewage"}


def _pct(x: float | None) -> str:
    return "" if x is None else f"{100.0 * x:.2f}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_rows(path, header: list[str]):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IngestError(f"cannot read {path}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    if next(reader, None) != header:
        raise FormatError(f"{path}: header must be {','.join(header)}", row=1)
    return [(i, row) for i, row in enumerate(reader, start=2) if row]


# --- per-location fusion -----------------------------------------------------

def fuse_predictions(groups: Mapping[str, Sequence[int]]) -> dict[str, tuple[float, int]]:
    """Mean tile vote per location; label 1 only when the mean exceeds 0.5."""
    out = {}
    for loc, preds in groups.items():
        if len(preds) == 0:
            raise InvalidValue(f"location {loc} has no tile predictions")
        score = float(np.mean(np.asarray(preds, dtype=np.float64)))
        out[loc] = (score, int(score > 0.5))
    return out


@dataclass(frozen=True)
class LocationLabel:
    location_id: str
    lat: float
    lon: float
    label: int
    country: str = ""
    task: str = ""
    score: float | None = None
    n_tiles: int = 1


def locations_csv(locs: Sequence[LocationLabel]) -> str:
    return _csv(LOCATION_HEADER, [[l.location_id, repr(l.lat), repr(l.lon), l.country, l.task,
                                   "" if l.score is None else repr(l.score), l.label, l.n_tiles]
                                  for l in locs])


def read_locations(path) -> list[LocationLabel]:
    out = []
    for i, row in _read_rows(path, LOCATION_HEADER):
        try:
            out.append(LocationLabel(row[0], float(row[1]), float(row[2]), int(row[6]), row[3], row[4],
                                     float(row[5]) if row[5] else None, int(row[7])))
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}: malformed row {i}: {e}", row=i) from None
    return out


# --- population weighting ----------------------------------------------------

@dataclass(frozen=True)
class PopulationCell:
    lat: float
    lon: float
    population: float
    country: str

    def __post_init__(self):
        if not self.population >= 0:
            raise InvalidValue("population must be non-negative")
        if not self.country:
            raise InvalidValue("population cell lacks a country")


def read_population(path) -> list[PopulationCell]:
    out = []
    for i, row in _read_rows(path, POPULATION_HEADER):
        try:
            out.append(PopulationCell(float(row[0]), float(row[1]), float(row[2]), row[3]))
        except (ValueError, IndexError, InvalidValue) as e:
            raise FormatError(f"{path}: malformed row {i}: {e}", row=i) from None
    return out


@dataclass(frozen=True)
class CountryEstimate:
    country: str
    task: str
    access_fraction: float
    population_covered: float
    population_total: float
    n_locations: int


@dataclass
class AggregationResult:
    estimates: list[CountryEstimate]
    excluded_population: dict[str, float]
    excluded_cells: dict[str, int]
    diagnostics: list[str] = field(default_factory=list)


def assign_cells(cells: Sequence[PopulationCell], locations: Sequence[LocationLabel],
                 radius_km: float, chunk: int = 2048) -> np.ndarray:
    """Index of the nearest location within ``radius_km`` per cell, or -1."""
    if not radius_km > 0:
        raise ConfigError("assignment radius must be positive")
    out = np.full(len(cells), -1, dtype=np.int64)
    if not locations or not cells:
        return out
    llat = np.array([l.lat for l in locations])
    llon = np.array([l.lon for l in locations])
    clat = np.array([c.lat for c in cells])
    clon = np.array([c.lon for c in cells])
    for s in range(0, len(cells), chunk):
        d = haversine_km(clat[s:s + chunk, None], clon[s:s + chunk, None], llat[None], llon[None])
        j = np.argmin(d, axis=1)
        ok = d[np.arange(len(j)), j] <= radius_km
        out[s:s + chunk] = np.where(ok, j, -1)
    return out


def population_weighted_access(locations: Sequence[LocationLabel], cells: Sequence[PopulationCell],
                               radius_km: float = 5.0, task: str = "") -> AggregationResult:
    """Per-country share of population whose nearest predicted location has access.

    Cells with no location within ``radius_km`` are excluded and reported,
    never imputed. Output is sorted by country.
    """
    assign = assign_cells(cells, locations, radius_km)
    pop_in = defaultdict(float)
    pop_yes = defaultdict(float)
    pop_all = defaultdict(float)
    locs_used = defaultdict(set)
    excl_pop = defaultdict(float)
    excl_n = defaultdict(int)
    for cell, j in zip(cells, assign):
        pop_all[cell.country] += cell.population
        if j < 0:
            excl_pop[cell.country] += cell.population
            excl_n[cell.country] += 1
            continue
        pop_in[cell.country] += cell.population
        pop_yes[cell.country] += cell.population * locations[j].label
        locs_used[cell.country].add(int(j))
    estimates, diags = [], []
    for country in sorted(pop_all):
        if pop_in[country] <= 0:
            diags.append(f"{country}: no populated cell within {radius_km} km of a predicted location")
            continue
        estimates.append(CountryEstimate(country, task, pop_yes[country] / pop_in[country],
                                         pop_in[country], pop_all[country], len(locs_used[country])))
    return AggregationResult(estimates, dict(excl_pop), dict(excl_n), diags)


def estimates_csv(estimates: Sequence[CountryEstimate]) -> str:
    return _csv(ESTIMATE_HEADER, [[e.country, e.task, _pct(e.access_fraction), f"{e.population_covered:.0f}",
                                   f"{e.population_total:.0f}", e.n_locations] for e in estimates])


def read_estimates(path) -> list[CountryEstimate]:
    out = []
    for i, row in _read_rows(path, ESTIMATE_HEADER):
        try:
            out.append(CountryEstimate(row[0], row[1], float(row[2]) / 100.0, float(row[3]),
                                       float(row[4]), int(row[5])))
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}: malformed row {i}: {e}", row=i) from None
    return out


# --- urban / rural stratification --------------------------------------------

@dataclass(frozen=True)
class StratumRate:
    country: str
    round: int
    task: str
    urban: float | None
    rural: float | None
    urban_n: int
    rural_n: int


def urban_rural_rates(records: Iterable[SurveyRecord]) -> list[StratumRate]:
    """Share of records with access per (country, round, task) and urban flag.

    Empty strata report ``None`` (blank in CSV).
    """
    counts = defaultdict(lambda: [0, 0, 0, 0])  # urban_yes, urban_n, rural_yes, rural_n
    for r in records:
        for task in TASKS:
            c = counts[(r.country, r.round, task)]
            lab = r.label(task)
            if r.urban:
                c[0] += lab
                c[1] += 1
            else:
                c[2] += lab
                c[3] += 1
    out = []
    for (country, rnd, task) in sorted(counts):
        uy, un, ry, rn = counts[(country, rnd, task)]
        out.append(StratumRate(country, rnd, task, uy / un if un else None, ry / rn if rn else None, un, rn))
    return out


def rates_csv(rates: Sequence[StratumRate]) -> str:
    return _csv(RATES_HEADER, [[r.country, r.round, r.task, _pct(r.urban), _pct(r.rural), r.urban_n, r.rural_n]
                               for r in rates])


# --- validation against official statistics ----------------------------------

@dataclass
class ValidationReport:
    task: str
    countries: list[str]
    model: np.ndarray
    official: np.ndarray
    weights: np.ndarray | None
    n_dropped: int
    r_squared: float
    slope: float
    intercept: float
    pearson_r2: float
    r_squared_weighted: float | None = None
    slope_weighted: float | None = None
    intercept_weighted: float | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.countries)


def _wls(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, float, float]:
    sw = w.sum()
    mx, my = (w * x).sum() / sw, (w * y).sum() / sw
    sxx = (w * (x - mx) ** 2).sum()
    if sxx <= 0:
        raise DegenerateFit("model values have zero variance")
    slope = (w * (x - mx) * (y - my)).sum() / sxx
    intercept = my - slope * mx
    ss_res = (w * (y - (intercept + slope * x)) ** 2).sum()
    ss_tot = (w * (y - my) ** 2).sum()
    if ss_tot <= 0:
        raise DegenerateFit("official values have zero variance")
    return float(1.0 - ss_res / ss_tot), float(slope), float(intercept)


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def r_squared(model: Sequence, official: Sequence, weights: Sequence | None = None,
              countries: Sequence[str] | None = None, task: str = "") -> ValidationReport:
    """Least-squares fit of official on model values.

    Pairs missing either side (``None``/NaN) are dropped and counted.
    Reports the unweighted R^2 (primary), a weighted variant when
    ``weights`` are given, and the squared Pearson correlation.
    """
    if not len(model) == len(official) or (weights is not None and len(weights) != len(model)):
        raise InvalidValue("model, official and weights must have equal lengths")
    names = list(countries) if countries is not None else [str(i) for i in range(len(model))]
    keep = [i for i in range(len(model)) if not (_missing(model[i]) or _missing(official[i]))]
    x = np.array([float(model[i]) for i in keep])
    y = np.array([float(official[i]) for i in keep])
    w = None if weights is None else np.array([float(weights[i]) for i in keep])
    if len(keep) < 2:
        raise DegenerateFit(f"need at least 2 complete pairs, got {len(keep)}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InvalidValue("values must be finite")
    r2, slope, icpt = _wls(x, y, np.ones_like(x))
    xc, yc = x - x.mean(), y - y.mean()
    pearson = float((xc * yc).sum() / math.sqrt((xc * xc).sum() * (yc * yc).sum()))
    rep = ValidationReport(task, [names[i] for i in keep], x, y, w, len(model) - len(keep),
                           r2, slope, icpt, pearson * pearson)
    if w is not None:
        if not (w > 0).all():
            raise InvalidValue("weights must be positive")
        rep.r_squared_weighted, rep.slope_weighted, rep.intercept_weighted = _wls(x, y, w)
    return rep


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def report_csv(reports: Sequence[ValidationReport]) -> str:
    return _csv(REPORT_HEADER, [[r.task, r.n_pairs, r.n_dropped, _num(r.r_squared), _num(r.slope),
                                 _num(r.intercept), _num(r.r_squared_weighted), _num(r.slope_weighted),
                                 _num(r.intercept_weighted), _num(r.pearson_r2), _num(PAPER_R2.get(r.task))]
                                for r in reports])


def scatter_rows(report: ValidationReport, population: Mapping[str, float]) -> list[list[str]]:
    task = SCATTER_TASK.get(report.task, report.task)
    rows = []
    for c, m, o in zip(report.countries, report.model, report.official):
        pop = population.get(c)
        rows.append([c, task, f"{m:.2f}", f"{o:.2f}", "" if pop is None else f"{pop:.0f}"])
    return rows


def scatter_export(reports: ValidationReport | Sequence[ValidationReport] | None,
                   population: Mapping[str, float]) -> str:
    """Plot-ready CSV, one row per retained (country, task) pair."""
    if reports is None:
        reports = []
    elif isinstance(reports, ValidationReport):
        reports = [reports]
    rows = []
    for r in reports:
        rows += scatter_rows(r, population)
    return _csv(SCATTER_HEADER, rows)


# --- official statistics and the digitised comparison table ------------------

@dataclass(frozen=True)
class OfficialStat:
    country: str
    year: int
    piped_pct: float | None
    sewage_pct: float | None

    def pct(self, task: str) -> float | None:
        return self.piped_pct if task == "piped_water" else self.sewage_pct


def read_official(path) -> dict[str, OfficialStat]:
    out = {}
    for i, row in _read_rows(path, OFFICIAL_HEADER):
        try:
            out[row[0]] = OfficialStat(row[0], int(row[1]), float(row[2]) if row[2] else None,
                                       float(row[3]) if row[3] else None)
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}: malformed row {i}: {e}", row=i) from None
    return out


def official_csv(stats: Iterable[OfficialStat]) -> str:
    return _csv(OFFICIAL_HEADER, [[s.country, s.year, "" if s.piped_pct is None else f"{s.piped_pct:.2f}",
                                   "" if s.sewage_pct is None else f"{s.sewage_pct:.2f}"] for s in stats])


def read_country_population(path) -> dict[str, float]:
    out = {}
    for i, row in _read_rows(path, ["country", "population"]):
        try:
            out[row[0]] = float(row[1])
        except (ValueError, IndexError) as e:
            raise FormatError(f"{path}: malformed row {i}: {e}", row=i) from None
    return out


@dataclass(frozen=True)
class TableS2Row:
    country: str
    name: str
    year: int
    population: int
    piped_model: float | None
    piped_jmp: float | None
    sewage_model: float | None
    sewage_jmp: float | None


def table_s2() -> list[TableS2Row]:
    """Country-level model vs JMP percentages (2022 comparison table), as digitised."""
    text = resources.files("geosdg").joinpath("data/table_s2.csv").read_text()
    f = lambda v: float(v) if v else None  # noqa: E731
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(TableS2Row(r["country"], r["name"], int(r["year"]), int(r["population"]),
                               f(r["piped_model_pct"]), f(r["piped_jmp_pct"]),
                               f(r["sewage_model_pct"]), f(r["sewage_jmp_pct"])))
    return rows


def table_s2_reports() -> list[ValidationReport]:
    rows = table_s2()
    reps = []
    for task, mk, ok in (("piped_water", "piped_model", "piped_jmp"), ("sewage", "sewage_model", "sewage_jmp")):
        reps.append(r_squared([getattr(r, mk) for r in rows], [getattr(r, ok) for r in rows],
                              weights=[r.population for r in rows], countries=[r.country for r in rows],
                              task=task))
    return reps


def write_table_s2_inputs(out_dir) -> dict[str, Path]:
    """Split the digitised table into the estimate / official / population CSVs ``validate`` reads."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = table_s2()
    est = []
    for r in rows:
        for task, v in (("piped_water", r.piped_model), ("sewage", r.sewage_model)):
            if v is not None:
                est.append([r.country, task, f"{v:.2f}", f"{r.population}", f"{r.population}", 0])
    paths = {"estimates": out / "estimates.csv", "official": out / "official.csv",
             "population": out / "country_population.csv"}
    paths["estimates"].write_text(_csv(ESTIMATE_HEADER, est))
    paths["official"].write_text(official_csv(OfficialStat(r.country, r.year, r.piped_jmp, r.sewage_jmp)
                                              for r in rows))
    paths["population"].write_text(_csv(["country", "population"], [[r.country, r.population] for r in rows]))
    return paths
