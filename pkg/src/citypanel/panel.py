"""Core panel types: cities, balanced city-by-century grids, treatment schedules.

The unit of analysis is a city observed on a century grid (800, 900, ...,
1800).  A :class:`BalancedPanel` stores populations and covariates as dense
``(n_cities, n_years)`` arrays; a :class:`TreatmentSchedule` records, per
city, the adoption cohort and an exposure-intensity path derived from
institution counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    DuplicateCell,
    InconsistentSeries,
    MissingCell,
    NegativePopulation,
    UnknownCity,
    YearOffGrid,
)

YEAR_MIN = 800
YEAR_MAX = 1800
YEAR_STEP = 100

#: The full century grid the data model supports.
FULL_YEAR_GRID = tuple(range(YEAR_MIN, YEAR_MAX + 1, YEAR_STEP))


class Region(Enum):
    """Geographic macro-regions used for sample splits and aggregates."""

    WESTERN_EUROPE = "western_europe"
    ARAB_PENINSULA = "arab_peninsula"
    LEVANTINE = "levantine"
    NORTH_AFRICA = "north_africa"
    OTTOMAN_ANATOLIAN = "ottoman_anatolian"
    GRANADA = "granada"


#: Regions whose cities were predominantly under Islamic rule.
ISLAMIC_REGIONS = frozenset(
    {
        Region.ARAB_PENINSULA,
        Region.LEVANTINE,
        Region.NORTH_AFRICA,
        Region.OTTOMAN_ANATOLIAN,
        Region.GRANADA,
    }
)


@dataclass(frozen=True)
class CityRecord:
    """Static metadata for one city.

    Parameters
    ----------
    city_id : str
        Stable identifier, unique within a panel.
    name : str
        Display name.
    region : Region
        Macro-region the city belongs to.
    latitude, longitude : float
        Coordinates in decimal degrees.
    islamic_rule : Mapping[int, bool]
        Per century-mark flag: was the city under Islamic rule in that
        century?  Must cover every year of the panel the record is used in.
    """

    city_id: str
    name: str
    region: Region
    latitude: float
    longitude: float
    islamic_rule: Mapping[int, bool]

    def __post_init__(self):
        if not self.city_id:
            raise DataError("city_id must be non-empty")
        if not (-90.0 <= self.latitude <= 90.0):
            raise DataError(f"{self.city_id}: latitude {self.latitude} out of range")
        if not (-180.0 <= self.longitude <= 180.0):
            raise DataError(f"{self.city_id}: longitude {self.longitude} out of range")

    def islamic_in(self, year: int) -> bool:
        try:
            return bool(self.islamic_rule[year])
        except KeyError:
            raise DataError(
                f"{self.city_id}: islamic_rule not defined for year {year}"
            ) from None


# Field name -> (kind, valid range) for covariate validation.  "binary"
# fields accept 0/1, "ordinal" fields an integer range, "nonneg" any
# non-negative finite float.
_COVARIATE_SPECS = {
    "active_parliament": ("binary", None),
    "political_freedom": ("binary", None),
    "roman_law": ("ordinal", (0, 4)),
    "book_production": ("nonneg", None),
    "capital_city": ("binary", None),
    "bishopric": ("binary", None),
    "black_death": ("ordinal", (0, 5)),
    "foreign_urban_potential": ("nonneg", None),
    "caravan_hub": ("binary", None),
    "sea_access": ("binary", None),
    "distance_mecca": ("nonneg", None),
    "granada": ("binary", None),
}

COVARIATE_FIELDS = tuple(_COVARIATE_SPECS)


@dataclass(frozen=True)
class CovariateVector:
    """Structural covariates for one (city, year) cell.

    Binary institutional flags, ordinal indices (Roman-law reception 0-4,
    Black Death exposure 0-5) and non-negative continuous measures
    (book production, foreign urban potential in thousands/km, distance to
    Mecca in km).
    """

    active_parliament: float = 0.0
    political_freedom: float = 0.0
    roman_law: float = 0.0
    book_production: float = 0.0
    capital_city: float = 0.0
    bishopric: float = 0.0
    black_death: float = 0.0
    foreign_urban_potential: float = 0.0
    caravan_hub: float = 0.0
    sea_access: float = 0.0
    distance_mecca: float = 0.0
    granada: float = 0.0

    def __post_init__(self):
        for name, (kind, rng) in _COVARIATE_SPECS.items():
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DataError(f"covariate {name} is not finite")
            if kind == "binary" and value not in (0.0, 1.0):
                raise DataError(f"covariate {name}={value!r} must be 0 or 1")
            if kind == "ordinal":
                lo, hi = rng
                if value != int(value) or not (lo <= value <= hi):
                    raise DataError(
                        f"covariate {name}={value!r} must be an integer in [{lo}, {hi}]"
                    )
            if kind == "nonneg" and value < 0:
                raise DataError(f"covariate {name}={value!r} must be >= 0")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class PanelObservation:
    """One (city, year) data point: population plus covariates."""

    city_id: str
    year: int
    population: float
    covariates: CovariateVector = field(default_factory=CovariateVector)

    def __post_init__(self):
        if self.year not in FULL_YEAR_GRID:
            raise YearOffGrid(
                f"{self.city_id}: year {self.year} not on the century grid "
                f"{YEAR_MIN}..{YEAR_MAX}"
            )
        if not math.isfinite(self.population) or self.population < 0:
            raise NegativePopulation(
                f"{self.city_id}@{self.year}: population {self.population!r}"
            )


class BalancedPanel:
    """A dense city-by-century grid of populations and covariates.

    Construct through :func:`build_panel`, which validates balance and
    uniqueness.  Cities are stored sorted by ``city_id`` so that array rows
    have a deterministic order.
    """

    def __init__(self, cities, year_grid, population, covariates, islamic):
        self.cities: tuple[CityRecord, ...] = tuple(cities)
        self.year_grid: tuple[int, ...] = tuple(year_grid)
        self.population: np.ndarray = population
        self.covariates: dict[str, np.ndarray] = covariates
        self.islamic: np.ndarray = islamic
        self.city_ids: tuple[str, ...] = tuple(c.city_id for c in self.cities)
        self._city_index = {cid: i for i, cid in enumerate(self.city_ids)}
        self._year_index = {y: j for j, y in enumerate(self.year_grid)}

    # -- basic geometry ----------------------------------------------------
    @property
    def n_cities(self) -> int:
        return len(self.cities)

    @property
    def n_years(self) -> int:
        return len(self.year_grid)

    def city_index(self, city_id: str) -> int:
        try:
            return self._city_index[city_id]
        except KeyError:
            raise UnknownCity(f"unknown city {city_id!r}") from None

    def year_index(self, year: int) -> int:
        try:
            return self._year_index[year]
        except KeyError:
            raise YearOffGrid(f"year {year} not in panel grid") from None

    def city(self, city_id: str) -> CityRecord:
        return self.cities[self.city_index(city_id)]

    def observation(self, city_id: str, year: int) -> PanelObservation:
        i, j = self.city_index(city_id), self.year_index(year)
        cov = CovariateVector(
            **{name: float(self.covariates[name][i, j]) for name in COVARIATE_FIELDS}
        )
        return PanelObservation(city_id, year, float(self.population[i, j]), cov)

    def latitudes(self) -> np.ndarray:
        return np.array([c.latitude for c in self.cities])

    def longitudes(self) -> np.ndarray:
        return np.array([c.longitude for c in self.cities])

    def to_frame(self) -> pd.DataFrame:
        """Long-format view: one row per (city, year)."""
        n, t = self.n_cities, self.n_years
        out = {
            "city_id": np.repeat(self.city_ids, t),
            "year": np.tile(self.year_grid, n),
            "population": self.population.ravel(),
            "islamic": self.islamic.ravel().astype(int),
        }
        for name in COVARIATE_FIELDS:
            out[name] = self.covariates[name].ravel()
        return pd.DataFrame(out)


def build_panel(
    records: Iterable[CityRecord], observations: Iterable[PanelObservation]
) -> BalancedPanel:
    """Assemble and validate a :class:`BalancedPanel`.

    Every (city, year) cell must appear exactly once, every observation must
    reference a known city, and the observed years must form a contiguous
    century grid.

    Raises
    ------
    DuplicateCell, MissingCell, UnknownCity, YearOffGrid, NegativePopulation
    """
    records = sorted(records, key=lambda r: r.city_id)
    if len({r.city_id for r in records}) != len(records):
        raise DuplicateCell("duplicate city_id in city records")
    observations = list(observations)
    if not records or not observations:
        raise DataError("panel requires at least one city and one observation")

    years = sorted({o.year for o in observations})
    grid = tuple(range(years[0], years[-1] + 1, YEAR_STEP))
    if tuple(years) != grid:
        missing = sorted(set(grid) - set(years))
        raise MissingCell(f"century grid has gaps at {missing}")

    for rec in records:
        for y in grid:
            rec.islamic_in(y)  # raises DataError when undefined

    n, t = len(records), len(grid)
    city_index = {r.city_id: i for i, r in enumerate(records)}
    year_index = {y: j for j, y in enumerate(grid)}

    population = np.full((n, t), np.nan)
    covariates = {name: np.zeros((n, t)) for name in COVARIATE_FIELDS}
    seen = np.zeros((n, t), dtype=bool)
    for obs in observations:
        if obs.city_id not in city_index:
            raise UnknownCity(f"observation references unknown city {obs.city_id!r}")
        i, j = city_index[obs.city_id], year_index[obs.year]
        if seen[i, j]:
            raise DuplicateCell(f"duplicate cell ({obs.city_id}, {obs.year})")
        seen[i, j] = True
        population[i, j] = obs.population
        for name in COVARIATE_FIELDS:
            covariates[name][i, j] = getattr(obs.covariates, name)

    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise MissingCell(f"missing cell ({records[i].city_id}, {grid[j]})")

    islamic = np.zeros((n, t), dtype=bool)
    for i, rec in enumerate(records):
        for j, y in enumerate(grid):
            islamic[i, j] = rec.islamic_in(y)

    return BalancedPanel(records, grid, population, covariates, islamic)


def log_outcome(panel: BalancedPanel) -> np.ndarray:
    """Return ``ln(population + 1)`` as an ``(n_cities, n_years)`` array.

    The +1 offset keeps zero-population cells (abandoned sites) finite.
    ``np.expm1`` inverts the transform to full double precision.
    """
    pop = panel.population
    if np.any(pop < 0) or not np.all(np.isfinite(pop)):
        raise NegativePopulation("panel contains negative or non-finite populations")
    return np.log1p(pop)


# ---------------------------------------------------------------------------
# Treatment schedules
# ---------------------------------------------------------------------------


class TreatmentRule(Enum):
    """Which institutional adoption defines treatment, and after which break.

    * ``EUROPE_POST1100_LAW_SCHOOL`` — European cities, legal-training
      institutions, structural break at 1100.
    * ``ISLAM_POST1200_MADRASA`` — Islamic-rule cities, madrasas, structural
      break at 1200.
    """

    EUROPE_POST1100_LAW_SCHOOL = "europe_post1100_law_school"
    ISLAM_POST1200_MADRASA = "islam_post1200_madrasa"

    @property
    def break_year(self) -> int:
        return 1100 if self is TreatmentRule.EUROPE_POST1100_LAW_SCHOOL else 1200


class ExposureVariant(Enum):
    """Isolated own-city counts versus a radius-based network index."""

    ISOLATED = "isolated"
    RADIUS_NETWORK = "radius_network"


NEVER_TREATED = math.inf


@dataclass
class TreatmentSchedule:
    """Adoption cohorts and exposure intensities for one treatment rule.

    Attributes
    ----------
    city_ids : tuple[str, ...]
        Row order, matching the source panel.
    years : tuple[int, ...]
        The century grid.
    cohort : np.ndarray
        Per city: first post-break year with positive exposure, or ``inf``
        for never-treated cities.
    intensity : np.ndarray
        ``(n_cities, n_years)`` exposure-intensity path (counts or a
        network index).
    t0 : int
        The structural-break year.  The post indicator is ``year > t0``.
    """

    city_ids: tuple[str, ...]
    years: tuple[int, ...]
    cohort: np.ndarray
    intensity: np.ndarray
    t0: int
    rule: str = ""
    variant: str = ""

    def __post_init__(self):
        self.city_ids = tuple(self.city_ids)
        self.years = tuple(self.years)
        self.cohort = np.asarray(self.cohort, dtype=float)
        self.intensity = np.asarray(self.intensity, dtype=float)
        self.validate()

    def validate(self):
        n, t = len(self.city_ids), len(self.years)
        if self.cohort.shape != (n,) or self.intensity.shape != (n, t):
            raise DataError("schedule arrays do not match the city/year grid")
        if np.any(self.intensity < 0):
            raise DataError("exposure intensity must be non-negative")
        years = np.asarray(self.years)
        finite = np.isfinite(self.cohort)
        ever = self.intensity.max(axis=1) > 0
        post_any = (self.intensity[:, years > self.t0]).max(axis=1, initial=0) > 0
        if np.any(finite != post_any):
            bad = np.argwhere(finite != post_any).ravel()
            raise DataError(
                "cohort/intensity mismatch (finite cohort iff positive post-break "
                f"exposure) for cities {[self.city_ids[i] for i in bad]}"
            )
        del ever
        if np.any(self.cohort[finite] <= self.t0):
            raise DataError("treated cohorts must lie strictly after the break year")
        if finite.any() and not set(self.cohort[finite]).issubset(set(map(float, years))):
            raise DataError("cohorts must lie on the year grid")

    # -- derived indicators --------------------------------------------------
    @property
    def post(self) -> np.ndarray:
        """Time-based post indicator ``1[t > t0]``, shape ``(n_years,)``."""
        return np.asarray(self.years) > self.t0

    @property
    def treated(self) -> np.ndarray:
        """Ever-treated mask, shape ``(n_cities,)``."""
        return np.isfinite(self.cohort)

    def onset(self) -> np.ndarray:
        """Binary onset indicator ``1[t >= cohort_i]``, shape ``(n, t)``."""
        years = np.asarray(self.years, dtype=float)
        return (years[None, :] >= self.cohort[:, None]).astype(float)

    def treated_cells(self) -> np.ndarray:
        """Post-break positive-exposure indicator ``1[t > t0] * 1[intensity > 0]``."""
        return (self.intensity > 0).astype(float) * self.post[None, :].astype(float)


def build_treatment(
    panel: BalancedPanel,
    rule: TreatmentRule,
    variant: ExposureVariant = ExposureVariant.ISOLATED,
    institutions: Mapping[str, np.ndarray] | pd.DataFrame | None = None,
    radius_config=None,
) -> TreatmentSchedule:
    """Derive cohorts and exposure intensities from institution counts.

    Parameters
    ----------
    institutions
        Either a mapping of column name -> ``(n_cities, n_years)`` array
        (columns ``madrasa_count``, ``university``, ``law_faculty``) or a
        long DataFrame with ``city_id``/``year`` plus those columns, as
        produced by :func:`load_institutions`.
    variant
        ``ISOLATED`` uses the city's own counts;
        ``RADIUS_NETWORK`` replaces them with a radius-based index of
        neighbouring institutions (see :func:`citypanel.geo.radius_index`).

    The adoption cohort is the first grid year strictly after the rule's
    break with positive exposure; cities without post-break exposure are
    never treated (cohort ``inf``).

    Raises
    ------
    InconsistentSeries
        If exposure is positive for a city that is never part of the rule's
        treatment population (e.g. madrasas in a never-Islamic city).
    """
    if institutions is None:
        raise ConfigError("build_treatment requires institution series")
    inst = _institution_arrays(panel, institutions)

    if rule is TreatmentRule.ISLAM_POST1200_MADRASA:
        own = inst["madrasa_count"]
        in_population = panel.islamic.any(axis=1)
        label = "madrasas"
    else:
        own = inst["university"] * inst["law_faculty"]
        in_population = ~panel.islamic.all(axis=1)
        label = "law schools"

    ever_exposed = own.max(axis=1) > 0
    bad = ever_exposed & ~in_population
    if bad.any():
        names = [panel.city_ids[i] for i in np.nonzero(bad)[0]]
        raise InconsistentSeries(
            f"{label} recorded for cities outside the {rule.value} population: {names}"
        )

    if variant is ExposureVariant.RADIUS_NETWORK:
        from .geo import RadiusIndexConfig, radius_index

        cfg = radius_config or RadiusIndexConfig()
        intensity = radius_index(panel, own, cfg)
    else:
        intensity = own.astype(float)

    years = np.asarray(panel.year_grid, dtype=float)
    t0 = rule.break_year
    post_exposed = (intensity > 0) & (years[None, :] > t0)
    cohort = np.full(panel.n_cities, NEVER_TREATED)
    rows, cols = np.nonzero(post_exposed)
    for i in range(panel.n_cities):
        mine = cols[rows == i]
        if mine.size:
            cohort[i] = years[mine.min()]

    return TreatmentSchedule(
        city_ids=panel.city_ids,
        years=panel.year_grid,
        cohort=cohort,
        intensity=intensity,
        t0=t0,
        rule=rule.value,
        variant=variant.value,
    )


INSTITUTION_COLUMNS = ("madrasa_count", "university", "law_faculty")


def _institution_arrays(panel, institutions) -> dict[str, np.ndarray]:
    n, t = panel.n_cities, panel.n_years
    if isinstance(institutions, pd.DataFrame):
        arrays = {name: np.zeros((n, t)) for name in INSTITUTION_COLUMNS}
        for row in institutions.itertuples(index=False):
            i = panel.city_index(row.city_id)
            j = panel.year_index(int(row.year))
            for name in INSTITUTION_COLUMNS:
                arrays[name][i, j] = float(getattr(row, name))
    else:
        arrays = {name: np.asarray(institutions[name], dtype=float)
                  for name in INSTITUTION_COLUMNS}
    for name, arr in arrays.items():
        if arr.shape != (n, t):
            raise DataError(f"institution series {name} has shape {arr.shape}, "
                            f"expected {(n, t)}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise DataError(f"institution series {name} must be finite and >= 0")
    return arrays


# ---------------------------------------------------------------------------
# CSV ingestion / serialization
#
# Schemas (all comma-separated, header row required):
#   cities.csv        city_id,name,region,lat,lon,islamic_<year>,...
#   panel.csv         city_id,year,population_thousands
#   covariates.csv    city_id,year,<one column per covariate field>
#   institutions.csv  city_id,year,madrasa_count,university,law_faculty
# ---------------------------------------------------------------------------


def _require_columns(path, fieldnames, required):
    if fieldnames is None:
        raise DataError(f"{path}: empty file")
    missing = set(required) - set(fieldnames)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")


def load_cities(path) -> list[CityRecord]:
    """Read city metadata from ``cities.csv``."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(path, reader.fieldnames,
                         ("city_id", "name", "region", "lat", "lon"))
        flag_cols = [c for c in reader.fieldnames if c.startswith("islamic_")]
        for row in reader:
            try:
                region = Region(row["region"])
            except ValueError:
                raise DataError(f"unknown region {row['region']!r}") from None
            rule = {}
            for col in flag_cols:
                year = int(col.split("_", 1)[1])
                rule[year] = row[col].strip() in ("1", "true", "True")
            records.append(
                CityRecord(
                    city_id=row["city_id"],
                    name=row["name"],
                    region=region,
                    latitude=float(row["lat"]),
                    longitude=float(row["lon"]),
                    islamic_rule=rule,
                )
            )
    return records


def load_panel_csv(cities_path, panel_path, covariates_path=None) -> BalancedPanel:
    """Build a :class:`BalancedPanel` from the documented CSV files."""
    records = load_cities(cities_path)
    cov_by_cell: dict[tuple[str, int], CovariateVector] = {}
    if covariates_path is not None:
        with open(covariates_path, newline="") as fh:
            reader = csv.DictReader(fh)
            _require_columns(covariates_path, reader.fieldnames,
                             ("city_id", "year"))
            for row in reader:
                key = (row["city_id"], _parse_year(covariates_path, row["year"]))
                values = {
                    name: float(row[name]) for name in COVARIATE_FIELDS if name in row
                }
                cov_by_cell[key] = CovariateVector(**values)
    observations = []
    with open(panel_path, newline="") as fh:
        reader = csv.DictReader(fh)
        _require_columns(panel_path, reader.fieldnames,
                         ("city_id", "year", "population_thousands"))
        for row in reader:
            year = _parse_year(panel_path, row["year"])
            try:
                population = float(row["population_thousands"])
            except ValueError:
                raise DataError(
                    f"bad population {row['population_thousands']!r}"
                ) from None
            cov = cov_by_cell.get((row["city_id"], year), CovariateVector())
            observations.append(
                PanelObservation(row["city_id"], year, population, cov)
            )
    return build_panel(records, observations)


def _parse_year(path, raw) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise DataError(f"{path}: bad year value {raw!r}") from None


def load_institutions(path) -> pd.DataFrame:
    """Read ``institutions.csv`` into a long DataFrame."""
    df = pd.read_csv(path)
    missing = {"city_id", "year", *INSTITUTION_COLUMNS} - set(df.columns)
    if missing:
        raise DataError(f"{path}: missing institution columns {sorted(missing)}")
    return df


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the float exactly."""
    return repr(float(x))


def write_panel_csvs(panel: BalancedPanel, out_dir) -> dict[str, Path]:
    """Serialize a panel to the documented CSV schemas.

    Floats are written with round-trip precision so that
    ``load_panel_csv(write_panel_csvs(panel))`` reproduces the grid
    bit-exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    cities_path = out_dir / "cities.csv"
    with open(cities_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        flag_cols = [f"islamic_{y}" for y in panel.year_grid]
        writer.writerow(["city_id", "name", "region", "lat", "lon", *flag_cols])
        for rec in panel.cities:
            writer.writerow(
                [
                    rec.city_id,
                    rec.name,
                    rec.region.value,
                    _fmt(rec.latitude),
                    _fmt(rec.longitude),
                    *(int(rec.islamic_in(y)) for y in panel.year_grid),
                ]
            )
    paths["cities"] = cities_path

    panel_path = out_dir / "panel.csv"
    with open(panel_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["city_id", "year", "population_thousands"])
        for i, cid in enumerate(panel.city_ids):
            for j, year in enumerate(panel.year_grid):
                writer.writerow([cid, year, _fmt(panel.population[i, j])])
    paths["panel"] = panel_path

    cov_path = out_dir / "covariates.csv"
    with open(cov_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["city_id", "year", *COVARIATE_FIELDS])
        for i, cid in enumerate(panel.city_ids):
            for j, year in enumerate(panel.year_grid):
                writer.writerow(
                    [cid, year]
                    + [_fmt(panel.covariates[name][i, j]) for name in COVARIATE_FIELDS]
                )
    paths["covariates"] = cov_path
    return paths
