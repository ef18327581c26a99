"""Synthetic city panels with known treatment effects.

Generates balanced panels from a log-linear components model

    log(1 + pop_it) = eta0 + unit_i + period_t + beta * x_i
                      + sum_f load_if * factor_ft + tau * D_it + sigma * eps_it

so every estimator in the package can be checked against ground truth.
All randomness flows through counter-based generators keyed by
``(seed, stream)``; the same seed always yields the same panel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .panel import (
    FULL_YEAR_GRID,
    BalancedPanel,
    CityRecord,
    CovariateVector,
    PanelObservation,
    Region,
    TreatmentSchedule,
    build_panel,
)
from .rng import make_rng


@dataclass
class SimulationTruth:
    """Everything the generator knows that an estimator must recover."""

    tau: float
    unit_effects: np.ndarray
    period_effects: np.ndarray
    beta: float
    x: np.ndarray
    loadings: np.ndarray
    factors: np.ndarray
    onset: np.ndarray            # (N, T) bool treatment indicator
    cohort: np.ndarray           # (N,) first treated year, inf if never
    log_outcome: np.ndarray      # (N, T) latent log(1 + population)
    sigma: float
    seed: int

    @property
    def percent_effect(self) -> float:
        return float(np.expm1(self.tau))


@dataclass
class SimulationConfig:
    """Knobs for :func:`simulate_panel`; JSON-serialisable.

    The default shape mirrors the historical panels: 200 cities over the
    11-century grid, adoption staggered over 1300/1400/1500.
    ``select_x``/``select_loadings`` tilt who gets treated toward cities
    with high covariate values or first-factor loadings (confounded
    designs); at zero, the first ``n_treated`` cities are treated.
    """

    n_cities: int = 200
    n_treated: int = 60
    tau: float = 0.25
    sigma: float = 0.10
    beta: float = 0.5
    n_factors: int = 0
    factor_scale: float = 0.5
    cohort_years: tuple[int, ...] = (1300, 1400, 1500)
    staggered: bool = True
    trend_gap: float = 0.0       # extra per-period drift for treated cities
    select_x: float = 0.0        # selection-on-covariate strength
    select_loadings: float = 0.0  # selection-on-factor-loading strength
    noise_ar: float = 0.0        # AR(1) coefficient of the within-city noise
    seed: int = 0

    @classmethod
    def from_json(cls, path: str | Path) -> "SimulationConfig":
        raw = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown simulation keys: {sorted(extra)}")
        if "cohort_years" in raw:
            raw["cohort_years"] = tuple(int(y) for y in raw["cohort_years"])
        return cls(**raw)

    def validate(self) -> None:
        if self.n_cities < 4:
            raise ConfigError("need at least 4 cities")
        if not 0 < self.n_treated < self.n_cities:
            raise ConfigError("n_treated must be in (0, n_cities)")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if not -1.0 < self.noise_ar < 1.0:
            raise ConfigError("noise_ar must lie in (-1, 1)")
        for y in self.cohort_years:
            if y not in FULL_YEAR_GRID:
                raise ConfigError(f"cohort year {y} not on the century grid")


def _made_up_city(i: int, rng) -> CityRecord:
    lat = float(rng.uniform(30.0, 55.0))
    lon = float(rng.uniform(-10.0, 45.0))
    islamic = bool(i % 2)
    return CityRecord(
        city_id=f"sim{i:03d}",
        name=f"Simville {i}",
        region=Region.LEVANTINE if islamic else Region.WESTERN_EUROPE,
        latitude=lat,
        longitude=lon,
        islamic_rule={y: islamic for y in FULL_YEAR_GRID},
    )


def simulate_panel(
    config: SimulationConfig | None = None, **overrides
) -> tuple[BalancedPanel, TreatmentSchedule, SimulationTruth]:
    """Draw one synthetic panel plus its treatment schedule and truth.

    Treated cities are the first ``n_treated`` indices; under
    ``staggered=True`` they rotate through ``cohort_years``.  The outcome
    on the population scale is ``expm1`` of the latent log outcome, so
    ``log1p(population)`` reproduces the latent value exactly.
    """
    cfg = config or SimulationConfig()
    if overrides:
        cfg = SimulationConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()

    years = np.array(FULL_YEAR_GRID, dtype=float)
    n, t = cfg.n_cities, len(years)
    rng_unit = make_rng(cfg.seed, 1)
    rng_time = make_rng(cfg.seed, 2)
    rng_noise = make_rng(cfg.seed, 3)
    rng_factor = make_rng(cfg.seed, 4)

    unit = rng_unit.normal(2.0, 0.5, size=n)
    period = np.cumsum(rng_time.normal(0.05, 0.02, size=t))
    x = rng_unit.normal(0.0, 1.0, size=n)
    if cfg.n_factors > 0:
        loadings = rng_factor.normal(0.0, cfg.factor_scale, size=(n, cfg.n_factors))
        factors = rng_factor.normal(0.0, 1.0, size=(cfg.n_factors, t))
    else:
        loadings = np.zeros((n, 0))
        factors = np.zeros((0, t))

    # treatment assignment: rank cities by the selection score (stable, so
    # with both knobs at zero the first n_treated indices are treated)
    load1 = loadings[:, 0] if cfg.n_factors > 0 else np.zeros(n)
    score = cfg.select_x * x + cfg.select_loadings * load1
    ranked = np.argsort(-score, kind="stable")
    cohort = np.full(n, math.inf)
    for rank, i in enumerate(ranked[: cfg.n_treated]):
        if cfg.staggered:
            cohort[i] = cfg.cohort_years[rank % len(cfg.cohort_years)]
        else:
            cohort[i] = cfg.cohort_years[0]
    onset = years[None, :] >= cohort[:, None]

    noise = rng_noise.normal(size=(n, t))
    if cfg.noise_ar:
        # serially correlated within-city errors; marginal variance grows
        # to sigma^2 / (1 - noise_ar^2) as the recursion mixes in
        for j in range(1, t):
            noise[:, j] += cfg.noise_ar * noise[:, j - 1]

    eta0 = 1.0
    log_y = (
        eta0
        + unit[:, None]
        + period[None, :]
        + cfg.beta * x[:, None]
        + loadings @ factors
        + cfg.tau * onset
        + cfg.sigma * noise
    )
    if cfg.trend_gap:
        steps = np.arange(t)
        log_y = log_y + cfg.trend_gap * steps[None, :] * (cohort[:, None] < math.inf)
    population = np.expm1(log_y)
    population = np.clip(population, 0.0, None)

    cities = [_made_up_city(i, make_rng(cfg.seed, 5, i)) for i in range(n)]
    observations = []
    for i, city in enumerate(cities):
        for j, year in enumerate(FULL_YEAR_GRID):
            observations.append(
                PanelObservation(
                    city_id=city.city_id,
                    year=int(year),
                    population=float(population[i, j]),
                    covariates=CovariateVector(),
                )
            )
    panel = build_panel(cities, observations)

    # reorder truth rows to the panel's sorted city order
    order = np.argsort([c.city_id for c in cities], kind="stable")
    schedule = TreatmentSchedule(
        city_ids=panel.city_ids,
        years=panel.year_grid,
        cohort=cohort[order],
        intensity=onset[order].astype(float),
        t0=int(min(cfg.cohort_years)) - 100,
        rule="simulated",
    )
    truth = SimulationTruth(
        tau=cfg.tau,
        unit_effects=unit[order],
        period_effects=period,
        beta=cfg.beta,
        x=x[order],
        loadings=loadings[order],
        factors=factors,
        onset=onset[order],
        cohort=cohort[order],
        log_outcome=log_y[order],
        sigma=cfg.sigma,
        seed=cfg.seed,
    )
    return panel, schedule, truth


def brute_force_att(
    panel: BalancedPanel,
    schedule,
    truth: SimulationTruth | None = None,
    control: str = "never_treated",
) -> dict[tuple[int, int], float]:
    """Cohort-time reference effects by explicit loops, no linear algebra.

    For cohort ``g`` at year ``t`` (every year except the base period
    ``g - step``): mean over cohort-``g`` cities of
    ``log1p(pop_t) - log1p(pop_base)`` minus the same mean over control
    cities.  Pure-Python group-mean arithmetic, the independent oracle the
    vectorised :func:`citypanel.did.cs_att` is checked against.  ``truth``
    is accepted as a reminder that this is a simulation-only tool; it does
    not enter the computation.
    """
    years = list(panel.year_grid)
    step = years[1] - years[0] if len(years) > 1 else 100
    cities = range(panel.n_cities)
    G = [float(g) for g in schedule.cohort]
    cohorts = sorted({g for g in G if math.isfinite(g)})
    out: dict[tuple[int, int], float] = {}
    for g in cohorts:
        base = years.index(int(g) - step)
        for j, t in enumerate(years):
            if j == base:
                continue
            treated_diffs = []
            control_diffs = []
            for i in cities:
                diff = math.log1p(panel.population[i][j]) - math.log1p(
                    panel.population[i][base]
                )
                if G[i] == g:
                    treated_diffs.append(diff)
                elif control == "never_treated" and math.isinf(G[i]):
                    control_diffs.append(diff)
                elif control == "not_yet_treated" and G[i] > max(t, g):
                    control_diffs.append(diff)
            if not treated_diffs or not control_diffs:
                continue
            out[(int(g), int(t))] = sum(treated_diffs) / len(treated_diffs) - sum(
                control_diffs
            ) / len(control_diffs)
    if not out:
        raise ConfigError("no defined cohort-time contrast in this panel")
    return out
