"""Shared panel-building helpers for the test suite."""

import math

import numpy as np
import pytest

from citypanel.panel import (
    FULL_YEAR_GRID,
    CityRecord,
    CovariateVector,
    PanelObservation,
    Region,
    TreatmentSchedule,
    build_panel,
)


def make_panel(populations, islamic=None, coords=None, year0=800,
               covariates=None, region=None):
    """BalancedPanel from an (n_cities, n_years) population array.

    City ids are c00, c01, ... in row order.  ``islamic`` is a per-city
    bool (constant over years); ``coords`` a list of (lat, lon);
    ``covariates`` a dict name -> (n, t) array.
    """
    populations = np.asarray(populations, dtype=float)
    n, t = populations.shape
    years = tuple(range(year0, year0 + 100 * t, 100))
    assert set(years) <= set(FULL_YEAR_GRID)
    islamic = list(islamic) if islamic is not None else [False] * n
    coords = coords if coords is not None else [(40.0 + i, 10.0) for i in range(n)]
    cities = [
        CityRecord(
            city_id=f"c{i:02d}",
            name=f"City {i}",
            region=(region or (Region.LEVANTINE if islamic[i] else Region.WESTERN_EUROPE)),
            latitude=float(coords[i][0]),
            longitude=float(coords[i][1]),
            islamic_rule={y: bool(islamic[i]) for y in years},
        )
        for i in range(n)
    ]
    obs = []
    for i in range(n):
        for j, y in enumerate(years):
            cov = {}
            for name, arr in (covariates or {}).items():
                cov[name] = float(np.asarray(arr)[i, j])
            obs.append(
                PanelObservation(f"c{i:02d}", y, float(populations[i, j]),
                                 CovariateVector(**cov))
            )
    return build_panel(cities, obs)


def make_schedule(panel, cohorts, t0=None, intensity=None, rule=""):
    """Binary-onset schedule: ``cohorts`` is a per-city year or None/inf."""
    cohort = np.array(
        [math.inf if (g is None or math.isinf(g)) else float(g) for g in cohorts]
    )
    years = np.asarray(panel.year_grid, dtype=float)
    if intensity is None:
        intensity = (years[None, :] >= cohort[:, None]).astype(float)
    if t0 is None:
        finite = cohort[np.isfinite(cohort)]
        t0 = int(finite.min()) - 100 if finite.size else int(years[0])
    return TreatmentSchedule(
        city_ids=panel.city_ids,
        years=panel.year_grid,
        cohort=cohort,
        intensity=np.asarray(intensity, dtype=float),
        t0=int(t0),
        rule=rule,
    )


@pytest.fixture
def hand_panel():
    """Two cities, three years; log outcomes (1,2,5) and (1,2,3)."""
    logs = np.array([[1.0, 2.0, 5.0], [1.0, 2.0, 3.0]])
    return make_panel(np.expm1(logs))


@pytest.fixture
def hand_schedule(hand_panel):
    return make_schedule(hand_panel, [1000, None], t0=900)
